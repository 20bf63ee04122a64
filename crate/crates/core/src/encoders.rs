//! Residual convolutional encoders for the two slit-lamp image types.
//!
//! One [`Encoder`] is built per image type; both images of a pair go through
//! the same parameters and their feature maps are concatenated channel-wise.

use serde::{Deserialize, Serialize};

use crate::rng::{he_normal, Rng};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageKind {
    Overall,
    AcObservation,
}

impl ImageKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ImageKind::Overall => "enc_overall",
            ImageKind::AcObservation => "enc_ac",
        }
    }
}

/// Two rasters of one kind, each `(C, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlitLampPair {
    images: [Tensor; 2],
    kind: ImageKind,
}

impl SlitLampPair {
    pub fn new(kind: ImageKind, first: Tensor, second: Tensor) -> Result<Self> {
        if first.shape().len() != 3 || first.shape() != second.shape() {
            return Err(Error::Data(format!(
                "{kind:?} pair shapes differ or are not (C, H, W): {:?} vs {:?}",
                first.shape(),
                second.shape()
            )));
        }
        for t in [&first, &second] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("{kind:?} image values outside [0, 1]")));
            }
        }
        Ok(Self {
            images: [first, second],
            kind,
        })
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn images(&self) -> &[Tensor; 2] {
        &self.images
    }

    pub fn shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn swapped(&self) -> Self {
        let [a, b] = self.images.clone();
        Self {
            images: [b, a],
            kind: self.kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    /// Spatial downsampling applied by the first block of the stage.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
}

impl EncoderConfig {
    /// Stem plus three single-block stages, 8 -> 16 -> 32 channels, downsample 8.
    pub fn desk_64() -> Self {
        Self {
            in_channels: 1,
            input_height: 64,
            input_width: 64,
            stem_width: 8,
            stem_kernel: 3,
            stem_stride: 1,
            stages: vec![
                StageConfig { width: 8, blocks: 1, stride: 2 },
                StageConfig { width: 16, blocks: 1, stride: 2 },
                StageConfig { width: 32, blocks: 1, stride: 2 },
            ],
        }
    }

    /// 16x16 grayscale inputs, 8 output channels on a 4x4 grid.
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            input_height: 16,
            input_width: 16,
            stem_width: 8,
            stem_kernel: 3,
            stem_stride: 2,
            stages: vec![
                StageConfig { width: 8, blocks: 1, stride: 2 },
                StageConfig { width: 8, blocks: 1, stride: 1 },
            ],
        }
    }

    /// 8x8 inputs, 4 output channels on a 4x4 grid.
    pub fn micro() -> Self {
        Self {
            in_channels: 1,
            input_height: 8,
            input_width: 8,
            stem_width: 4,
            stem_kernel: 3,
            stem_stride: 1,
            stages: vec![StageConfig { width: 4, blocks: 1, stride: 2 }],
        }
    }

    /// ResNet18 layout: 7x7 stem, four stages of two blocks, 64 -> 512 channels.
    pub fn resnet18_like(in_channels: usize, size: usize) -> Self {
        Self {
            in_channels,
            input_height: size,
            input_width: size,
            stem_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stages: vec![
                StageConfig { width: 64, blocks: 2, stride: 2 },
                StageConfig { width: 128, blocks: 2, stride: 2 },
                StageConfig { width: 256, blocks: 2, stride: 2 },
                StageConfig { width: 512, blocks: 2, stride: 2 },
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn total_downsample(&self) -> usize {
        self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn output_hw(&self) -> (usize, usize) {
        let d = self.total_downsample();
        (self.input_height / d, self.input_width / d)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.total_downsample();
        if d == 0 || self.input_height % d != 0 || self.input_width % d != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by total downsample factor {d}",
                self.input_height, self.input_width
            )));
        }
        if self.in_channels == 0 || self.stem_width == 0 || self.stem_kernel % 2 == 0 {
            return Err(Error::Config(
                "encoder needs positive channels and an odd stem kernel".into(),
            ));
        }
        if self.stages.iter().any(|s| s.width == 0 || s.blocks == 0 || s.stride == 0) {
            return Err(Error::Config("encoder stages need positive width, blocks and stride".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_height, self.input_width]
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            he_normal(rng, &[cout, cin, k, k], cin * k * k, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl Block {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y)?)
    }
}

/// Residual convnet: conv stem, then stages of basic two-conv blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(prefix: &str, config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            config.in_channels,
            config.stem_width,
            config.stem_kernel,
            config.stem_stride,
            1.0,
        );
        let mut blocks = Vec::new();
        let mut cin = config.stem_width;
        for (si, stage) in config.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("{prefix}.s{si}b{bi}");
                let stride = if bi == 0 { stage.stride } else { 1 };
                let conv1 = Conv::new(store, rng, &format!("{name}.c1"), cin, stage.width, 3, stride, 1.0);
                // residual branch starts small so the block is near identity
                let conv2 = Conv::new(store, rng, &format!("{name}.c2"), stage.width, stage.width, 3, 1, 0.5);
                let shortcut = (stride != 1 || cin != stage.width).then(|| {
                    Conv::new(store, rng, &format!("{name}.sc"), cin, stage.width, 1, stride, 1.0)
                });
                blocks.push(Block { conv1, conv2, shortcut });
                cin = stage.width;
            }
        }
        Ok(Self { config, stem, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Feature map `(C_enc, H', W')` of a single `(C_in, H, W)` image.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: NodeId) -> Result<NodeId> {
        let expected = self.config.input_shape();
        if g.shape(image) != expected {
            return Err(Error::Data(format!(
                "encoder expects input {expected:?}, got {:?}",
                g.shape(image)
            )));
        }
        let x = self.stem.forward(g, store, image)?;
        let mut x = g.relu(x)?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        Ok(x)
    }
}

/// Feature maps of both images of a pair and their channel concatenation.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub first: NodeId,
    pub second: NodeId,
    pub concat: NodeId,
}

pub fn encode_pair(g: &mut Graph, store: &ParamStore, encoder: &Encoder, pair: &SlitLampPair) -> Result<EncodedPair> {
    let [a, b] = pair.images();
    let ia = g.input(a.clone());
    let ib = g.input(b.clone());
    let first = encoder.forward(g, store, ia)?;
    let second = encoder.forward(g, store, ib)?;
    let concat = g.concat_channels(&[first, second])?;
    Ok(EncodedPair { first, second, concat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn random_image(rng: &mut Rng, shape: [usize; 3]) -> Tensor {
        let mut t = normal_tensor(rng, &shape, 0.3);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
        t
    }

    #[test]
    fn desk_64_shapes() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::desk_64();
        let enc = Encoder::new("e", cfg.clone(), &mut store, &mut rng).unwrap();
        let pair = SlitLampPair::new(
            ImageKind::Overall,
            random_image(&mut rng, cfg.input_shape()),
            random_image(&mut rng, cfg.input_shape()),
        )
        .unwrap();
        let mut g = Graph::new();
        let out = encode_pair(&mut g, &store, &enc, &pair).unwrap();
        assert_eq!(g.shape(out.first), &[32, 8, 8]);
        assert_eq!(g.shape(out.second), &[32, 8, 8]);
        assert_eq!(g.shape(out.concat), &[64, 8, 8]);
    }

    #[test]
    fn identical_images_give_identical_halves() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::desk();
        let enc = Encoder::new("e", cfg.clone(), &mut store, &mut rng).unwrap();
        let img = random_image(&mut rng, cfg.input_shape());
        let pair = SlitLampPair::new(ImageKind::AcObservation, img.clone(), img).unwrap();
        let mut g = Graph::new();
        let out = encode_pair(&mut g, &store, &enc, &pair).unwrap();
        assert_eq!(g.value(out.first), g.value(out.second));
        let c = g.out_channels_halves(out.concat);
        assert_eq!(c.0, c.1);
    }

    #[test]
    fn indivisible_input_is_rejected_at_construction() {
        let mut cfg = EncoderConfig::desk();
        cfg.input_height = 18;
        let mut store = ParamStore::new();
        let err = Encoder::new("e", cfg, &mut store, &mut seeded(0)).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn pair_rejects_out_of_range_and_mismatch() {
        let a = Tensor::full(&[1, 4, 4], 0.5);
        assert!(SlitLampPair::new(ImageKind::Overall, a.clone(), Tensor::full(&[1, 4, 4], 1.5)).is_err());
        assert!(SlitLampPair::new(ImageKind::Overall, a, Tensor::full(&[1, 4, 8], 0.5)).is_err());
    }

    impl Graph {
        fn out_channels_halves(&self, id: NodeId) -> (Vec<f64>, Vec<f64>) {
            let d = self.value(id).data();
            let (a, b) = d.split_at(d.len() / 2);
            (a.to_vec(), b.to_vec())
        }
    }
}
