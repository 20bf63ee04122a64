//! Implicit cross-modal interaction: channel reduction of the concatenated
//! modality maps, a pre-norm transformer over spatial tokens and the
//! classification head.

use serde::{Deserialize, Serialize};

use crate::rng::{he_normal, normal_tensor, Rng};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl FusionConfig {
    /// Two layers, four heads, feed-forward width `2 * channels`.
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            layers: 2,
            heads: 4,
            ff_width: 2 * channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("fusion widths and head count must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Learned 1x1 convolution from the concatenated modality channels to `C_fusion`.
#[derive(Clone, Debug)]
pub struct FusionReducer {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
}

impl FusionReducer {
    pub fn new(in_channels: usize, out_channels: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let weight = store.add(
            "fuse.w",
            he_normal(rng, &[out_channels, in_channels, 1, 1], in_channels, 1.0),
        );
        let bias = store.add("fuse.b", Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Concatenates `parts` along channels and reduces to `C_fusion`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, parts: &[NodeId]) -> Result<NodeId> {
        let x = g.concat_channels(parts)?;
        if g.shape(x)[0] != self.in_channels {
            return Err(Error::Config(format!(
                "fusion expects {} input channels, got {}",
                self.in_channels,
                g.shape(x)[0]
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, Some(b), 1, 0)?)
    }
}

/// `(C, H, W)` map to `(H*W, C)` tokens, row-major over positions.
pub fn to_tokens(g: &mut Graph, map: NodeId) -> Result<NodeId> {
    let s = g.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::Data(format!("expected a (C, H, W) map, got {s:?}")));
    }
    let flat = g.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(flat)?)
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, w: Tensor, out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

/// Attention weights of one forward pass, `[layer][head]`, each `(T, T)`.
pub type AttentionTrace = Vec<Vec<NodeId>>;

/// Pre-norm transformer encoder without positional encoding, closed by a
/// final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: FusionConfig,
    layers: Vec<Layer>,
    final_norm: Norm,
}

impl Transformer {
    pub fn new(config: FusionConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let f = config.ff_width;
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("tf.l{l}");
                Layer {
                    ln1: Norm::new(store, &format!("{p}.ln1"), d),
                    q: Dense::new(store, &format!("{p}.q"), normal_tensor(rng, &[d, d], sd), d),
                    k: Dense::new(store, &format!("{p}.k"), normal_tensor(rng, &[d, d], sd), d),
                    v: Dense::new(store, &format!("{p}.v"), normal_tensor(rng, &[d, d], sd), d),
                    o: Dense::new(store, &format!("{p}.o"), normal_tensor(rng, &[d, d], 0.5 * sd), d),
                    ln2: Norm::new(store, &format!("{p}.ln2"), d),
                    ff1: Dense::new(store, &format!("{p}.ff1"), he_normal(rng, &[f, d], d, 1.0), f),
                    ff2: Dense::new(store, &format!("{p}.ff2"), he_normal(rng, &[d, f], f, 0.5), d),
                }
            })
            .collect();
        let final_norm = Norm::new(store, "tf.ln_f", d);
        Ok(Self {
            config,
            layers,
            final_norm,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Query/key projection weights of a layer, for tests that pin attention.
    pub fn qk_weights(&self, layer: usize) -> [ParamId; 4] {
        let l = &self.layers[layer];
        [l.q.w, l.q.b, l.k.w, l.k.b]
    }

    /// Maps `(T, D)` tokens to `(T, D)` tokens.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId) -> Result<(NodeId, AttentionTrace)> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.config.channels || s[0] == 0 {
            return Err(Error::Data(format!(
                "transformer expects (T, {}) tokens with T > 0, got {s:?}",
                self.config.channels
            )));
        }
        let heads = self.config.heads;
        let dh = self.config.channels / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tokens;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.ln1.forward(g, store, x)?;
            let q = layer.q.forward(g, store, h)?;
            let k = layer.k.forward(g, store, h)?;
            let v = layer.v.forward(g, store, h)?;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice(q, 1, hd * dh, dh)?;
                let kh = g.slice(k, 1, hd * dh, dh)?;
                let vh = g.slice(v, 1, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.softmax(scores, 1)?;
                maps.push(attn);
                outs.push(g.matmul(attn, vh)?);
            }
            let heads_out = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
            let a = layer.o.forward(g, store, heads_out)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, store, x)?;
            let h = layer.ff1.forward(g, store, h)?;
            let h = g.relu(h)?;
            let h = layer.ff2.forward(g, store, h)?;
            x = g.add(x, h)?;
            trace.push(maps);
        }
        let x = self.final_norm.forward(g, store, x)?;
        Ok((x, trace))
    }
}

/// Fully connected head producing class logits from a `C_fusion` vector.
#[derive(Clone, Debug)]
pub struct Classifier {
    fc: Dense,
    classes: usize,
}

impl Classifier {
    pub fn new(in_features: usize, classes: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = normal_tensor(rng, &[classes, in_features], 1.0 / (in_features as f64).sqrt());
        Self {
            fc: Dense::new(store, "head", w, classes),
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> ParamId {
        self.fc.w
    }

    pub fn bias(&self) -> ParamId {
        self.fc.b
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<NodeId> {
        self.fc.forward(g, store, features)
    }
}

/// Mean-pools `(T, D)` tokens into a `D` vector.
pub fn pool_tokens(g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
    Ok(g.mean(tokens, 0)?)
}

/// Softmax over the last axis of `(n)` or `(B, n)` logits.
pub fn classify(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let axis = g.shape(logits).len().checked_sub(1).ok_or_else(|| {
        Error::Data("logits must have at least one axis".into())
    })?;
    Ok(g.softmax(logits, axis)?)
}

/// `-mean_b sum_n y ln p` over a `(B, n)` probability batch.
pub fn loss(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    Ok(g.cross_entropy(probs, labels)?)
}
