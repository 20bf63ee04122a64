//! Full network assembly with the ablation switches.

use serde::{Deserialize, Serialize};

use crate::ecim;
use crate::encoders::{encode_pair, Encoder, EncoderConfig, ImageKind, SlitLampPair};
use crate::icim::{self, AttentionTrace, Classifier, FusionConfig, FusionReducer, Transformer};
use crate::rng::derive;
use crate::tabular::{broadcast_map, ClinicalRecord, NormStats, TabularEncoder};
use crate::rng::{seeded, normal_tensor};
use crate::tensor::{grad_check, GradCheckReport, Graph, NodeId, ParamStore};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 2;

/// Which branches take part. `ecim` is only honored when both the AC encoder
/// and the tabular branch are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub overall_encoder: bool,
    pub ac_encoder: bool,
    pub tpm: bool,
    pub ecim: bool,
    pub icim: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            overall_encoder: true,
            ac_encoder: true,
            tpm: true,
            ecim: true,
            icim: true,
        }
    }

    pub fn normalized(mut self) -> Self {
        if !self.ac_encoder || !self.tpm {
            self.ecim = false;
        }
        self
    }

    /// The six rows of the ablation table: five removals, then the full model.
    pub fn table_rows() -> [Self; 6] {
        let f = Self::full();
        [
            Self { ecim: false, ..f },
            Self { icim: false, ..f },
            Self { overall_encoder: false, ..f },
            Self { ac_encoder: false, ..f }.normalized(),
            Self { tpm: false, ..f }.normalized(),
            f,
        ]
    }

    /// Parses a comma list of branches to switch off, e.g. `ecim,overall`.
    pub fn parse_disabled(spec: &str) -> Result<Self> {
        let mut a = Self::full();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "overall" | "overall_encoder" => a.overall_encoder = false,
                "ac" | "ac_encoder" => a.ac_encoder = false,
                "tpm" | "tabular" => a.tpm = false,
                "ecim" => a.ecim = false,
                "icim" => a.icim = false,
                other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a.normalized())
    }

    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.overall_encoder {
            off.push("overall");
        }
        if !self.ac_encoder {
            off.push("ac");
        }
        if !self.tpm {
            off.push("tpm");
        }
        if !self.ecim {
            off.push("ecim");
        }
        if !self.icim {
            off.push("icim");
        }
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub overall: EncoderConfig,
    pub ac: EncoderConfig,
    pub fusion: FusionConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// C = 4, 8x8 inputs; sized for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            overall: EncoderConfig::micro(),
            ac: EncoderConfig::micro(),
            fusion: FusionConfig {
                channels: 4,
                layers: 1,
                heads: 2,
                ff_width: 8,
            },
            ablation: Ablation::full(),
        }
    }

    /// C = 8, 16x16 inputs; the default for training runs.
    pub fn desk() -> Self {
        Self {
            overall: EncoderConfig::desk(),
            ac: EncoderConfig::desk(),
            fusion: FusionConfig::with_channels(8),
            ablation: Ablation::full(),
        }
    }

    /// C = 32, 64x64 inputs.
    pub fn desk_64() -> Self {
        Self {
            overall: EncoderConfig::desk_64(),
            ac: EncoderConfig::desk_64(),
            fusion: FusionConfig::with_channels(32),
            ablation: Ablation::full(),
        }
    }

    /// ResNet18-style encoders on 224x224 RGB, C = 512, C_fusion = 512.
    pub fn large() -> Self {
        Self {
            overall: EncoderConfig::resnet18_like(3, 224),
            ac: EncoderConfig::resnet18_like(3, 224),
            fusion: FusionConfig::with_channels(512),
            ablation: Ablation::full(),
        }
    }

    pub fn base_channels(&self) -> usize {
        self.ac.out_channels()
    }

    /// Channels entering the fusion reducer under the current ablation.
    pub fn fusion_in_channels(&self) -> usize {
        let a = self.ablation.normalized();
        let c = self.base_channels();
        2 * c * usize::from(a.overall_encoder) + 2 * c * usize::from(a.ac_encoder) + c * usize::from(a.tpm)
    }

    pub fn validate(&self) -> Result<()> {
        self.overall.validate()?;
        self.ac.validate()?;
        self.fusion.validate()?;
        if self.overall.out_channels() != self.ac.out_channels() {
            return Err(Error::Config(format!(
                "overall encoder width {} differs from AC encoder width {}",
                self.overall.out_channels(),
                self.ac.out_channels()
            )));
        }
        if self.overall.output_hw() != self.ac.output_hw() {
            return Err(Error::Config("encoders must produce the same spatial grid".into()));
        }
        let a = self.ablation;
        if !a.overall_encoder && !a.ac_encoder && !a.tpm {
            return Err(Error::Config("at least one modality branch must be enabled".into()));
        }
        Ok(())
    }
}

/// One eye: two overall images, two AC observation images and the tabular record.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub overall: SlitLampPair,
    pub ac: SlitLampPair,
    pub record: ClinicalRecord,
    /// 1 = inflammation active.
    pub label: usize,
}

/// Sample with Gaussian images sized for `config` and a plausible record;
/// used for gradient checks and smoke runs.
pub fn random_sample(config: &ModelConfig, seed: u64, label: usize) -> Result<Sample> {
    let mut rng = seeded(seed);
    let mut img = |shape: [usize; 3]| {
        let mut t = normal_tensor(&mut rng, &shape, 0.2);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
        t
    };
    let (o, a) = (config.overall.input_shape(), config.ac.input_shape());
    let (o1, o2, a1, a2) = (img(o), img(o), img(a), img(a));
    Ok(Sample {
        id: format!("random{seed}"),
        overall: SlitLampPair::new(ImageKind::Overall, o1, o2)?,
        ac: SlitLampPair::new(ImageKind::AcObservation, a1, a2)?,
        record: ClinicalRecord {
            gender: (seed % 2) as u8,
            age: 20.0 + (seed % 50) as f64,
            bcva: 0.1 + 0.1 * (seed % 9) as f64,
            iop: 10.0 + (seed % 7) as f64,
            kp_grade: (seed % 5) as f64,
            flare_grade: [0.0, 0.5, 1.0, 2.0][(seed % 4) as usize],
            cell_area_mm2: 0.005 * (seed % 11) as f64,
            cell_count: (seed % 13) as u32,
            ari: 1.2 + 0.05 * (seed % 6) as f64,
        },
        label,
    })
}

/// Nodes of one forward pass that downstream tools inspect.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub ac_features: Option<[NodeId; 2]>,
    pub ecim_maps: Option<[NodeId; 2]>,
    pub tab_vector: Option<NodeId>,
    pub attention: AttentionTrace,
}

#[derive(Clone, Debug)]
pub struct EiciNet {
    config: ModelConfig,
    pub params: ParamStore,
    overall: Option<Encoder>,
    ac: Option<Encoder>,
    tab: Option<TabularEncoder>,
    reducer: FusionReducer,
    transformer: Option<Transformer>,
    head: Classifier,
}

/// Serializable model state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub stats: Option<NormStats>,
    pub params: ParamStore,
}

impl EiciNet {
    pub fn new(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.ablation = config.ablation.normalized();
        config.validate()?;
        let a = config.ablation;
        let c = config.base_channels();
        let mut params = ParamStore::new();
        let overall = if a.overall_encoder {
            let mut rng = derive(seed, 1);
            Some(Encoder::new(ImageKind::Overall.prefix(), config.overall.clone(), &mut params, &mut rng)?)
        } else {
            None
        };
        let ac = if a.ac_encoder {
            let mut rng = derive(seed, 2);
            Some(Encoder::new(ImageKind::AcObservation.prefix(), config.ac.clone(), &mut params, &mut rng)?)
        } else {
            None
        };
        let tab = a.tpm.then(|| TabularEncoder::new(c, &mut params, &mut derive(seed, 3)));
        let reducer = FusionReducer::new(
            config.fusion_in_channels(),
            config.fusion.channels,
            &mut params,
            &mut derive(seed, 4),
        );
        if a.ecim {
            // softmax over c channels averages 1/c; rescale the matching reducer columns
            let gain = c as f64;
            let start = 2 * config.overall.out_channels() * usize::from(a.overall_encoder);
            let n_in = config.fusion_in_channels();
            let wt = params.get_mut(reducer.weight());
            for (i, v) in wt.data_mut().iter_mut().enumerate() {
                let col = i % n_in;
                if col >= start && col < start + 2 * c {
                    *v *= gain;
                }
            }
        }
        let transformer = if a.icim {
            Some(Transformer::new(config.fusion.clone(), &mut params, &mut derive(seed, 5))?)
        } else {
            None
        };
        let head = Classifier::new(config.fusion.channels, NUM_CLASSES, &mut params, &mut derive(seed, 6));
        Ok(Self {
            config,
            params,
            overall,
            ac,
            tab,
            reducer,
            transformer,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    pub fn reducer(&self) -> &FusionReducer {
        &self.reducer
    }

    pub fn head(&self) -> &Classifier {
        &self.head
    }

    /// Fits the tabular z-score statistics on training records.
    pub fn fit_tabular<'a>(&mut self, records: impl IntoIterator<Item = &'a ClinicalRecord>) -> Result<()> {
        if let Some(tab) = &mut self.tab {
            tab.stats = NormStats::fit(records)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            stats: self.tab.as_ref().map(|t| t.stats.clone()),
            params: self.params.clone(),
        }
    }

    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Self> {
        let mut net = Self::new(snapshot.config.clone(), 0)?;
        let loaded = net.params.load_matching(&snapshot.params)?;
        if loaded != net.params.len() {
            return Err(Error::Data(format!(
                "snapshot provides {loaded} of {} parameters",
                net.params.len()
            )));
        }
        if let (Some(tab), Some(stats)) = (&mut net.tab, &snapshot.stats) {
            tab.stats = stats.clone();
        }
        Ok(net)
    }

    /// Builds the graph for one sample and returns its `n` logits.
    pub fn forward(&self, g: &mut Graph, sample: &Sample) -> Result<ForwardTrace> {
        self.forward_with(g, &self.params, sample)
    }

    /// [`EiciNet::forward`] reading parameter values from `store`.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<ForwardTrace> {
        let a = self.config.ablation;
        let c = self.config.base_channels();
        let (h, w) = self.config.ac.output_hw();
        let mut parts = Vec::with_capacity(3);

        if let Some(enc) = &self.overall {
            parts.push(encode_pair(g, store, enc, &sample.overall)?.concat);
        }
        let (tab_vector, f_tab) = match &self.tab {
            Some(tab) => {
                let v = tab.encode_record(g, store, &sample.record)?;
                let m = broadcast_map(g, v, h, w, 2 * self.config.overall.out_channels(), c)?;
                (Some(v), Some(m))
            }
            None => (None, None),
        };
        let mut ac_features = None;
        let mut ecim_maps = None;
        if let Some(enc) = &self.ac {
            let pair = encode_pair(g, store, enc, &sample.ac)?;
            ac_features = Some([pair.first, pair.second]);
            match f_tab {
                Some(ft) if a.ecim => {
                    let out = ecim::ecim(g, ft, [pair.first, pair.second])?;
                    ecim_maps = Some(out.maps);
                    parts.push(out.concat);
                }
                _ => parts.push(pair.concat),
            }
        }
        if let Some(ft) = f_tab {
            parts.push(ft);
        }
        let fused = self.reducer.fuse(g, store, &parts)?;
        let (pooled, attention) = match &self.transformer {
            Some(tf) => {
                let tokens = icim::to_tokens(g, fused)?;
                let (out, trace) = tf.forward(g, store, tokens)?;
                (icim::pool_tokens(g, out)?, trace)
            }
            None => {
                let r = g.relu(fused)?;
                (g.global_mean_pool(r)?, Vec::new())
            }
        };
        let logits = self.head.logits(g, store, pooled)?;
        Ok(ForwardTrace {
            logits,
            ac_features,
            ecim_maps,
            tab_vector,
            attention,
        })
    }

    /// `(B, n)` logits for a batch.
    pub fn forward_batch(&self, g: &mut Graph, samples: &[&Sample]) -> Result<NodeId> {
        self.forward_batch_with(g, &self.params, samples)
    }

    pub fn forward_batch_with(&self, g: &mut Graph, store: &ParamStore, samples: &[&Sample]) -> Result<NodeId> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let t = self.forward_with(g, store, s)?;
            rows.push(g.reshape(t.logits, &[1, NUM_CLASSES])?);
        }
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        Ok(g.concat(&rows, 0)?)
    }

    /// Mean cross-entropy of a batch.
    pub fn batch_loss(&self, g: &mut Graph, samples: &[&Sample]) -> Result<NodeId> {
        self.batch_loss_with(g, &self.params, samples)
    }

    pub fn batch_loss_with(&self, g: &mut Graph, store: &ParamStore, samples: &[&Sample]) -> Result<NodeId> {
        let logits = self.forward_batch_with(g, store, samples)?;
        let probs = icim::classify(g, logits)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        icim::loss(g, probs, &labels)
    }

    /// Central-difference check of the batch loss gradient over every
    /// parameter. The model's own parameters are left untouched.
    pub fn grad_check(&self, samples: &[&Sample], h: f64) -> Result<GradCheckReport> {
        let mut store = self.params.clone();
        grad_check(&mut store, h, |g, store| self.batch_loss_with(g, store, samples))
    }

    /// Class probabilities of one sample.
    pub fn predict_proba(&self, sample: &Sample) -> Result<[f64; NUM_CLASSES]> {
        let mut g = Graph::new();
        let t = self.forward(&mut g, sample)?;
        let p = icim::classify(&mut g, t.logits)?;
        let d = g.value(p).data();
        Ok([d[0], d[1]])
    }
}
