//! Tabular processing: the nine clinical/quantified features, fold-local
//! z-scoring, a learned projection to `C_tab` channels and the spatial
//! broadcast that turns the vector into a feature map.

use serde::{Deserialize, Serialize};

use crate::rng::{he_normal, Rng};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

pub const NUM_FEATURES: usize = 9;

/// Column order used everywhere (CSV, feature vectors, weights).
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "gender",
    "age",
    "bcva",
    "iop",
    "kp_grade",
    "flare_grade",
    "cell_area_mm2",
    "cell_count",
    "ari",
];

/// Indices of the z-scored features; the rest pass through unchanged.
pub const NUMERIC_FEATURES: [usize; 6] = [1, 2, 3, 6, 7, 8];

pub const KP_GRADES: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
pub const FLARE_GRADES: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    /// 0 female, 1 male.
    pub gender: u8,
    pub age: f64,
    pub bcva: f64,
    pub iop: f64,
    pub kp_grade: f64,
    pub flare_grade: f64,
    pub cell_area_mm2: f64,
    pub cell_count: u32,
    pub ari: f64,
}

impl ClinicalRecord {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [
            f64::from(self.gender),
            self.age,
            self.bcva,
            self.iop,
            self.kp_grade,
            self.flare_grade,
            self.cell_area_mm2,
            f64::from(self.cell_count),
            self.ari,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.gender > 1 {
            return Err(Error::Data(format!("gender must be 0 or 1, got {}", self.gender)));
        }
        if !KP_GRADES.contains(&self.kp_grade) {
            return Err(Error::Data(format!("kp_grade {} not in {KP_GRADES:?}", self.kp_grade)));
        }
        if !FLARE_GRADES.contains(&self.flare_grade) {
            return Err(Error::Data(format!(
                "flare_grade {} not in {FLARE_GRADES:?}",
                self.flare_grade
            )));
        }
        for (name, v) in FEATURE_NAMES.iter().zip(self.features()) {
            if !v.is_finite() {
                return Err(Error::Data(format!("feature {name} is not finite ({v})")));
            }
        }
        Ok(())
    }
}

/// Per-feature normalization statistics fitted on one training fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
        }
    }
}

impl NormStats {
    /// Population mean/std of the numeric features; constant features get std 1.
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a ClinicalRecord>) -> Result<Self> {
        let rows: Vec<[f64; NUM_FEATURES]> = records.into_iter().map(|r| r.features()).collect();
        if rows.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty fold".into()));
        }
        let n = rows.len() as f64;
        let mut stats = Self::default();
        for &j in &NUMERIC_FEATURES {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            stats.mean[j] = mean;
            stats.std[j] = if std > 1e-12 { std } else { 1.0 };
        }
        Ok(stats)
    }

    pub fn normalize(&self, record: &ClinicalRecord) -> Result<[f64; NUM_FEATURES]> {
        let mut z = record.features();
        for (j, v) in z.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!("feature {} is not finite ({v})", FEATURE_NAMES[j])));
            }
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(z)
    }
}

/// Normalization, then `relu(W z + b)` with `W` of shape `(C_tab, 9)`.
#[derive(Clone, Debug)]
pub struct TabularEncoder {
    pub stats: NormStats,
    weight: ParamId,
    bias: ParamId,
    channels: usize,
}

impl TabularEncoder {
    pub fn new(channels: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let weight = store.add("tab.w", he_normal(rng, &[channels, NUM_FEATURES], NUM_FEATURES, 1.0));
        let bias = store.add("tab.b", Tensor::zeros(&[channels]));
        Self {
            stats: NormStats::default(),
            weight,
            bias,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `C_tab`-vector for one record.
    pub fn encode_record(&self, g: &mut Graph, store: &ParamStore, record: &ClinicalRecord) -> Result<NodeId> {
        let z = self.stats.normalize(record)?;
        let x = g.input(Tensor::from_vec(z.to_vec()));
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.linear(x, w, Some(b))?;
        Ok(g.relu(y)?)
    }
}

/// Copies each entry of a `C_tab` vector over an `h x w` grid.
///
/// Enforces `C_tab == C_overall_concat / 2 == C_enc`.
pub fn broadcast_map(
    g: &mut Graph,
    vector: NodeId,
    h: usize,
    w: usize,
    overall_concat_channels: usize,
    encoder_channels: usize,
) -> Result<NodeId> {
    let c_tab = g.shape(vector).iter().product::<usize>();
    if overall_concat_channels != 2 * c_tab || encoder_channels != c_tab {
        return Err(Error::Config(format!(
            "tabular channels {c_tab} must be half of the overall concat channels \
             {overall_concat_channels} and equal the encoder channels {encoder_channels}"
        )));
    }
    Ok(g.broadcast_spatial(vector, h, w)?)
}
