//! Synthetic eyes with known ground truth: layered AS-OCT renders with cell
//! disks, slit-lamp surrogate textures, clinical records and labels.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageKind, SlitLampPair};
use crate::model::Sample;
use crate::quantifier::{
    extract_boundary, place_rois, quantify_eye, AcMask, AsOctImage, Pixel, QuantConfig, QuantResult,
};
use crate::rng::{derive, Rng};
use crate::tabular::{ClinicalRecord, FLARE_GRADES, KP_GRADES};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Geometry and intensities of one AS-OCT render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OctSpec {
    pub width: usize,
    pub height: usize,
    /// Row of the corneal posterior surface at the apex.
    pub apex_row: f64,
    pub apex_jitter: u32,
    pub curvature: f64,
    pub cornea_thickness: f64,
    /// Columns between the image edge and each chamber angle.
    pub angle_margin: usize,
    /// First row below the chamber.
    pub iris_row: usize,
    pub air_level: f64,
    pub aqueous_level: f64,
    pub cornea_level: f64,
    pub tissue_level: f64,
    pub cell_level: f64,
    pub cell_radius: f64,
    pub noise_sigma: f64,
}

impl Default for OctSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 120,
            apex_row: 29.0,
            apex_jitter: 3,
            curvature: 0.0006,
            cornea_thickness: 11.0,
            angle_margin: 20,
            iris_row: 110,
            air_level: 40.0,
            aqueous_level: 60.0,
            cornea_level: 180.0,
            tissue_level: 120.0,
            cell_level: 220.0,
            cell_radius: 1.5,
            noise_sigma: 2.0,
        }
    }
}

impl OctSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.air_level < self.aqueous_level && self.aqueous_level < self.cell_level) {
            return Err(Error::Config("intensity levels must satisfy air < aqueous < cell".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.cell_radius < 0.0 || 2 * self.angle_margin + 2 > self.width || self.iris_row > self.height {
            return Err(Error::Config("OCT geometry does not fit the image".into()));
        }
        Ok(())
    }

    fn disk_offsets(&self) -> Vec<(isize, isize)> {
        let r = self.cell_radius;
        let ri = r.floor() as isize;
        let mut out = Vec::new();
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy) as f64) <= r * r {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

/// Normal-distributed clinical variable clamped to a plausible range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Gaussian {
    fn sample(&self, rng: &mut Rng) -> f64 {
        let n = Normal::new(self.mean, self.std.max(0.0)).expect("finite std");
        n.sample(rng).clamp(self.min, self.max)
    }
}

/// Clinical sampling distributions; defaults follow the cohort summary
/// statistics of the uveitis dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClinicalRanges {
    pub age: Gaussian,
    pub bcva: Gaussian,
    pub iop: Gaussian,
    pub male_fraction: f64,
    /// Weights over `KP_GRADES`.
    pub kp_weights: [f64; 5],
    /// Weights over `FLARE_GRADES`.
    pub flare_weights: [f64; 6],
}

impl Default for ClinicalRanges {
    fn default() -> Self {
        Self {
            age: Gaussian { mean: 38.11, std: 14.84, min: 5.0, max: 90.0 },
            bcva: Gaussian { mean: 0.42, std: 0.33, min: 0.0, max: 1.5 },
            iop: Gaussian { mean: 12.38, std: 4.74, min: 4.0, max: 40.0 },
            male_fraction: 0.6835,
            kp_weights: [41.0, 24.0, 28.0, 44.0, 2.0],
            flare_weights: [55.0, 3.0, 36.0, 28.0, 17.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Positive iff the true cell count reaches the threshold.
    TabularThreshold,
    /// Positive iff the AC observation images contain a bright blob.
    ImageBlob,
    /// Each positive shows the count signal, the blob, or both.
    Both,
}

/// How a positive sample carries its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manifestation {
    None,
    Count,
    Blob,
    CountAndBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub oct: OctSpec,
    /// Side of the square slit-lamp surrogates.
    pub slit_size: usize,
    pub label_rule: LabelRule,
    /// Cell count at which the tabular rule turns positive.
    pub count_threshold: u32,
    /// Largest count drawn for samples whose count must stay below the threshold.
    pub low_count_max: u32,
    pub max_count: u32,
    pub positive_fraction: f64,
    pub clinical: ClinicalRanges,
    pub blob_radius: f64,
    pub blob_level: f64,
    pub slit_noise: f64,
    /// Brightness added to the overall images of positives under `Both`.
    pub overall_shift: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            oct: OctSpec::default(),
            slit_size: 16,
            label_rule: LabelRule::Both,
            count_threshold: 5,
            low_count_max: 2,
            max_count: 15,
            positive_fraction: 104.0 / 139.0,
            clinical: ClinicalRanges::default(),
            blob_radius: 3.0,
            blob_level: 0.9,
            slit_noise: 0.03,
            overall_shift: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        self.oct.validate()?;
        if self.count_threshold == 0
            || self.count_threshold > self.max_count
            || self.low_count_max >= self.count_threshold
        {
            return Err(Error::Config(format!(
                "need low_count_max {} < count threshold {} <= max count {}",
                self.low_count_max, self.count_threshold, self.max_count
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive fraction must be in [0, 1]".into()));
        }
        if self.slit_size < 4 || self.blob_radius < 0.0 || 2.0 * self.blob_radius + 3.0 > self.slit_size as f64 {
            return Err(Error::Config("slit-lamp surrogate too small for the blob".into()));
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctTruth {
    pub count: u32,
    pub cell_pixels: Vec<Pixel>,
    /// Noise-free aqueous-to-air ratio.
    pub ari: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub oct: Vec<OctTruth>,
    pub eye_count: u32,
    pub manifestation: Manifestation,
    /// Blob location in each AC observation image, if any.
    pub ac_blobs: [Option<BBox>; 2],
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub id: String,
    pub overall: [Tensor; 2],
    pub ac: [Tensor; 2],
    pub scans: Vec<(AsOctImage, AcMask)>,
    pub record: ClinicalRecord,
    pub label: usize,
    pub truth: GroundTruth,
}

impl SyntheticSample {
    pub fn to_sample(&self) -> Result<Sample> {
        Ok(Sample {
            id: self.id.clone(),
            overall: SlitLampPair::new(ImageKind::Overall, self.overall[0].clone(), self.overall[1].clone())?,
            ac: SlitLampPair::new(ImageKind::AcObservation, self.ac[0].clone(), self.ac[1].clone())?,
            record: self.record.clone(),
            label: self.label,
        })
    }
}

/// Renders one cross-section with `cells` non-adjacent cell disks inside area1.
pub fn gen_asoct(spec: &OctSpec, cells: u32, rng: &mut Rng) -> Result<(AsOctImage, AcMask, OctTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let apex = spec.apex_row + f64::from(rng.random_range(0..=spec.apex_jitter));
    let cx = (w as f64 - 1.0) / 2.0;
    let posterior = |x: usize| apex + spec.curvature * (x as f64 - cx).powi(2);
    let (left, right) = (spec.angle_margin, w - 1 - spec.angle_margin);
    let mask = AcMask::from_fn(w, h, |x, y| {
        (left..=right).contains(&x) && (y as f64) > posterior(x) && y < spec.iris_row
    });
    let mut base = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let yf = y as f64;
            let post = posterior(x);
            base[y * w + x] = if yf <= post - spec.cornea_thickness {
                spec.air_level
            } else if yf <= post {
                spec.cornea_level
            } else if mask.get(x, y) {
                spec.aqueous_level
            } else {
                spec.tissue_level
            };
        }
    }
    let probe = AsOctImage::with_scan_calibration(w, h, base.clone())?;
    let rois = place_rois(extract_boundary(&mask)?, probe.calibration())?;

    let disk = spec.disk_offsets();
    let reach = spec.cell_radius.floor() as isize;
    let mut in_area1 = vec![false; w * h];
    rois.area1.iter().for_each(|p| in_area1[p.y * w + p.x] = true);
    // centers whose whole disk plus a one-pixel rim lies in area1
    let fits = |cx: isize, cy: isize| {
        (-reach - 1..=reach + 1).all(|dy| {
            (-reach - 1..=reach + 1).all(|dx| {
                let (x, y) = (cx + dx, cy + dy);
                x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && in_area1[y as usize * w + x as usize]
            })
        })
    };
    let candidates: Vec<(isize, isize)> = rois
        .area1
        .iter()
        .map(|p| (p.x as isize, p.y as isize))
        .filter(|&(x, y)| fits(x, y))
        .collect();
    let min_gap = 2 * reach + 2;
    let mut centers: Vec<(isize, isize)> = Vec::with_capacity(cells as usize);
    let mut attempts = 0;
    while centers.len() < cells as usize {
        attempts += 1;
        if candidates.is_empty() || attempts > 20_000 {
            return Err(Error::Data(format!(
                "could only place {} of {cells} non-adjacent cells",
                centers.len()
            )));
        }
        let c = candidates[rng.random_range(0..candidates.len())];
        if centers
            .iter()
            .all(|o| (o.0 - c.0).abs().max((o.1 - c.1).abs()) >= min_gap)
        {
            centers.push(c);
        }
    }
    let mut cell_pixels = Vec::new();
    for &(cx, cy) in &centers {
        for &(dx, dy) in &disk {
            let p = Pixel::new((cx + dx) as usize, (cy + dy) as usize);
            base[p.y * w + p.x] = spec.cell_level;
            cell_pixels.push(p);
        }
    }
    cell_pixels.sort();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in &mut base {
            *v += noise.sample(rng);
        }
    }
    for v in &mut base {
        *v = v.round().clamp(0.0, 255.0);
    }
    let image = AsOctImage::with_scan_calibration(w, h, base)?;
    let truth = OctTruth {
        count: cells,
        cell_pixels,
        ari: spec.aqueous_level / spec.air_level,
    };
    Ok((image, mask, truth))
}

fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn overall_surrogate(spec: &GeneratorSpec, shift: f64, rng: &mut Rng) -> Tensor {
    let s = spec.slit_size;
    let f1 = rng.random_range(1.0..3.0);
    let f2 = rng.random_range(1.0..3.0);
    let p1 = rng.random_range(0.0..std::f64::consts::TAU);
    let p2 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.slit_noise).expect("valid sigma");
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let u = std::f64::consts::TAU * f1 * x as f64 / s as f64 + p1;
            let v = std::f64::consts::TAU * f2 * y as f64 / s as f64 + p2;
            let val = 0.45 + 0.12 * u.sin() * v.cos() + shift + noise.sample(rng);
            data.push(quantize_unit(val));
        }
    }
    Tensor::new(vec![1, s, s], data).expect("shape matches")
}

fn ac_surrogate(spec: &GeneratorSpec, blob: bool, rng: &mut Rng) -> (Tensor, Option<BBox>) {
    let s = spec.slit_size;
    let noise = Normal::new(0.0, spec.slit_noise).expect("valid sigma");
    let mut data: Vec<f64> = (0..s * s).map(|_| 0.25 + noise.sample(rng)).collect();
    let mut bbox = None;
    if blob {
        let r = spec.blob_radius;
        let ri = r.ceil() as usize;
        let lo = ri + 1;
        let hi = s - 1 - ri - 1;
        let cx = rng.random_range(lo..=hi);
        let cy = rng.random_range(lo..=hi);
        let mut b = BBox { x0: s, y0: s, x1: 0, y1: 0 };
        for y in cy - ri..=cy + ri {
            for x in cx - ri..=cx + ri {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                if d2 <= r * r {
                    data[y * s + x] = spec.blob_level + noise.sample(rng);
                    b.x0 = b.x0.min(x);
                    b.y0 = b.y0.min(y);
                    b.x1 = b.x1.max(x);
                    b.y1 = b.y1.max(y);
                }
            }
        }
        bbox = Some(b);
    }
    let data = data.into_iter().map(quantize_unit).collect();
    (Tensor::new(vec![1, s, s], data).expect("shape matches"), bbox)
}

fn clinical(spec: &GeneratorSpec, rng: &mut Rng) -> ClinicalRecord {
    let c = &spec.clinical;
    let kp = WeightedIndex::new(c.kp_weights).expect("valid KP weights");
    let flare = WeightedIndex::new(c.flare_weights).expect("valid flare weights");
    ClinicalRecord {
        gender: u8::from(rng.random_bool(c.male_fraction.clamp(0.0, 1.0))),
        age: (c.age.sample(rng) * 10.0).round() / 10.0,
        bcva: (c.bcva.sample(rng) * 100.0).round() / 100.0,
        iop: (c.iop.sample(rng) * 10.0).round() / 10.0,
        kp_grade: KP_GRADES[kp.sample(rng)],
        flare_grade: FLARE_GRADES[flare.sample(rng)],
        cell_area_mm2: 0.0,
        cell_count: 0,
        ari: 0.0,
    }
}

/// Writes quantified values into the record's image-derived fields.
pub fn fill_quantified(record: &mut ClinicalRecord, q: &QuantResult) {
    record.cell_count = q.cell_count;
    record.cell_area_mm2 = q.total_cell_area_mm2;
    record.ari = q.ari;
}

/// Generates one eye with the given label using its own RNG stream.
pub fn gen_sample(spec: &GeneratorSpec, index: usize, label: usize) -> Result<SyntheticSample> {
    let mut rng = derive(spec.seed, 1000 + index as u64);
    let tau = spec.count_threshold;
    let low = |rng: &mut Rng| rng.random_range(0..=spec.low_count_max);
    let high = |rng: &mut Rng| rng.random_range(tau..=spec.max_count);
    let (count, manifestation) = match (spec.label_rule, label) {
        (LabelRule::TabularThreshold, 0) => (low(&mut rng), Manifestation::None),
        (LabelRule::TabularThreshold, _) => (high(&mut rng), Manifestation::Count),
        (LabelRule::ImageBlob, 0) => (rng.random_range(0..=spec.max_count), Manifestation::None),
        (LabelRule::ImageBlob, _) => (rng.random_range(0..=spec.max_count), Manifestation::Blob),
        (LabelRule::Both, 0) => (low(&mut rng), Manifestation::None),
        (LabelRule::Both, _) => match rng.random_range(0..3) {
            0 => (high(&mut rng), Manifestation::Count),
            1 => (low(&mut rng), Manifestation::Blob),
            _ => (high(&mut rng), Manifestation::CountAndBlob),
        },
    };
    let blob = matches!(manifestation, Manifestation::Blob | Manifestation::CountAndBlob);
    let shift = if spec.label_rule == LabelRule::Both && label == 1 { spec.overall_shift } else { 0.0 };

    let mut record = clinical(spec, &mut rng);
    let overall = [overall_surrogate(spec, shift, &mut rng), overall_surrogate(spec, shift, &mut rng)];
    let (ac1, b1) = ac_surrogate(spec, blob, &mut rng);
    let (ac2, b2) = ac_surrogate(spec, blob, &mut rng);
    let mut scans = Vec::with_capacity(3);
    let mut oct = Vec::with_capacity(3);
    for _ in 0..3 {
        let (img, mask, truth) = gen_asoct(&spec.oct, count, &mut rng)?;
        scans.push((img, mask));
        oct.push(truth);
    }
    let q = quantify_eye(&scans, &QuantConfig::default())?;
    fill_quantified(&mut record, &q);
    Ok(SyntheticSample {
        id: format!("eye{index:04}"),
        overall,
        ac: [ac1, ac2],
        scans,
        record,
        label,
        truth: GroundTruth {
            oct,
            eye_count: count,
            manifestation,
            ac_blobs: [b1, b2],
        },
    })
}

/// Label vector with `round(n * positive_fraction)` positives in seeded order.
pub fn draw_labels(spec: &GeneratorSpec, n: usize) -> Vec<usize> {
    let positives = (n as f64 * spec.positive_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut derive(spec.seed, 0));
    labels
}

/// Generates `n` eyes in memory.
pub fn gen_samples(spec: &GeneratorSpec, n: usize) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 samples, got {n}")));
    }
    draw_labels(spec, n)
        .into_iter()
        .enumerate()
        .map(|(i, label)| gen_sample(spec, i, label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantifier::quantify_image;
    use crate::rng::seeded;

    fn quiet() -> OctSpec {
        OctSpec {
            noise_sigma: 0.0,
            apex_jitter: 0,
            ..OctSpec::default()
        }
    }

    #[test]
    fn empty_render_gives_level_ratio() {
        let (img, mask, truth) = gen_asoct(&quiet(), 0, &mut seeded(0)).unwrap();
        let q = quantify_image(&img, &mask, &QuantConfig::default()).unwrap();
        assert_eq!(q.cell_count, 0);
        assert_eq!(q.ari, 60.0 / 40.0);
        assert_eq!(truth.ari, 1.5);
    }

    #[test]
    fn noise_free_counts_roundtrip() {
        for k in 1..=20 {
            let (img, mask, truth) = gen_asoct(&quiet(), k, &mut seeded(u64::from(k))).unwrap();
            let q = quantify_image(&img, &mask, &QuantConfig::default()).unwrap();
            assert_eq!(q.cell_count, k);
            assert!((q.ari - truth.ari).abs() <= 1e-12);
            let expected_area = truth.cell_pixels.len() as f64 * img.pixel_area_mm2();
            assert_eq!(q.total_cell_area_mm2, expected_area);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = OctSpec {
            cell_radius: 6.0,
            ..quiet()
        };
        assert!(gen_asoct(&spec, 200, &mut seeded(1)).is_err());
    }

    #[test]
    fn labels_follow_requested_balance() {
        let spec = GeneratorSpec::default();
        let labels = draw_labels(&spec, 139);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 104);
        assert_eq!(labels.len(), 139);
    }

    #[test]
    fn blob_only_in_blob_manifestations() {
        let spec = GeneratorSpec {
            label_rule: LabelRule::ImageBlob,
            ..GeneratorSpec::default()
        };
        for (i, label) in [0, 1, 0, 1].into_iter().enumerate() {
            let s = gen_sample(&spec, i, label).unwrap();
            assert_eq!(s.truth.ac_blobs[0].is_some(), label == 1);
            assert!(s.ac[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_levels_rejected() {
        let spec = OctSpec {
            aqueous_level: 10.0,
            ..OctSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sample_generation_is_deterministic() {
        let spec = GeneratorSpec::default();
        let a = gen_sample(&spec, 3, 1).unwrap();
        let b = gen_sample(&spec, 3, 1).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.ac, b.ac);
        assert_eq!(a.scans[2].0, b.scans[2].0);
    }
}
