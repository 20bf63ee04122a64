//! Training, evaluation, stratified k-fold cross-validation, the ablation
//! matrix and Grad-CAM heatmaps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::icim;
use crate::model::{Ablation, EiciNet, ModelConfig, Sample};
use crate::rng::derive;
use crate::synthgen::BBox;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            ablation: Ablation::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Probabilities clamped before the logarithm.
    pub clamp_events: usize,
}

/// Plain minibatch SGD with a fixed learning rate and per-epoch reshuffling.
pub fn train(model: &mut EiciNet, data: &[&Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty fold".into()));
    }
    let mut rng = derive(config.seed, 7);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = TrainOutcome::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| data[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::Data(format!(
                    "non-finite value in {op} at epoch {epoch}, batch {b}"
                )),
                other => other,
            })?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Data(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            out.clamp_events += g.clamp_events();
            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            model.params.sgd_step(config.lr);
            total += value * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        out.loss_history.push(mean);
    }
    if out.clamp_events > 0 {
        log::warn!("{} probabilities clamped during training", out.clamp_events);
    }
    Ok(out)
}

/// Builds a model for `config`, fits tabular statistics on `data` and trains it.
pub fn fit(model_config: &ModelConfig, data: &[&Sample], config: &TrainConfig) -> Result<(EiciNet, TrainOutcome)> {
    let mut mc = model_config.clone();
    mc.ablation = config.ablation;
    let mut model = EiciNet::new(mc, config.seed)?;
    model.fit_tabular(data.iter().map(|s| &s.record))?;
    let outcome = train(&mut model, data, config)?;
    Ok((model, outcome))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let precision = ratio(tpf, tpf + fpf);
        let recall = ratio(tpf, tpf + fnf);
        Self {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tpf + tnf, tpf + tnf + fpf + fnf),
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Data("prediction and label counts differ".into()));
        }
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        Ok(Self::from_counts(tp, tn, fp, fn_))
    }
}

/// Argmax class; an exact tie goes to the negative class.
pub fn predict(model: &EiciNet, sample: &Sample) -> Result<usize> {
    let p = model.predict_proba(sample)?;
    if p[1] == p[0] {
        log::debug!("tie on {}; predicting negative", sample.id);
    }
    Ok(usize::from(p[1] > p[0]))
}

pub fn evaluate(model: &EiciNet, data: &[&Sample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty fold".into()));
    }
    let predicted = data.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    let actual: Vec<usize> = data.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&predicted, &actual)
}

/// Stratified seeded partition of sample indices into `k` folds.
///
/// Each class is shuffled, the classes are laid end to end and dealt
/// round-robin, so fold sizes and per-class counts differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Data(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut rng = derive(seed, 11);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut dealt = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !members.is_empty() && members.len() < k {
            log::warn!("class {c} has {} members, fewer than {k} folds", members.len());
        }
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (j, i) in dealt.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeanMetrics {
    pub fn of(metrics: &[Metrics]) -> Self {
        let n = metrics.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: mean(|m| m.accuracy),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

impl FoldReport {
    /// One row per fold and epoch: `fold,epoch,loss`.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("fold,epoch,loss\n");
        for f in &self.folds {
            for (e, l) in f.loss_history.iter().enumerate() {
                let _ = writeln!(s, "{},{},{l:?}", f.fold, e);
            }
        }
        s
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

pub fn cross_validate(samples: &[Sample], model_config: &ModelConfig, config: &TrainConfig, k: usize) -> Result<FoldReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let folds = kfold_split(&labels, k, config.seed)?;
    let mut results = Vec::with_capacity(k);
    for (fold, test_idx) in folds.iter().enumerate() {
        let mut in_test = vec![false; samples.len()];
        test_idx.iter().for_each(|&i| in_test[i] = true);
        let train_set: Vec<&Sample> = samples.iter().zip(&in_test).filter(|(_, t)| !**t).map(|(s, _)| s).collect();
        let test_set: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
        let fc = TrainConfig {
            seed: fold_seed(config.seed, fold),
            ..config.clone()
        };
        let (model, outcome) = fit(model_config, &train_set, &fc)?;
        let metrics = evaluate(&model, &test_set)?;
        log::info!(
            "{} fold {fold}: accuracy {:.4} f1 {:.4}",
            config.ablation.label(),
            metrics.accuracy,
            metrics.f1
        );
        results.push(FoldResult {
            fold,
            train_size: train_set.len(),
            test_size: test_set.len(),
            metrics,
            loss_history: outcome.loss_history,
        });
    }
    let all: Vec<Metrics> = results.iter().map(|r| r.metrics).collect();
    Ok(FoldReport {
        mean: MeanMetrics::of(&all),
        folds: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub report: FoldReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text with one column per branch and the four mean metrics.
    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let mut s = format!(
            "{:<8} {:<4} {:<4} {:<4} {:<4} {:>8} {:>8} {:>9} {:>8}\n",
            "Overall", "AC", "TPM", "ECIM", "ICIM", "Accuracy", "F1", "Precision", "Recall"
        );
        for r in &self.rows {
            let a = r.ablation;
            let m = r.report.mean;
            let _ = writeln!(
                s,
                "{:<8} {:<4} {:<4} {:<4} {:<4} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
                mark(a.overall_encoder),
                mark(a.ac_encoder),
                mark(a.tpm),
                mark(a.ecim),
                mark(a.icim),
                m.accuracy,
                m.f1,
                m.precision,
                m.recall
            );
        }
        s
    }
}

/// Runs the six ablation configurations through k-fold cross-validation.
pub fn run_ablation(samples: &[Sample], model_config: &ModelConfig, config: &TrainConfig, k: usize) -> Result<AblationTable> {
    let rows = Ablation::table_rows()
        .into_iter()
        .map(|ablation| {
            let cfg = TrainConfig {
                ablation,
                ..config.clone()
            };
            Ok(AblationRow {
                label: ablation.label(),
                ablation,
                report: cross_validate(samples, model_config, &cfg, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

/// Saliency raster with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Pixels at or above the 90th-percentile rank, excluding zeros.
    pub fn top_decile(&self) -> Vec<(usize, usize)> {
        let n = self.values.len();
        if n == 0 {
            return Vec::new();
        }
        let keep = n.div_ceil(10);
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[keep - 1];
        (0..n)
            .filter(|&i| self.values[i] > 0.0 && self.values[i] >= cut)
            .map(|i| (i % self.width, i / self.width))
            .collect()
    }

    pub fn overlaps(&self, bbox: &BBox) -> bool {
        self.top_decile().iter().any(|&(x, y)| bbox.contains(x, y))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// `relu(sum_c w_c A_c)` with `w_c` the spatial mean of the gradient,
/// min-max normalized and bilinearly resized to `out_h x out_w`.
pub fn cam_from_activations(activations: &Tensor, grad: &[f64], out_h: usize, out_w: usize) -> Result<Heatmap> {
    let s = activations.shape();
    if s.len() != 3 || grad.len() != activations.numel() {
        return Err(Error::Data(format!("activations {s:?} and gradient length {} disagree", grad.len())));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let a = activations.data();
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let wc = grad[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (k, v) in cam.iter_mut().enumerate() {
            *v += wc * a[ch * hw + k];
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        values: bilinear(&cam, h, w, out_h, out_w),
    })
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let f = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, ty) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, tx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Grad-CAM of `target` on the first AC observation image, taken at the
/// AC encoder's final feature map.
pub fn gradcam(model: &EiciNet, sample: &Sample, target: usize) -> Result<Heatmap> {
    if !model.ablation().ac_encoder {
        return Err(Error::Config("Grad-CAM needs the AC observation encoder".into()));
    }
    let mut g = Graph::new();
    let trace = model.forward(&mut g, sample)?;
    let n = g.shape(trace.logits)[0];
    if target >= n {
        return Err(Error::Data(format!("target class {target} out of range for {n} classes")));
    }
    let logit = g.slice(trace.logits, 0, target, 1)?;
    let logit = g.sum(logit)?;
    g.backward_node(logit)?;
    let act_node = trace.ac_features.expect("AC encoder enabled")[0];
    let act = g.value(act_node).clone();
    let grad = g.grad(act_node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; act.numel()]);
    let [_, h, w] = sample.ac.shape() else {
        return Err(Error::Data("AC images must be (C, H, W)".into()));
    };
    cam_from_activations(&act, &grad, *h, *w)
}

/// Probability of the positive class, for reporting.
pub fn positive_probability(model: &EiciNet, sample: &Sample) -> Result<f64> {
    let mut g = Graph::new();
    let t = model.forward(&mut g, sample)?;
    let p = icim::classify(&mut g, t.logits)?;
    Ok(g.value(p).data()[1])
}
