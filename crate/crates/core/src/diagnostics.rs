//! Calibration, parameter drift and the head/conv splice comparison.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autodiff::softmax_rows;
use crate::data::Dataset;
use crate::error::{dim_err, input_err, Result};
use crate::model::{splice_parameters, Model, ParamSelector, ParamStore};
use crate::tensor::Tensor;
use crate::train::{evaluate, EpochLog};

pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the samples in the bin, 0 when empty.
    pub confidence: f64,
    /// Fraction correct in the bin, 0 when empty.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{},{}", b.lower, b.upper, b.count, b.confidence, b.accuracy);
        }
        s
    }
}

/// Bin index of a confidence under `bins` equal-width bins; the last bin is
/// closed on the right.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

pub fn reliability_bins(confidences: &[f32], correct: &[bool], bins: usize) -> Result<ReliabilityBins> {
    if confidences.len() != correct.len() {
        return input_err(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        ));
    }
    if bins == 0 {
        return input_err("at least one bin is required");
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return input_err(format!("confidence {c} outside [0, 1]"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let i = bin_index(c as f64, bins);
        count[i] += 1;
        conf[i] += c as f64;
        hits[i] += ok as usize;
    }
    let bins = (0..bins)
        .map(|i| {
            let n = count[i];
            Bin {
                lower: i as f64 / bins as f64,
                upper: (i + 1) as f64 / bins as f64,
                count: n,
                confidence: if n > 0 { conf[i] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[i] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

/// Expected calibration error: count-weighted mean |accuracy - confidence|.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    let n = bins.total();
    if n == 0 {
        return input_err("no samples in the reliability bins");
    }
    Ok(bins
        .bins
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Top-1 softmax confidence and correctness per row of `logits`.
pub fn top1_confidences(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f32>, Vec<bool>)> {
    let &[b, n] = logits.shape() else {
        return dim_err(format!("expected [b, N] logits, got {:?}", logits.shape()));
    };
    if labels.len() != b {
        return input_err(format!("{b} rows but {} labels", labels.len()));
    }
    let probs = softmax_rows(logits.data(), n);
    let pred = logits.argmax_rows();
    let conf = pred.iter().enumerate().map(|(r, &k)| probs[r * n + k].min(1.0)).collect();
    let ok = pred.iter().zip(labels).map(|(p, l)| p == l).collect();
    Ok((conf, ok))
}

/// Reliability bins of `model` on `dataset`.
pub fn calibrate(model: &Model, dataset: &Dataset, bins: usize) -> Result<ReliabilityBins> {
    let logits = crate::train::predict(model, dataset)?;
    let (conf, ok) = top1_confidences(&logits, dataset.labels())?;
    reliability_bins(&conf, &ok, bins)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDrift {
    pub name: String,
    pub mean_abs_delta: f64,
}

/// Per trainable tensor, the mean absolute elementwise difference.
pub fn param_l1_delta(before: &ParamStore, after: &ParamStore) -> Result<Vec<LayerDrift>> {
    let a: Vec<_> = before.trainable().collect();
    let b: Vec<_> = after.trainable().collect();
    if a.len() != b.len() {
        return input_err(format!("{} vs {} trainable tensors", a.len(), b.len()));
    }
    a.iter()
        .zip(&b)
        .map(|((na, ta), (nb, tb))| {
            if na != nb {
                return input_err(format!("tensor name mismatch: {na} vs {nb}"));
            }
            if ta.shape() != tb.shape() {
                return input_err(format!("{na}: shape {:?} vs {:?}", ta.shape(), tb.shape()));
            }
            let sum: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
            Ok(LayerDrift { name: na.to_string(), mean_abs_delta: sum / ta.numel() as f64 })
        })
        .collect()
}

pub(crate) fn layer_drift(before: &ParamStore, after: &ParamStore) -> Result<Vec<LayerDrift>> {
    param_l1_delta(before, after)
}

/// Average of the per-layer deltas.
pub fn mean_drift(layers: &[LayerDrift]) -> f64 {
    if layers.is_empty() {
        return 0.0;
    }
    layers.iter().map(|l| l.mean_abs_delta).sum::<f64>() / layers.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Real,
    Wp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub layers: Vec<LayerDrift>,
}

/// Drift records in run order from logs recorded with drift tracking.
pub fn drift_records(logs: &[EpochLog]) -> Vec<DriftRecord> {
    let mut out = Vec::new();
    for l in logs {
        if let Some(d) = &l.drift_real {
            out.push(DriftRecord { epoch: l.epoch, phase: Phase::Real, layers: d.clone() });
        }
        if let Some(d) = &l.drift_wp {
            out.push(DriftRecord { epoch: l.epoch, phase: Phase::Wp, layers: d.clone() });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub layer: String,
    pub lower: f32,
    pub upper: f32,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let width = (self.upper - self.lower) / self.counts.len() as f32;
        let mut s = String::from("bin,lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lower + i as f32 * width;
            let _ = writeln!(s, "{i},{lo},{},{c}", lo + width);
        }
        s
    }
}

/// Equal-width histogram of one tensor over `[lower, upper]`; values outside
/// the range are counted in the edge bins.
pub fn param_histogram(params: &ParamStore, layer: &str, bins: usize, range: (f32, f32)) -> Result<Histogram> {
    let Some(t) = params.get(layer) else {
        return input_err(format!("unknown tensor '{layer}'"));
    };
    let (lower, upper) = range;
    if bins == 0 || !(lower < upper) {
        return input_err("histogram needs at least one bin and lower < upper");
    }
    let mut counts = vec![0usize; bins];
    let scale = bins as f64 / (upper as f64 - lower as f64);
    for &v in t.data() {
        let pos = ((v as f64 - lower as f64) * scale).floor();
        let i = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
        counts[i] += 1;
    }
    Ok(Histogram { layer: layer.to_string(), lower, upper, counts })
}

/// Top-1 accuracies of the four conv-side / head combinations of a model
/// before and after some training phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpliceAccuracies {
    pub pre_conv_pre_head: f32,
    pub post_conv_post_head: f32,
    pub pre_conv_post_head: f32,
    pub post_conv_pre_head: f32,
}

pub fn splice_experiment(pre: &Model, post: &Model, eval: &Dataset) -> Result<SpliceAccuracies> {
    if !pre.same_architecture(post) {
        return input_err(format!(
            "splice needs identical architectures: {} vs {}",
            pre.describe(),
            post.describe()
        ));
    }
    let acc = |m: &Model| evaluate(m, eval).map(|e| 1.0 - e);
    Ok(SpliceAccuracies {
        pre_conv_pre_head: acc(pre)?,
        post_conv_post_head: acc(post)?,
        pre_conv_post_head: acc(&splice_parameters(pre, post, &ParamSelector::Head)?)?,
        post_conv_pre_head: acc(&splice_parameters(post, pre, &ParamSelector::Head)?)?,
    })
}
