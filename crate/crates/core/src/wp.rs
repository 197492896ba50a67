//! White-paper probe regularization.
//!
//! A white-paper phase feeds `M` batches of uninformative probe images to
//! the model and minimises `lambda * KL(softmax(logits) || uniform)`, pushing
//! the model towards indifference on inputs that carry no class evidence.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{kl_uniform_rows, softmax_rows, Graph};
use crate::data::{Dataset, Normalization};
use crate::error::{dim_err, input_err, Error, Result};
use crate::model::{Mode, Model};
use crate::optim::{sgd_step, SgdState};
use crate::tensor::Tensor;

/// What the probe images look like.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeKind {
    /// Every raw pixel is 1.0, then dataset-normalized.
    WhitePaper,
    /// I.i.d. standard normal pixels, used as-is.
    GaussianNoise,
    /// Images drawn with replacement from another dataset.
    DatasetImages(Arc<Dataset>),
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::WhitePaper => "white",
            ProbeKind::GaussianNoise => "gaussian",
            ProbeKind::DatasetImages(_) => "dataset",
        }
    }
}

/// How batch norm behaves while training on probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WpBnPolicy {
    /// Batch statistics, folded into the running estimates.
    #[default]
    Update,
    /// Batch statistics, running estimates left untouched.
    Freeze,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WpConfig {
    /// Probability of running a phase after each epoch.
    pub p: f64,
    /// Iterations per phase.
    pub m: usize,
    pub lambda: f32,
    pub probe: ProbeKind,
    pub probe_batch_size: usize,
    /// Skip dataset normalization of white-paper probes.
    pub probe_raw: bool,
    pub bn_policy: WpBnPolicy,
    /// Reuse the real-image optimizer velocity instead of a fresh one per phase.
    pub share_momentum: bool,
}

impl WpConfig {
    /// Regularizer switched off.
    pub fn disabled() -> Self {
        Self { p: 0.0, ..Self::new(1, 1.0) }
    }

    /// White-paper probes with `P = 1`.
    pub fn new(m: usize, lambda: f32) -> Self {
        Self {
            p: 1.0,
            m,
            lambda,
            probe: ProbeKind::WhitePaper,
            probe_batch_size: 128,
            probe_raw: false,
            bn_policy: WpBnPolicy::Update,
            share_momentum: true,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.p) {
            out.push("wp.p: must lie in [0, 1]".to_string());
        }
        if self.m == 0 {
            out.push("wp.m: must be positive".to_string());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            out.push("wp.lambda: must be non-negative".to_string());
        }
        if self.probe_batch_size == 0 {
            out.push("wp.probe_batch_size: must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            input_err(p.join("; "))
        }
    }
}

/// Default phase length: as many probe iterations as real minibatches per
/// epoch.
pub fn default_iterations(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size.max(1)).max(1)
}

/// Outcome of one white-paper phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WpPhaseStats {
    pub losses: Vec<f32>,
    /// Uniformity score of a fixed probe batch before the phase, under the
    /// forward pass the phase optimizes (batch statistics).
    pub uniformity_before: f32,
    /// Same batch and forward pass, after the phase.
    pub uniformity_after: f32,
    /// Eval-mode (running statistics) score of the same batch before the phase.
    pub eval_uniformity_before: f32,
    pub eval_uniformity_after: f32,
}

/// A batch of probe images shaped `[batch, c, h, w]`, ready for the model.
pub fn make_probe_batch<R: Rng + ?Sized>(
    kind: &ProbeKind,
    batch: usize,
    image_shape: [usize; 3],
    normalization: Option<&Normalization>,
    rng: &mut R,
) -> Result<Tensor> {
    if batch == 0 || image_shape.contains(&0) {
        return dim_err("probe batch and image dimensions must be positive");
    }
    let [c, h, w] = image_shape;
    let shape = [batch, c, h, w];
    match kind {
        ProbeKind::WhitePaper => {
            let raw = Tensor::full(&shape, 1.0);
            match normalization {
                Some(n) => n.normalize(&raw),
                None => Ok(raw),
            }
        }
        ProbeKind::GaussianNoise => Ok(Tensor::randn(&shape, rng)),
        ProbeKind::DatasetImages(src) => {
            if src.is_empty() {
                return input_err("probe source dataset is empty");
            }
            if src.image_shape() != image_shape {
                return dim_err(format!(
                    "probe source images are {:?}, model expects {image_shape:?}",
                    src.image_shape()
                ));
            }
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..src.len())).collect();
            let raw = src.images().gather(&idx);
            match normalization {
                Some(n) => n.normalize(&raw),
                None => Ok(raw),
            }
        }
    }
}

/// Mean KL divergence from uniform of the softmax rows of `logits`, in nats.
pub fn uniformity_score(logits: &Tensor) -> Result<f32> {
    let &[b, n] = logits.shape() else {
        return dim_err(format!("uniformity_score expects [b, N], got {:?}", logits.shape()));
    };
    if n < 2 {
        return dim_err("uniformity_score needs at least two classes");
    }
    let (per_row, _, _) = kl_uniform_rows(logits.data(), n);
    Ok((per_row.iter().sum::<f64>() / b as f64) as f32)
}

/// `lambda * mean KL(p || uniform)` as a value, without a graph.
pub fn kl_uniform_loss(logits: &Tensor, lambda: f32) -> Result<f32> {
    Ok(lambda * uniformity_score(logits)?)
}

/// Learning-rate and regularization settings for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// Runs exactly `wp.m` iterations of probe training.
///
/// `opt` is the real-image optimizer state; it is used directly when
/// `wp.share_momentum` is set and ignored otherwise.
pub fn wp_phase(
    model: &mut Model,
    wp: &WpConfig,
    opt: &mut SgdState,
    step: StepSettings,
    normalization: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<WpPhaseStats> {
    wp.validate()?;
    let norm = (!wp.probe_raw).then_some(normalization);
    let shape = model.input_shape();
    let probe_fixed = make_probe_batch(&wp.probe, wp.probe_batch_size, shape, norm, rng)?;
    let score = |m: &Model, mode| -> Result<f32> { uniformity_score(&m.logits(&probe_fixed, mode)?) };
    let uniformity_before = score(model, Mode::Train)?;
    let eval_uniformity_before = score(model, Mode::Eval)?;

    let mut local = SgdState::new();
    let state = if wp.share_momentum { opt } else { &mut local };
    let mut losses = Vec::with_capacity(wp.m);
    for iteration in 0..wp.m {
        let probe = make_probe_batch(&wp.probe, wp.probe_batch_size, shape, norm, rng)?;
        let mut g = Graph::new();
        let x = g.constant(probe);
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::WpDiverged { iteration },
            other => other,
        };
        let fwd = model.forward(&mut g, x, Mode::Train).map_err(diverged)?;
        let loss = g.kl_uniform(fwd.logits, wp.lambda).map_err(diverged)?;
        losses.push(g.value(loss).data()[0]);
        g.backward(loss).map_err(diverged)?;
        model.params_mut().zero_grad();
        model.accumulate_grads(&g, &fwd.bindings);
        if wp.bn_policy == WpBnPolicy::Update {
            model.apply_bn_updates(&fwd.bn_updates);
        }
        sgd_step(model.params_mut(), state, step.lr, step.momentum, step.weight_decay)?;
    }
    model.params_mut().zero_grad();
    let uniformity_after = score(model, Mode::Train)?;
    let eval_uniformity_after = score(model, Mode::Eval)?;
    if !uniformity_after.is_finite() || !eval_uniformity_after.is_finite() {
        return Err(Error::WpDiverged { iteration: wp.m });
    }
    Ok(WpPhaseStats { losses, uniformity_before, uniformity_after, eval_uniformity_before, eval_uniformity_after })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedClass {
    pub class: usize,
    pub confidence: f32,
}

/// Top-k softmax confidences of the model on one probe image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub topk: Vec<RankedClass>,
    pub uniformity: f32,
}

/// Eval-mode top-`k` classes for a single model-ready `[c, h, w]` image,
/// ties ranked by class index.
pub fn probe_report(model: &Model, image: &Tensor, k: usize) -> Result<ProbeReport> {
    let n = model.num_classes();
    if k == 0 || k > n {
        return input_err(format!("k must lie in 1..={n}, got {k}"));
    }
    let batch = match image.rank() {
        3 => Tensor::stack(std::slice::from_ref(image))?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return dim_err(format!("probe image must be [c, h, w], got {:?}", image.shape())),
    };
    let logits = model.logits(&batch, Mode::Eval)?;
    let probs = softmax_rows(logits.data(), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(ProbeReport {
        topk: order[..k].iter().map(|&c| RankedClass { class: c, confidence: probs[c] }).collect(),
        uniformity: uniformity_score(&logits)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::SeedableRng;

    #[test]
    fn white_paper_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = make_probe_batch(&ProbeKind::WhitePaper, 3, [3, 4, 4], None, &mut rng).unwrap();
        assert!(raw.data().iter().all(|&v| v == 1.0));
        let norm = Normalization { mean: vec![0.5; 3], std: vec![0.25; 3] };
        let n = make_probe_batch(&ProbeKind::WhitePaper, 3, [3, 4, 4], Some(&norm), &mut rng).unwrap();
        assert!(n.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn gaussian_probe_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = make_probe_batch(&ProbeKind::GaussianNoise, 4096, [1, 1, 1], None, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn probe_generation_is_seed_deterministic() {
        let src = Arc::new(
            Dataset::with_own_normalization(Tensor::from_fn(&[5, 1, 2, 2], |i| i as f32 / 20.0), vec![0; 5], 2).unwrap(),
        );
        for kind in [ProbeKind::WhitePaper, ProbeKind::GaussianNoise, ProbeKind::DatasetImages(src)] {
            let a = make_probe_batch(&kind, 4, [1, 2, 2], None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = make_probe_batch(&kind, 4, [1, 2, 2], None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b, "{}", kind.name());
        }
    }

    #[test]
    fn dataset_probe_shape_mismatch() {
        let src = Arc::new(Dataset::with_own_normalization(Tensor::zeros(&[2, 1, 2, 2]), vec![0, 1], 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_probe_batch(&ProbeKind::DatasetImages(src), 2, [3, 2, 2], None, &mut rng).is_err());
    }

    #[test]
    fn uniformity_cases() {
        let z = Tensor::zeros(&[3, 5]);
        assert_eq!(uniformity_score(&z).unwrap(), 0.0);
        let mut row = vec![0.0f32; 100];
        row[17] = 60.0;
        let one_hot = Tensor::new(&[1, 100], row).unwrap();
        assert!((uniformity_score(&one_hot).unwrap() - 100f32.ln()).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::randn(&[6, 4], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(logits.clone());
        let l = g.kl_uniform(v, 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], uniformity_score(&logits).unwrap());
    }

    #[test]
    fn zero_lambda_phase_leaves_parameters() {
        let spec = ModelSpec::SmallCnn { channels: vec![4] };
        let mut m = Model::build(&spec, [3, 8, 8], 3, 0).unwrap();
        let before = m.params().clone();
        let wp = WpConfig { m: 1, probe_batch_size: 4, bn_policy: WpBnPolicy::Freeze, ..WpConfig::new(1, 0.0) };
        let step = StepSettings { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let stats = wp_phase(&mut m, &wp, &mut SgdState::new(), step, &Normalization::identity(3), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(stats.losses, vec![0.0]);
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn phase_runs_m_iterations_and_reduces_score() {
        let spec = ModelSpec::SmallCnn { channels: vec![4] };
        let mut m = Model::build(&spec, [3, 8, 8], 5, 0).unwrap();
        // Bias the head so the probe output starts far from uniform.
        m.params_mut().get_mut("head.bias").unwrap().data_mut().copy_from_slice(&[3.0, 0.0, -1.0, 0.0, 1.0]);
        let wp = WpConfig { probe_batch_size: 8, ..WpConfig::new(30, 1.0) };
        let step = StepSettings { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let stats = wp_phase(&mut m, &wp, &mut SgdState::new(), step, &Normalization::identity(3), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(stats.losses.len(), 30);
        assert!(stats.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!(stats.uniformity_after <= 0.1 * stats.uniformity_before, "{stats:?}");
    }

    #[test]
    fn report_on_zero_head() {
        let spec = ModelSpec::SmallCnn { channels: vec![4] };
        let mut m = Model::build(&spec, [3, 8, 8], 4, 0).unwrap();
        m.params_mut().get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let r = probe_report(&m, &Tensor::full(&[3, 8, 8], 1.0), 4).unwrap();
        assert_eq!(r.topk.iter().map(|c| c.class).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(r.topk.iter().all(|c| c.confidence == 0.25));
        assert!(probe_report(&m, &Tensor::full(&[3, 8, 8], 1.0), 5).is_err());
    }
}
