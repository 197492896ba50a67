//! Epoch loop: a real-image SGD epoch followed, with probability `P`, by a
//! white-paper phase.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::{AugmentParams, Dataset};
use crate::diagnostics::{layer_drift, LayerDrift};
use crate::error::{input_err, Error, Result};
use crate::model::{Mode, Model, ParamStore};
use crate::optim::{lr_at, sgd_step, SgdState, TrainConfig};
use crate::seed::{stream, Stream};
use crate::tensor::Tensor;
use crate::wp::{wp_phase, StepSettings, WpConfig, WpPhaseStats};

pub const EVAL_BATCH: usize = 256;

/// Random streams consumed by the real-image phase.
pub struct TrainStreams {
    pub shuffle: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self { shuffle: stream(seed, Stream::Shuffle), augment: stream(seed, Stream::Augment) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    /// Error of the training-mode predictions made during the epoch.
    pub train_error: f32,
    /// Test error right after the real-image phase.
    pub test_error: f32,
    pub wp_invoked: bool,
    pub wp_stats: Option<WpPhaseStats>,
    /// Test error after the white-paper phase, when requested.
    pub post_wp_test_error: Option<f32>,
    pub drift_real: Option<Vec<LayerDrift>>,
    pub drift_wp: Option<Vec<LayerDrift>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub eval_after_wp: bool,
    pub track_drift: bool,
}

pub struct RunResult {
    pub logs: Vec<EpochLog>,
    /// Parameters right after the last real-image phase; the reported test
    /// error belongs to these.
    pub eval_snapshot: ParamStore,
}

impl RunResult {
    pub fn final_test_error(&self) -> Option<f32> {
        self.logs.last().map(|l| l.test_error)
    }
}

/// Normalized, optionally augmented batch for the listed samples.
fn training_batch(dataset: &Dataset, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Vec<usize>)> {
    let Some(rng) = augment else {
        return dataset.batch(indices);
    };
    let [c, h, w] = dataset.image_shape();
    let raw = dataset.images().gather(indices);
    let per = c * h * w;
    let mut out = vec![0.0; raw.numel()];
    for (src, dst) in raw.data().chunks(per).zip(out.chunks_mut(per)) {
        AugmentParams::sample(rng).apply(src, c, h, w, dst);
    }
    let labels = indices.iter().map(|&i| dataset.labels()[i]).collect();
    Ok((dataset.normalization().normalize(&Tensor::new(raw.shape(), out)?)?, labels))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// One shuffled pass over `dataset` in minibatches with cross-entropy and
/// SGD. Returns the training error of the predictions made along the way.
pub fn train_epoch(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    opt: &mut SgdState,
    lr: f32,
    streams: &mut TrainStreams,
) -> Result<f32> {
    if dataset.image_shape() != model.input_shape() {
        return input_err(format!(
            "dataset images are {:?}, model expects {:?}",
            dataset.image_shape(),
            model.input_shape()
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut streams.shuffle);
    let mut correct = 0;
    for chunk in order.chunks(config.batch_size) {
        let aug = config.augment.then_some(&mut streams.augment);
        let (x, labels) = training_batch(dataset, chunk, aug)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, xv, Mode::Train)?;
        correct += count_correct(g.value(fwd.logits), &labels);
        let loss = g.cross_entropy(fwd.logits, &labels)?;
        g.backward(loss)?;
        model.params_mut().zero_grad();
        model.accumulate_grads(&g, &fwd.bindings);
        model.apply_bn_updates(&fwd.bn_updates);
        sgd_step(model.params_mut(), opt, lr, config.momentum, config.weight_decay)?;
    }
    model.params_mut().zero_grad();
    Ok(1.0 - correct as f32 / dataset.len() as f32)
}

/// Eval-mode logits for the whole dataset, in order.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(dataset.len() * model.num_classes());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = dataset.batch(chunk)?;
        rows.extend_from_slice(model.logits(&x, Mode::Eval)?.data());
    }
    Tensor::new(&[dataset.len(), model.num_classes()], rows)
}

/// Eval-mode top-1 error on `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f32> {
    let logits = predict(model, dataset)?;
    Ok(1.0 - count_correct(&logits, dataset.labels()) as f32 / dataset.len() as f32)
}

fn check_compatible(model: &Model, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<()> {
    let mut problems = config.problems();
    if train.num_classes() != model.num_classes() || test.num_classes() != model.num_classes() {
        problems.push("dataset class count differs from the model".to_string());
    }
    if train.image_shape() != model.input_shape() || test.image_shape() != model.input_shape() {
        problems.push("dataset image shape differs from the model input".to_string());
    }
    if config.augment {
        let [_, h, w] = model.input_shape();
        if h != w {
            problems.push("train.augment: requires square images".to_string());
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        input_err(problems.join("; "))
    }
}

/// Full training run. Every epoch: a real-image SGD epoch, an eval-mode test
/// pass, then a uniform draw from a dedicated stream decides whether a
/// white-paper phase follows.
pub fn run_training(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    wp: &WpConfig,
    options: RunOptions,
) -> Result<RunResult> {
    check_compatible(model, train, test, config)?;
    wp.validate()?;
    let mut streams = TrainStreams::new(config.seed);
    let mut draw_rng = stream(config.seed, Stream::WpDraw);
    let mut probe_rng = stream(config.seed, Stream::Probe);
    let mut opt = SgdState::new();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut eval_snapshot = model.params().clone();

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let before = options.track_drift.then(|| model.params().clone());
        let train_error = train_epoch(model, train, config, &mut opt, lr, &mut streams).map_err(|e| diverged(e, epoch))?;
        let test_error = evaluate(model, test).map_err(|e| diverged(e, epoch))?;
        let drift_real = match &before {
            Some(b) => Some(layer_drift(b, model.params())?),
            None => None,
        };
        if epoch + 1 == config.epochs {
            eval_snapshot = model.params().clone();
        }

        let invoke = draw_rng.random::<f64>() < wp.p;
        let mut log = EpochLog {
            epoch,
            lr,
            train_error,
            test_error,
            wp_invoked: invoke,
            wp_stats: None,
            post_wp_test_error: None,
            drift_real,
            drift_wp: None,
        };
        if invoke {
            let mid = options.track_drift.then(|| model.params().clone());
            let step = StepSettings { lr, momentum: config.momentum, weight_decay: config.weight_decay };
            log.wp_stats = Some(wp_phase(model, wp, &mut opt, step, train.normalization(), &mut probe_rng)?);
            if let Some(m) = &mid {
                log.drift_wp = Some(layer_drift(m, model.params())?);
            }
            if options.eval_after_wp {
                log.post_wp_test_error = Some(evaluate(model, test)?);
            }
        }
        logs.push(log);
    }
    Ok(RunResult { logs, eval_snapshot })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Diverged { epoch, msg },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn toy() -> (Dataset, Dataset) {
        // Two classes separated by mean brightness.
        let n = 32;
        let images = Tensor::from_fn(&[n, 1, 4, 4], |i| {
            let s = i / 16;
            let base = if s % 2 == 0 { 0.2 } else { 0.8 };
            base + 0.05 * ((i * 7919 % 13) as f32 / 13.0 - 0.5)
        });
        let labels = (0..n).map(|s| s % 2).collect();
        let train = Dataset::with_own_normalization(images, labels, 2).unwrap();
        let test = train.subset(&(0..8).collect::<Vec<_>>()).unwrap();
        (train, test)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, lr: 0.05, augment: false, lr_decay_epochs: vec![], ..TrainConfig::default() }
    }

    #[test]
    fn learns_toy_problem() {
        let (train, test) = toy();
        let mut m = Model::build(&ModelSpec::Mlp { hidden: vec![8] }, [1, 4, 4], 2, 0).unwrap();
        let r = run_training(&mut m, &train, &test, &cfg(10), &WpConfig::disabled(), RunOptions::default()).unwrap();
        assert_eq!(r.logs.len(), 10);
        assert!(r.logs.iter().all(|l| !l.wp_invoked));
        assert_eq!(r.final_test_error(), Some(0.0));
    }

    #[test]
    fn p_one_invokes_every_epoch() {
        let (train, test) = toy();
        let mut m = Model::build(&ModelSpec::SmallCnn { channels: vec![2] }, [1, 4, 4], 2, 0).unwrap();
        let wp = WpConfig { probe_batch_size: 4, ..WpConfig::new(3, 1.0) };
        let opts = RunOptions { eval_after_wp: true, track_drift: true };
        let r = run_training(&mut m, &train, &test, &cfg(3), &wp, opts).unwrap();
        for l in &r.logs {
            assert!(l.wp_invoked);
            assert_eq!(l.wp_stats.as_ref().unwrap().losses.len(), 3);
            assert!(l.post_wp_test_error.is_some() && l.drift_real.is_some() && l.drift_wp.is_some());
        }
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let (train, test) = toy();
        let mut m = Model::build(&ModelSpec::Mlp { hidden: vec![4] }, [1, 4, 4], 3, 0).unwrap();
        assert!(run_training(&mut m, &train, &test, &cfg(1), &WpConfig::disabled(), RunOptions::default()).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let (train, test) = toy();
        let mut m = Model::build(&ModelSpec::Mlp { hidden: vec![4] }, [1, 4, 4], 2, 0).unwrap();
        let c = TrainConfig { lr: 1e30, ..cfg(3) };
        match run_training(&mut m, &train, &test, &c, &WpConfig::disabled(), RunOptions::default()) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.logs)),
        }
    }
}
