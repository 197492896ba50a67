use proptest::prelude::*;

use wpa_core::autodiff::Graph;
use wpa_core::data::synthetic_shortcut_dataset;
use wpa_core::model::{Model, ModelSpec, ParamKind};
use wpa_core::optim::{SgdState, TrainConfig};
use wpa_core::seed::{stream, Stream};
use wpa_core::train::{run_training, RunOptions};
use wpa_core::wp::{kl_uniform_loss, uniformity_score, wp_phase, StepSettings, WpBnPolicy, WpConfig};
use wpa_core::Tensor;

fn logits() -> impl Strategy<Value = Tensor> {
    (1usize..6, 2usize..12).prop_flat_map(|(b, n)| {
        prop::collection::vec(-20.0f32..20.0, b * n).prop_map(move |d| Tensor::new(&[b, n], d).unwrap())
    })
}

proptest! {
    #[test]
    fn score_lies_between_zero_and_ln_n(z in logits()) {
        let n = z.shape()[1] as f32;
        let s = uniformity_score(&z).unwrap();
        prop_assert!(s >= 0.0 && s <= n.ln() + 1e-6, "{s}");
    }

    #[test]
    fn score_ignores_per_row_shifts(z in logits(), shift in -50.0f32..50.0) {
        let n = z.shape()[1];
        let moved = Tensor::from_fn(z.shape(), |i| z.data()[i] + shift * ((i / n) as f32 + 1.0));
        let (a, b) = (uniformity_score(&z).unwrap(), uniformity_score(&moved).unwrap());
        prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a), "{a} vs {b}");
    }

    #[test]
    fn loss_is_linear_in_lambda(z in logits(), lambda in 0.0f32..10.0) {
        let one = kl_uniform_loss(&z, 1.0).unwrap();
        let scaled = kl_uniform_loss(&z, lambda).unwrap();
        prop_assert!((scaled - lambda * one).abs() <= 1e-5 * (1.0 + scaled.abs()));
    }

    #[test]
    fn gradient_rows_sum_to_zero(z in logits()) {
        // Softmax is shift invariant, so no gradient flows along the all-ones direction.
        let n = z.shape()[1];
        let mut g = Graph::new();
        let v = g.param(z);
        let l = g.kl_uniform(v, 1.3).unwrap();
        g.backward(l).unwrap();
        for row in g.grad(v).unwrap().chunks(n) {
            prop_assert!(row.iter().sum::<f32>().abs() <= 1e-5);
        }
    }
}

fn small_setup() -> (wpa_core::data::ShortcutSplit, Model) {
    let split = synthetic_shortcut_dataset(4, 3, 0.5, 2).unwrap();
    let model = Model::build(&ModelSpec::SmallCnn { channels: vec![3] }, [3, 32, 32], 3, 1).unwrap();
    (split, model)
}

#[test]
fn freeze_policy_keeps_running_statistics() {
    let (split, mut model) = small_setup();
    let before = model.params().clone();
    let wp = WpConfig { bn_policy: WpBnPolicy::Freeze, probe_batch_size: 4, ..WpConfig::new(3, 1.0) };
    let step = StepSettings { lr: 0.05, momentum: 0.9, weight_decay: 0.0 };
    let mut rng = stream(0, Stream::Probe);
    wp_phase(&mut model, &wp, &mut SgdState::new(), step, split.train.normalization(), &mut rng).unwrap();
    let mut trainable_moved = false;
    for ((name, a, kind), (_, b, _)) in before.iter().zip(model.params().iter()) {
        if kind == ParamKind::Trainable {
            trainable_moved |= a.data() != b.data();
        } else {
            assert_eq!(a.data(), b.data(), "{name} changed under the freeze policy");
        }
    }
    assert!(trainable_moved);

    let mut updated = small_setup().1;
    let wp = WpConfig { probe_batch_size: 4, ..WpConfig::new(3, 1.0) };
    let mut rng = stream(0, Stream::Probe);
    wp_phase(&mut updated, &wp, &mut SgdState::new(), step, split.train.normalization(), &mut rng).unwrap();
    let buffers_moved = before
        .iter()
        .zip(updated.params().iter())
        .any(|((_, a, k), (_, b, _))| k == ParamKind::Buffer && a.data() != b.data());
    assert!(buffers_moved);
}

#[test]
fn momentum_sharing_changes_the_phase() {
    let (split, base) = small_setup();
    let mut primed = SgdState::new();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 0.05, augment: false, ..TrainConfig::default() };
    let mut warm = base.clone();
    wpa_core::train::train_epoch(&mut warm, &split.train, &cfg, &mut primed, 0.05, &mut wpa_core::train::TrainStreams::new(0)).unwrap();
    let step = StepSettings { lr: 0.05, momentum: 0.9, weight_decay: 0.0 };
    let run = |share: bool| {
        let mut m = warm.clone();
        let mut opt = primed.clone();
        let wp = WpConfig { share_momentum: share, probe_batch_size: 4, ..WpConfig::new(2, 1.0) };
        wp_phase(&mut m, &wp, &mut opt, step, split.train.normalization(), &mut stream(3, Stream::Probe)).unwrap();
        (m, opt)
    };
    let (shared, shared_opt) = run(true);
    let (fresh, fresh_opt) = run(false);
    assert_ne!(shared.params(), fresh.params());
    assert_ne!(shared_opt, primed);
    assert_eq!(fresh_opt, primed);
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let (split, base) = small_setup();
    let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 0.05, ..TrainConfig::default() };
    let wp = WpConfig { p: 0.5, probe_batch_size: 4, ..WpConfig::new(2, 1.0) };
    let go = |seed: u64| {
        let mut m = base.clone();
        let c = TrainConfig { seed, ..cfg.clone() };
        let r = run_training(&mut m, &split.train, &split.test, &c, &wp, RunOptions { eval_after_wp: true, track_drift: true }).unwrap();
        (m.params().clone(), r.logs)
    };
    let (a, la) = go(5);
    let (b, lb) = go(5);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(go(6).0, a);
}

#[test]
fn phase_loss_mostly_decreases() {
    let split = synthetic_shortcut_dataset(20, 4, 0.0, 3).unwrap();
    let mut model = Model::build(&ModelSpec::SmallCnn { channels: vec![4, 8] }, [3, 32, 32], 4, 0).unwrap();
    let cfg = TrainConfig { batch_size: 16, lr: 0.05, ..TrainConfig::with_epochs(4) };
    run_training(&mut model, &split.train, &split.test, &cfg, &WpConfig::disabled(), RunOptions::default()).unwrap();
    let wp = WpConfig { probe_batch_size: 16, ..WpConfig::new(wpa_core::wp::default_iterations(split.train.len(), 16), 1.0) };
    let step = StepSettings { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let stats = wp_phase(&mut model, &wp, &mut SgdState::new(), step, split.train.normalization(), &mut stream(1, Stream::Probe)).unwrap();
    let pairs = stats.losses.windows(2).count();
    let down = stats.losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down * 5 >= pairs * 4, "{down}/{pairs} non-increasing: {:?}", stats.losses);
}
