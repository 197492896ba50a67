//! Subcommand implementations. Each one writes its artifacts into an output
//! directory and returns nothing else of interest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use wpa_core::checkpoint::{load_model, read_file, save_model};
use wpa_core::data::{longtail_subsample, save_container, Dataset, LongTailSpec};
use wpa_core::diagnostics::{calibrate, ece, splice_experiment, ReliabilityBins, SpliceAccuracies};
use wpa_core::model::Model;
use wpa_core::robustness::{corruption_error_table, summarize, RobustnessSummary};
use wpa_core::train::{evaluate, run_training, RunOptions};
use wpa_core::wp::{probe_report, ProbeReport, WpBnPolicy};
use wpa_core::{Error, Result, Tensor};

use crate::artifacts::{drift_csv, epochs_csv, write_csv, write_json, Provenance};
use crate::config::ExperimentConfig;

/// Command-line values that replace config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub p: Option<f64>,
    pub lambda: Option<f32>,
    pub m: Option<usize>,
    pub probe_raw: bool,
    pub wp_bn_policy: Option<WpBnPolicy>,
    pub wp_fresh_momentum: bool,
    pub bins: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            let base = wpa_core::optim::TrainConfig::with_epochs(e);
            cfg.train.epochs = e;
            cfg.train.lr_decay_epochs = base.lr_decay_epochs;
        }
        if let Some(p) = self.p {
            cfg.wp.p = p;
        }
        if let Some(l) = self.lambda {
            cfg.wp.lambda = l;
        }
        if let Some(m) = self.m {
            cfg.wp.m = Some(m);
        }
        if self.probe_raw {
            cfg.wp.probe_raw = true;
        }
        if let Some(b) = self.wp_bn_policy {
            cfg.wp.bn_policy = b;
        }
        if self.wp_fresh_momentum {
            cfg.wp.share_momentum = false;
        }
        if let Some(b) = self.bins {
            cfg.diagnostics.bins = b;
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { config_sha256: cfg.hash(), seed: cfg.train.seed }
}

fn build_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<Model> {
    Model::build(&cfg.model, train.image_shape(), train.num_classes(), cfg.train.seed)
}

/// Builds the configured architecture and fills it from a checkpoint.
pub fn model_from_checkpoint(cfg: &ExperimentConfig, train: &Dataset, path: &Path) -> Result<Model> {
    let mut model = build_model(cfg, train)?;
    load_model(&mut model, path).map_err(|e| match e {
        Error::Io(io) => Error::Input(format!(
            "cannot load checkpoint {} for {}: {io}",
            path.display(),
            model.describe()
        )),
        other => other,
    })?;
    Ok(model)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    /// "vanilla" when white-paper phases are disabled.
    pub mode: String,
    pub model: String,
    pub train_len: usize,
    pub test_len: usize,
    pub epochs: usize,
    pub wp_iterations: Option<usize>,
    pub wp_phases: usize,
    pub final_train_error: f32,
    /// Error of the parameters right after the last real-image epoch.
    pub final_test_error: f32,
    /// Error of the final parameters, after any trailing white-paper phase.
    pub final_model_test_error: f32,
    pub ece: f64,
}

/// Trains one configuration and writes its artifacts:
/// `config.json`, `epochs.csv`, `drift.csv`, `reliability.csv`,
/// `summary.json`, `model_final.wpck` and `model_eval.wpck`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let dir = out_dir(cfg)?.to_path_buf();
    let prov = provenance(cfg);
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;

    let (train, test) = cfg.load_data()?;
    let wp = cfg.wp.resolve(train.len(), cfg.train.batch_size)?;
    let mut model = build_model(cfg, &train)?;
    let options = RunOptions {
        eval_after_wp: cfg.diagnostics.eval_after_wp,
        track_drift: cfg.diagnostics.track_drift,
    };
    let result = run_training(&mut model, &train, &test, &cfg.train, &wp, options)?;

    let mut eval_model = model.clone();
    eval_model.load_params(result.eval_snapshot.clone())?;
    let bins = calibrate(&eval_model, &test, cfg.diagnostics.bins)?;
    let last = result.logs.last().ok_or_else(|| Error::Input("no epochs were run".into()))?;
    let vanilla = wp.p == 0.0;
    let summary = RunSummary {
        mode: if vanilla { "vanilla" } else { "wp" }.into(),
        model: model.describe(),
        train_len: train.len(),
        test_len: test.len(),
        epochs: result.logs.len(),
        wp_iterations: (!vanilla).then_some(wp.m),
        wp_phases: result.logs.iter().filter(|l| l.wp_invoked).count(),
        final_train_error: last.train_error,
        final_test_error: last.test_error,
        final_model_test_error: evaluate(&model, &test)?,
        ece: ece(&bins)?,
    };

    write_csv(&dir.join("epochs.csv"), &prov, &epochs_csv(&result.logs))?;
    if cfg.diagnostics.track_drift {
        write_csv(&dir.join("drift.csv"), &prov, &drift_csv(&result.logs))?;
    }
    write_csv(&dir.join("reliability.csv"), &prov, &bins.to_csv())?;
    write_json(&dir.join("summary.json"), &prov, &summary)?;
    save_model(&model, &dir.join("model_final.wpck"))?;
    save_model(&eval_model, &dir.join("model_eval.wpck"))?;
    Ok(summary)
}

/// Runs every sweep cell in its own subdirectory, sequentially, and
/// collects `sweep.csv` in the parent directory.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<(String, RunSummary)>> {
    if cfg.sweep.is_none() {
        return Ok(vec![(String::new(), run(cfg)?)]);
    }
    let dir = out_dir(cfg)?.to_path_buf();
    let mut rows = Vec::new();
    let mut csv = String::from("cell,p,lambda,m,probe,final_test_error,ece,wp_phases\n");
    for (name, cell) in cfg.sweep_cells() {
        let s = run(&cell)?;
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{}",
            cell.wp.p,
            cell.wp.lambda,
            s.wp_iterations.map(|m| m.to_string()).unwrap_or_default(),
            cell.wp.probe.label(),
            s.final_test_error,
            s.ece,
            s.wp_phases
        );
        rows.push((name, s));
    }
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    write_csv(&dir.join("sweep.csv"), &provenance(cfg), &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct ProbeOutput {
    checkpoint: String,
    image: String,
    #[serde(flatten)]
    report: ProbeReport,
}

/// Top-k report for one image; `k` defaults to at most five classes.
/// Without an image the white-paper probe is used. Images are raw
/// `[c, h, w]` tensors in a checkpoint container and get the training
/// normalization unless `raw` is set.
pub fn probe(cfg: &ExperimentConfig, checkpoint: &Path, image: Option<&Path>, k: Option<usize>, raw: bool) -> Result<ProbeReport> {
    let dir = out_dir(cfg)?.to_path_buf();
    let (train, _) = cfg.load_data()?;
    let model = model_from_checkpoint(cfg, &train, checkpoint)?;
    let [c, h, w] = train.image_shape();
    let pixels = match image {
        None => Tensor::full(&[1, c, h, w], 1.0),
        Some(path) => {
            let mut entries = read_file(path)?;
            if entries.len() != 1 {
                return Err(Error::Input(format!(
                    "{}: expected one image tensor, found {}",
                    path.display(),
                    entries.len()
                )));
            }
            let t = entries.remove(0).1;
            if t.numel() != c * h * w || !(t.rank() == 3 || (t.rank() == 4 && t.shape()[0] == 1)) {
                return Err(Error::Input(format!(
                    "{}: image shape {:?} does not match the model input {:?}",
                    path.display(),
                    t.shape(),
                    [c, h, w]
                )));
            }
            t.reshape(&[1, c, h, w])?
        }
    };
    let input = if raw { pixels } else { train.normalization().normalize(&pixels)? };
    let k = k.unwrap_or_else(|| model.num_classes().min(5));
    let report = probe_report(&model, &input, k)?;
    let out = ProbeOutput {
        checkpoint: checkpoint.display().to_string(),
        image: image.map(|p| p.display().to_string()).unwrap_or_else(|| "white".into()),
        report: report.clone(),
    };
    write_json(&dir.join("probe.json"), &provenance(cfg), &out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorruptionOutput {
    pub models: Vec<String>,
    pub clean_error: Vec<f32>,
    #[serde(flatten)]
    pub summary: RobustnessSummary,
}

/// Evaluates the checkpoints on every configured corruption and severity;
/// writes `corruption.csv` and `corruption_summary.json`.
pub fn corrupt_eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<CorruptionOutput> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("corrupt-eval needs at least one --checkpoint".into()));
    }
    let dir = out_dir(cfg)?.to_path_buf();
    let (train, test) = cfg.load_data()?;
    let models = checkpoints
        .iter()
        .map(|p| model_from_checkpoint(cfg, &train, p))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = Vec::new();
    for (i, p) in checkpoints.iter().enumerate() {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        names.push(if names.contains(&stem) { format!("{stem}_{i}") } else { stem });
    }
    let named: Vec<(&str, &Model)> = names.iter().map(String::as_str).zip(&models).collect();
    let table = corruption_error_table(&named, &test, &cfg.diagnostics.corruptions, cfg.diagnostics.corruption_seed)?;
    let out = CorruptionOutput {
        clean_error: models.iter().map(|m| evaluate(m, &test)).collect::<Result<_>>()?,
        models: names,
        summary: summarize(&table)?,
    };
    let prov = provenance(cfg);
    write_csv(&dir.join("corruption.csv"), &prov, &table.to_csv())?;
    write_json(&dir.join("corruption_summary.json"), &prov, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationOutput {
    pub bins: usize,
    pub ece: f64,
    pub test_error: f32,
}

/// Reliability bins and ECE on the test split.
pub fn calibrate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(CalibrationOutput, ReliabilityBins)> {
    let dir = out_dir(cfg)?.to_path_buf();
    let (train, test) = cfg.load_data()?;
    let model = model_from_checkpoint(cfg, &train, checkpoint)?;
    let bins = calibrate(&model, &test, cfg.diagnostics.bins)?;
    let out = CalibrationOutput { bins: bins.bins.len(), ece: ece(&bins)?, test_error: evaluate(&model, &test)? };
    let prov = provenance(cfg);
    write_csv(&dir.join("reliability.csv"), &prov, &bins.to_csv())?;
    write_json(&dir.join("calibration.json"), &prov, &out)?;
    Ok((out, bins))
}

/// Writes `longtail_train.wpds`, `test.wpds` and `longtail.json`. The
/// ratio comes from `rho` or, failing that, the config.
pub fn longtail_gen(cfg: &ExperimentConfig, rho: Option<f64>) -> Result<LongTailSpec> {
    let rho = rho
        .or(cfg.longtail_rho)
        .ok_or_else(|| Error::Usage("longtail-gen needs --rho or longtail_rho in the config".into()))?;
    let dir = out_dir(cfg)?.to_path_buf();
    let (train, test) = cfg.dataset.load()?;
    let (tail, spec) = longtail_subsample(&train, rho, cfg.train.seed)?;
    save_container(&tail, &dir.join("longtail_train.wpds"))?;
    save_container(&test, &dir.join("test.wpds"))?;
    write_json(&dir.join("longtail.json"), &provenance(cfg), &spec)?;
    Ok(spec)
}

/// Accuracies of the four conv-side / head combinations of two checkpoints.
pub fn splice(cfg: &ExperimentConfig, pre: &Path, post: &Path) -> Result<SpliceAccuracies> {
    let dir = out_dir(cfg)?.to_path_buf();
    let (train, test) = cfg.load_data()?;
    let a = model_from_checkpoint(cfg, &train, pre)?;
    let b = model_from_checkpoint(cfg, &train, post)?;
    let acc = splice_experiment(&a, &b, &test)?;
    write_json(&dir.join("splice.json"), &provenance(cfg), &acc)?;
    Ok(acc)
}

/// Reads `WP_THREADS`. The engine runs on one thread; the variable is
/// checked so that a malformed value is reported rather than ignored.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("WP_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        Error::Diverged { .. } | Error::WpDiverged { .. } => 3,
        _ => 1,
    }
}
