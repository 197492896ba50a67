//! Experiment configuration files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wpa_core::data::{
    load_cifar_binary, load_container, load_idx, longtail_subsample, synthetic_shortcut_dataset, Dataset,
    Normalization,
};
use wpa_core::model::ModelSpec;
use wpa_core::optim::TrainConfig;
use wpa_core::robustness::CorruptionKind;
use wpa_core::wp::{default_iterations, ProbeKind, WpBnPolicy, WpConfig};
use wpa_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Glyphs on coloured backgrounds; colour predicts the label in the
    /// training split only.
    Synthetic {
        n_per_class: usize,
        classes: usize,
        bias: f64,
        #[serde(default)]
        seed: u64,
    },
    /// CIFAR binary batch files.
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "ten")]
        num_classes: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "ten")]
        num_classes: usize,
    },
    /// Dataset containers written by `longtail-gen` or the library.
    Container { train: PathBuf, test: PathBuf },
}

fn ten() -> usize {
    10
}

impl DatasetSpec {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Synthetic { .. } => Vec::new(),
            DatasetSpec::Cifar { train, test, .. } => train.iter().chain(test).map(PathBuf::as_path).collect(),
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                vec![train_images, train_labels, test_images, test_labels]
            }
            DatasetSpec::Container { train, test } => vec![train, test],
        }
    }

    /// Train and test splits; the test split uses the training normalization.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DatasetSpec::Synthetic { n_per_class, classes, bias, seed } => {
                let s = synthetic_shortcut_dataset(*n_per_class, *classes, *bias, *seed)?;
                return Ok((s.train, s.test));
            }
            DatasetSpec::Cifar { train, test, num_classes } => {
                (load_cifar_binary(train, *num_classes)?, load_cifar_binary(test, *num_classes)?)
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, num_classes } => (
                load_idx(train_images, train_labels, *num_classes)?,
                load_idx(test_images, test_labels, *num_classes)?,
            ),
            DatasetSpec::Container { train, test } => (load_container(train)?, load_container(test)?),
        };
        let norm = Normalization::from_images(train.images())?;
        Ok((train.with_normalization(norm.clone())?, test.with_normalization(norm)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSpec {
    White,
    Gaussian,
    /// Images from a dataset container, drawn with replacement.
    Dataset(PathBuf),
}

impl ProbeSpec {
    pub fn label(&self) -> String {
        match self {
            ProbeSpec::White => "white".into(),
            ProbeSpec::Gaussian => "gaussian".into(),
            ProbeSpec::Dataset(p) => format!(
                "dataset-{}",
                p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            ),
        }
    }

    fn kind(&self) -> Result<ProbeKind> {
        Ok(match self {
            ProbeSpec::White => ProbeKind::WhitePaper,
            ProbeSpec::Gaussian => ProbeKind::GaussianNoise,
            ProbeSpec::Dataset(p) => ProbeKind::DatasetImages(Arc::new(load_container(p)?)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpSettings {
    pub p: f64,
    /// Iterations per phase; defaults to the number of real minibatches per
    /// epoch.
    pub m: Option<usize>,
    pub lambda: f32,
    pub probe: ProbeSpec,
    /// Defaults to the training batch size.
    pub probe_batch_size: Option<usize>,
    pub probe_raw: bool,
    pub bn_policy: WpBnPolicy,
    pub share_momentum: bool,
}

impl Default for WpSettings {
    fn default() -> Self {
        Self {
            p: 1.0,
            m: None,
            lambda: 1.0,
            probe: ProbeSpec::White,
            probe_batch_size: None,
            probe_raw: false,
            bn_policy: WpBnPolicy::Update,
            share_momentum: true,
        }
    }
}

impl WpSettings {
    pub fn resolve(&self, train_len: usize, batch_size: usize) -> Result<WpConfig> {
        let cfg = WpConfig {
            p: self.p,
            m: self.m.unwrap_or_else(|| default_iterations(train_len, batch_size)),
            lambda: self.lambda,
            probe: self.probe.kind()?,
            probe_batch_size: self.probe_batch_size.unwrap_or(batch_size),
            probe_raw: self.probe_raw,
            bn_policy: self.bn_policy,
            share_momentum: self.share_momentum,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub p: Option<Vec<f64>>,
    pub lambda: Option<Vec<f32>>,
    pub m: Option<Vec<usize>>,
    pub probe: Option<Vec<ProbeSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Reliability-diagram bins.
    pub bins: usize,
    pub track_drift: bool,
    /// Also evaluate the test set right after every white-paper phase.
    pub eval_after_wp: bool,
    pub corruptions: Vec<CorruptionKind>,
    pub corruption_seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            bins: wpa_core::diagnostics::DEFAULT_BINS,
            track_drift: true,
            eval_after_wp: false,
            corruptions: CorruptionKind::ALL.to_vec(),
            corruption_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Imbalance ratio applied to the training split.
    #[serde(default)]
    pub longtail_rho: Option<f64>,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub wp: WpSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn check_axis<T>(axis: &Option<Vec<T>>, name: &str, out: &mut Vec<String>) {
    if matches!(axis, Some(v) if v.is_empty()) {
        out.push(format!("sweep.{name}: must not be empty"));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form. The output directory is left
    /// out, so identical experiments written to different places share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_string(&c).expect("config serializes").as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Every invalid field with the reason; empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        match &self.dataset {
            DatasetSpec::Synthetic { n_per_class, classes, bias, .. } => {
                if *n_per_class == 0 {
                    out.push("dataset.n_per_class: must be positive".into());
                }
                if *classes < 2 {
                    out.push("dataset.classes: need at least 2".into());
                }
                if !(0.0..=1.0).contains(bias) {
                    out.push("dataset.bias: must lie in [0, 1]".into());
                }
            }
            DatasetSpec::Cifar { train, test, .. } if train.is_empty() || test.is_empty() => {
                out.push("dataset: cifar needs at least one train and one test file".into());
            }
            _ => {}
        }
        for p in self.dataset.paths() {
            if !p.exists() {
                out.push(format!("dataset: file {} does not exist", p.display()));
            }
        }
        if let Some(rho) = self.longtail_rho {
            if !(rho >= 1.0) {
                out.push("longtail_rho: must be at least 1".into());
            }
        }
        let wp = &self.wp;
        if !(0.0..=1.0).contains(&wp.p) {
            out.push("wp.p: must lie in [0, 1]".into());
        }
        if wp.m == Some(0) {
            out.push("wp.m: must be positive".into());
        }
        if !(wp.lambda >= 0.0) || !wp.lambda.is_finite() {
            out.push("wp.lambda: must be non-negative".into());
        }
        if wp.probe_batch_size == Some(0) {
            out.push("wp.probe_batch_size: must be positive".into());
        }
        if let ProbeSpec::Dataset(p) = &wp.probe {
            if !p.exists() {
                out.push(format!("wp.probe: file {} does not exist", p.display()));
            }
        }
        if let Some(s) = &self.sweep {
            check_axis(&s.p, "p", &mut out);
            check_axis(&s.lambda, "lambda", &mut out);
            check_axis(&s.m, "m", &mut out);
            check_axis(&s.probe, "probe", &mut out);
            if let Some(ps) = &s.p {
                if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    out.push("sweep.p: values must lie in [0, 1]".into());
                }
            }
            if let Some(ls) = &s.lambda {
                if ls.iter().any(|l| !(*l >= 0.0)) {
                    out.push("sweep.lambda: values must be non-negative".into());
                }
            }
            if matches!(&s.m, Some(ms) if ms.contains(&0)) {
                out.push("sweep.m: values must be positive".into());
            }
        }
        if self.diagnostics.bins == 0 {
            out.push("diagnostics.bins: must be positive".into());
        }
        if self.diagnostics.corruptions.is_empty() {
            out.push("diagnostics.corruptions: must not be empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(format!("invalid config:\n  {}", p.join("\n  "))))
        }
    }

    /// Train and test splits after the optional long-tail subsampling.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.dataset.load()?;
        match self.longtail_rho {
            Some(rho) => Ok((longtail_subsample(&train, rho, self.train.seed)?.0, test)),
            None => Ok((train, test)),
        }
    }

    /// One config per cell of the sweep grid with its directory name, or
    /// the config itself when no sweep is set.
    pub fn sweep_cells(&self) -> Vec<(String, ExperimentConfig)> {
        let Some(axes) = &self.sweep else {
            return vec![(String::new(), self.clone())];
        };
        let mut cells = vec![(Vec::<String>::new(), self.clone())];
        let mut expand = |label: &dyn Fn(usize) -> String, len: usize, apply: &dyn Fn(&mut ExperimentConfig, usize)| {
            cells = cells
                .iter()
                .flat_map(|(names, cfg)| {
                    (0..len).map(move |i| {
                        let mut c = cfg.clone();
                        apply(&mut c, i);
                        let mut n = names.clone();
                        n.push(label(i));
                        (n, c)
                    })
                })
                .collect();
        };
        if let Some(ps) = &axes.p {
            expand(&|i| format!("p{}", ps[i]), ps.len(), &|c, i| c.wp.p = ps[i]);
        }
        if let Some(ls) = &axes.lambda {
            expand(&|i| format!("lambda{}", ls[i]), ls.len(), &|c, i| c.wp.lambda = ls[i]);
        }
        if let Some(ms) = &axes.m {
            expand(&|i| format!("m{}", ms[i]), ms.len(), &|c, i| c.wp.m = Some(ms[i]));
        }
        if let Some(probes) = &axes.probe {
            expand(&|i| probes[i].label(), probes.len(), &|c, i| c.wp.probe = probes[i].clone());
        }
        cells
            .into_iter()
            .map(|(names, mut cfg)| {
                let name = names.join("_");
                cfg.out_dir = self.out_dir.join(&name);
                cfg.sweep = None;
                (name, cfg)
            })
            .collect()
    }
}
