//! Common image corruptions at five severities and the corruption-error
//! aggregates CE_c and mCE.
//!
//! Severity tables are tuned for 32x32 images in `[0, 1]`.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{dim_err, input_err, Error, Result};
use crate::model::Model;
use crate::seed::derive;
use crate::tensor::Tensor;
use crate::train::evaluate;

pub const SEVERITIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Leaves images untouched; useful as a control.
    Identity,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    /// The seven implemented corruptions, excluding the identity control.
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Identity => "identity",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(CorruptionKind::Identity)
            .chain(Self::ALL)
            .find(|k| k.name() == name)
    }

    /// Parameter used at severities 1 to 5.
    pub fn table(self) -> [f32; SEVERITIES] {
        match self {
            CorruptionKind::Identity => [0.0; SEVERITIES],
            // Noise standard deviation.
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            // Photon count per unit intensity.
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            // Fraction of values replaced by salt or pepper.
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            // Blur standard deviation in pixels.
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0],
            // Additive intensity shift.
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            // Factor applied to deviations from the channel mean.
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            // Downsampled side as a fraction of the original.
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25],
        }
    }

    pub fn parameter(self, severity: usize) -> Result<f32> {
        if !(1..=SEVERITIES).contains(&severity) {
            return input_err(format!("severity must lie in 1..={SEVERITIES}, got {severity}"));
        }
        Ok(self.table()[severity - 1])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => dim_err(format!("corruptions expect [c, h, w], got {s:?}")),
    }
}

fn map_clipped(image: &Tensor, mut f: impl FnMut(f32) -> f32) -> Result<Tensor> {
    Tensor::new(image.shape(), image.data().iter().map(|&v| f(v).clamp(0.0, 1.0)).collect())
}

pub fn gaussian_noise<R: Rng + ?Sized>(image: &Tensor, sigma: f32, rng: &mut R) -> Result<Tensor> {
    chw(image)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
    map_clipped(image, |v| v + normal.sample(rng))
}

/// Each value becomes `Poisson(v * photons) / photons`.
pub fn shot_noise<R: Rng + ?Sized>(image: &Tensor, photons: f32, rng: &mut R) -> Result<Tensor> {
    chw(image)?;
    if !(photons > 0.0) {
        return input_err("photon count must be positive");
    }
    map_clipped(image, |v| {
        let rate = (v.max(0.0) * photons) as f64;
        if rate == 0.0 {
            return 0.0;
        }
        let draw: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
        draw as f32 / photons
    })
}

/// Replaces each value independently with probability `amount`, by 0 or 1
/// with equal odds.
pub fn impulse_noise<R: Rng + ?Sized>(image: &Tensor, amount: f32, rng: &mut R) -> Result<Tensor> {
    chw(image)?;
    if !(0.0..=1.0).contains(&amount) {
        return input_err("impulse amount must lie in [0, 1]");
    }
    map_clipped(image, |v| {
        if rng.random::<f32>() < amount {
            if rng.random_bool(0.5) { 1.0 } else { 0.0 }
        } else {
            v
        }
    })
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    if !(sigma > 0.0) {
        return input_err("blur sigma must be non-negative");
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * src[base + y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[base + clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum::<f32>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn brightness(image: &Tensor, delta: f32) -> Result<Tensor> {
    chw(image)?;
    map_clipped(image, |v| v + delta)
}

/// Scales deviations from each channel's mean by `factor`.
pub fn contrast(image: &Tensor, factor: f32) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    let plane = h * w;
    let mut out = image.data().to_vec();
    for ch in 0..c {
        let p = &mut out[ch * plane..(ch + 1) * plane];
        let mean = p.iter().sum::<f32>() / plane as f32;
        p.iter_mut().for_each(|v| *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0));
    }
    Tensor::new(image.shape(), out)
}

/// Box-downsamples to `round(side * factor)` cells per axis and scales back
/// up with nearest-neighbour lookup.
pub fn pixelate(image: &Tensor, factor: f32) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if !(factor > 0.0 && factor <= 1.0) {
        return input_err("pixelate factor must lie in (0, 1]");
    }
    let nh = ((h as f32 * factor).round() as usize).clamp(1, h);
    let nw = ((w as f32 * factor).round() as usize).clamp(1, w);
    let cell_y = |y: usize| y * nh / h;
    let cell_x = |x: usize| x * nw / w;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        let mut sum = vec![0.0f32; nh * nw];
        let mut count = vec![0u32; nh * nw];
        for y in 0..h {
            for x in 0..w {
                let cell = cell_y(y) * nw + cell_x(x);
                sum[cell] += src[base + y * w + x];
                count[cell] += 1;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let cell = cell_y(y) * nw + cell_x(x);
                out[base + y * w + x] = if count[cell] == 1 { src[base + y * w + x] } else { sum[cell] / count[cell] as f32 };
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Corrupts one `[c, h, w]` image; deterministic per `(seed, kind,
/// severity, image)`.
pub fn corrupt(image: &Tensor, kind: CorruptionKind, severity: usize, seed: u64) -> Result<Tensor> {
    let param = kind.parameter(severity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        CorruptionKind::Identity => {
            chw(image)?;
            Ok(image.clone())
        }
        CorruptionKind::GaussianNoise => gaussian_noise(image, param, &mut rng),
        CorruptionKind::ShotNoise => shot_noise(image, param, &mut rng),
        CorruptionKind::ImpulseNoise => impulse_noise(image, param, &mut rng),
        CorruptionKind::GaussianBlur => gaussian_blur(image, param),
        CorruptionKind::Brightness => brightness(image, param),
        CorruptionKind::Contrast => contrast(image, param),
        CorruptionKind::Pixelate => pixelate(image, param),
    }
}

/// Copy of `dataset` with every image corrupted; image `i` uses seed
/// `derive(seed, [i])`.
pub fn corrupt_dataset(dataset: &Dataset, kind: CorruptionKind, severity: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        images.push(corrupt(&dataset.images().select(i), kind, severity, derive(seed, &[i as u64]))?);
    }
    dataset.with_images(Tensor::stack(&images)?)
}

/// Top-1 errors `E[f][s][c]` for models `f`, severities `s` and
/// corruptions `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionErrorTable {
    pub models: Vec<String>,
    pub corruptions: Vec<CorruptionKind>,
    cells: Vec<Option<f64>>,
}

impl CorruptionErrorTable {
    pub fn new(models: Vec<String>, corruptions: Vec<CorruptionKind>) -> Self {
        let n = models.len() * SEVERITIES * corruptions.len();
        Self { models, corruptions, cells: vec![None; n] }
    }

    fn index(&self, f: usize, s: usize, c: usize) -> usize {
        assert!(f < self.models.len() && (1..=SEVERITIES).contains(&s) && c < self.corruptions.len());
        (f * SEVERITIES + (s - 1)) * self.corruptions.len() + c
    }

    /// Records the error of model `f` at severity `s` (1-based) on
    /// corruption `c`.
    pub fn set(&mut self, f: usize, s: usize, c: usize, error: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&error) {
            return input_err(format!("error {error} outside [0, 1]"));
        }
        let i = self.index(f, s, c);
        self.cells[i] = Some(error);
        Ok(())
    }

    pub fn get(&self, f: usize, s: usize, c: usize) -> Option<f64> {
        self.cells[self.index(f, s, c)]
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Rows `model,severity,corruption,error`; missing cells are left blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,severity,corruption,error\n");
        for (f, m) in self.models.iter().enumerate() {
            for sev in 1..=SEVERITIES {
                for (c, k) in self.corruptions.iter().enumerate() {
                    let e = self.get(f, sev, c).map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(s, "{m},{sev},{k},{e}");
                }
            }
        }
        s
    }
}

/// Evaluates every (model, severity, corruption) cell. Corruption noise is
/// seeded per (severity, corruption), so all models see the same images.
pub fn corruption_error_table(
    models: &[(&str, &Model)],
    clean: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
) -> Result<CorruptionErrorTable> {
    if models.is_empty() || kinds.is_empty() {
        return input_err("need at least one model and one corruption");
    }
    let mut table = CorruptionErrorTable::new(
        models.iter().map(|(n, _)| n.to_string()).collect(),
        kinds.to_vec(),
    );
    for s in 1..=SEVERITIES {
        for (c, &kind) in kinds.iter().enumerate() {
            let cell_seed = derive(seed, &[s as u64, c as u64]);
            let corrupted = corrupt_dataset(clean, kind, s, cell_seed)?;
            for (f, (name, model)) in models.iter().enumerate() {
                let e = evaluate(model, &corrupted)
                    .map_err(|e| Error::Input(format!("cell (model {name}, severity {s}, {kind}): {e}")))?;
                table.set(f, s, c, e as f64)?;
            }
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorruptionError {
    pub corruption: CorruptionKind,
    pub ce: f64,
}

/// `CE_c = (1 / (F * 5)) * sum over models and severities of E[f][s][c]`.
pub fn ce_per_corruption(table: &CorruptionErrorTable) -> Result<Vec<CorruptionError>> {
    if !table.is_complete() {
        return input_err("corruption error table has missing cells");
    }
    let f = table.models.len();
    Ok(table
        .corruptions
        .iter()
        .enumerate()
        .map(|(c, &kind)| {
            let mut total = 0.0;
            for m in 0..f {
                for s in 1..=SEVERITIES {
                    total += table.get(m, s, c).expect("complete table");
                }
            }
            CorruptionError { corruption: kind, ce: total / (f * SEVERITIES) as f64 }
        })
        .collect())
}

/// Mean of `CE_c` over the table's corruptions.
pub fn mce(table: &CorruptionErrorTable) -> Result<f64> {
    if table.corruptions.is_empty() {
        return input_err("no corruptions in the table");
    }
    let ce = ce_per_corruption(table)?;
    Ok(ce.iter().map(|c| c.ce).sum::<f64>() / ce.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessSummary {
    pub ce: Vec<CorruptionError>,
    pub mce: f64,
}

pub fn summarize(table: &CorruptionErrorTable) -> Result<RobustnessSummary> {
    Ok(RobustnessSummary { ce: ce_per_corruption(table)?, mce: mce(table)? })
}
