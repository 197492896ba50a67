//! Glyph-on-colour dataset whose background colour is a train-only
//! shortcut.
//!
//! Each class owns a glyph shape and a palette colour. In the training split
//! the background takes the class colour with probability `bias` and a
//! uniformly random palette colour otherwise; in the test split every
//! background is random, so only the glyph carries label information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Normalization};
use crate::error::{input_err, Result};
use crate::seed::derive;
use crate::tensor::Tensor;

/// Side length of the square canvas.
pub const CANVAS: usize = 32;
/// Side length of a glyph.
pub const GLYPH: usize = 16;

const PIXEL_NOISE: f32 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutSplit {
    pub train: Dataset,
    /// Colours assigned independently of the label.
    pub test: Dataset,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Evenly spaced hues, one colour per class.
pub fn palette(classes: usize) -> Vec<[f32; 3]> {
    (0..classes).map(|k| hsv_to_rgb(k as f32 / classes as f32, 0.7, 0.85)).collect()
}

/// Binary `GLYPH x GLYPH` mask for class `k`.
fn glyph(k: usize) -> Vec<bool> {
    let n = GLYPH as f32;
    let c = (n - 1.0) / 2.0;
    let shape = |y: usize, x: usize| -> bool {
        let (fy, fx) = (y as f32 - c, x as f32 - c);
        let r = (fy * fy + fx * fx).sqrt();
        match k {
            0 => (2..14).contains(&y) && (2..14).contains(&x),
            1 => r <= 7.0,
            2 => y >= 2 && y <= 14 && (fx.abs() <= (y as f32 - 1.0) * 0.55),
            3 => (6..10).contains(&y) || (6..10).contains(&x),
            4 => (fy - fx).abs() <= 2.0 || (fy + fx).abs() <= 2.0,
            5 => (4.0..=7.5).contains(&r),
            6 => y % 6 < 3,
            7 => x % 6 < 3,
            8 => fy.abs() + fx.abs() <= 7.5,
            9 => (x < 5 && y >= 1) || (y >= 11 && x < 15),
            _ => unreachable!(),
        }
    };
    if k < 10 {
        return (0..GLYPH * GLYPH).map(|i| shape(i / GLYPH, i % GLYPH)).collect();
    }
    // Blocky random pattern for classes beyond the hand-made shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(derive(0x9_1c0f, &[k as u64]));
    let cells: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
    (0..GLYPH * GLYPH).map(|i| cells[(i / GLYPH / 4) * 4 + (i % GLYPH) / 4]).collect()
}

fn render(
    rng: &mut ChaCha8Rng,
    mask: &[bool],
    background: [f32; 3],
    noise: &Normal<f32>,
    out: &mut Vec<f32>,
) {
    let oy = rng.random_range(0..=CANVAS - GLYPH);
    let ox = rng.random_range(0..=CANVAS - GLYPH);
    let ink: f32 = rng.random_range(0.05..0.25);
    for bg in background {
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let inside = (oy..oy + GLYPH).contains(&y) && (ox..ox + GLYPH).contains(&x);
                let base = if inside && mask[(y - oy) * GLYPH + (x - ox)] { ink } else { bg };
                out.push((base + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
}

fn split(classes: usize, n_per_class: usize, bias: f64, seed: u64, tag: u64) -> (Tensor, Vec<usize>) {
    let colors = palette(classes);
    let masks: Vec<Vec<bool>> = (0..classes).map(glyph).collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid noise");
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[tag]));
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * CANVAS * CANVAS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let color = if rng.random_bool(bias) { k } else { rng.random_range(0..classes) };
        render(&mut rng, &masks[k], colors[color], &noise, &mut data);
        labels.push(k);
    }
    (Tensor::new(&[n, 3, CANVAS, CANVAS], data).expect("consistent size"), labels)
}

/// Builds the biased training split and the colour-randomised test split.
/// Both share the training split's normalization.
pub fn synthetic_shortcut_dataset(n_per_class: usize, classes: usize, bias: f64, seed: u64) -> Result<ShortcutSplit> {
    if classes < 2 {
        return input_err(format!("need at least 2 classes, got {classes}"));
    }
    if !(0.0..=1.0).contains(&bias) {
        return input_err(format!("bias must lie in [0, 1], got {bias}"));
    }
    if n_per_class == 0 {
        return input_err("n_per_class must be positive");
    }
    let (xtr, ytr) = split(classes, n_per_class, bias, seed, 1);
    let (xte, yte) = split(classes, n_per_class, 0.0, seed, 2);
    let norm = Normalization::from_images(&xtr)?;
    Ok(ShortcutSplit {
        train: Dataset::new(xtr, ytr, classes, norm.clone())?,
        test: Dataset::new(xte, yte, classes, norm)?,
    })
}
