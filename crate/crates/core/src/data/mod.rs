//! Datasets, ingestion, augmentation and dataset construction.

mod augment;
mod loaders;
mod longtail;
mod synthetic;

pub use augment::{augment, AugmentParams, CROP_PADDING};
pub use loaders::{load_cifar_binary, load_container, load_idx, parse_cifar_binary, parse_idx, save_container};
pub use longtail::{longtail_counts, longtail_subsample, LongTailSpec};
pub use synthetic::{palette, synthetic_shortcut_dataset, ShortcutSplit, CANVAS, GLYPH};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics of a raw `[n, c, h, w]` image tensor.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return dim_err(format!("expected [n, c, h, w] images, got {s:?}"));
        }
        let (mean, var) = crate::kernels::channel_stats(images.data(), s[0], s[1], s[2] * s[3]);
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&v| (v.sqrt() as f32).max(1e-6)).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn map(&self, batch: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return dim_err(format!("cannot normalize {s:?} with {} channels", self.channels()));
        }
        let spatial = s[2] * s[3];
        let mut out = batch.clone();
        out.zero_grad();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let c = i % s[1];
            chunk.iter_mut().for_each(|v| *v = f(*v, self.mean[c], self.std[c]));
        }
        Ok(out)
    }

    pub fn normalize(&self, batch: &Tensor) -> Result<Tensor> {
        self.map(batch, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, batch: &Tensor) -> Result<Tensor> {
        self.map(batch, |v, m, s| v * s + m)
    }
}

/// Raw `[0, 1]` images with labels and the normalization applied before
/// they reach a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, normalization: Normalization) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return dim_err(format!("dataset images must be [n, c, h, w], got {s:?}"));
        }
        if s[0] != labels.len() {
            return input_err(format!("{} images but {} labels", s[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return input_err(format!("label {bad} out of range for {num_classes} classes"));
        }
        if normalization.channels() != s[1] {
            return input_err("normalization channel count does not match images");
        }
        Ok(Self { images, labels, num_classes, normalization })
    }

    /// Dataset whose normalization is computed from its own images.
    pub fn with_own_normalization(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let norm = Normalization::from_images(&images)?;
        Self::new(images, labels, num_classes, norm)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self> {
        if normalization.channels() != self.image_shape()[0] {
            return input_err("normalization channel count does not match images");
        }
        self.normalization = normalization;
        Ok(self)
    }

    /// Replaces the raw images, keeping labels and normalization.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(images, self.labels.clone(), self.num_classes, self.normalization.clone())
    }

    /// Subset with the listed samples, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return input_err("empty subset");
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.images.gather(indices), labels, self.num_classes, self.normalization.clone())
    }

    /// Normalized image batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let raw = self.images.gather(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((self.normalization.normalize(&raw)?, labels))
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn dataset_validates_labels() {
        let imgs = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), vec![0, 3], 3, Normalization::identity(1)).is_err());
        assert!(Dataset::new(imgs.clone(), vec![0], 3, Normalization::identity(1)).is_err());
        let d = Dataset::new(imgs, vec![0, 2], 3, Normalization::identity(1)).unwrap();
        assert_eq!(d.class_counts(), vec![1, 0, 1]);
    }

    #[test]
    fn own_normalization_standardizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let imgs = Tensor::rand_uniform(&[8, 3, 4, 4], 0.0, 1.0, &mut rng);
        let d = Dataset::with_own_normalization(imgs, vec![0; 8], 2).unwrap();
        let (x, _) = d.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let (mean, var) = crate::kernels::channel_stats(x.data(), 8, 3, 16);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trips(values in proptest::collection::vec(0.0f32..1.0, 2 * 3 * 4),
                                 mean in proptest::collection::vec(0.0f32..1.0, 2),
                                 std in proptest::collection::vec(0.1f32..2.0, 2)) {
            let t = Tensor::new(&[3, 2, 2, 2], values).unwrap();
            let n = Normalization { mean, std };
            let back = n.denormalize(&n.normalize(&t).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
