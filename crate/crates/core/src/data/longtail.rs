//! Exponentially imbalanced subsampling of a class-balanced dataset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{input_err, Result};
use crate::seed::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    /// Ratio between the largest and smallest class sizes.
    pub rho: f64,
    /// Kept samples per class, non-increasing in the class index.
    pub counts: Vec<usize>,
}

/// `n_k = round(n_max * rho^(-k / (K - 1)))` for `k` in `0..classes`.
pub fn longtail_counts(n_max: usize, classes: usize, rho: f64) -> Result<Vec<usize>> {
    if !(rho >= 1.0) {
        return input_err(format!("imbalance ratio must be at least 1, got {rho}"));
    }
    if classes == 0 {
        return input_err("no classes");
    }
    if rho > n_max as f64 {
        return input_err(format!("imbalance ratio {rho} exceeds the per-class count {n_max}"));
    }
    if classes == 1 {
        if rho != 1.0 {
            return input_err("a single class requires rho = 1");
        }
        return Ok(vec![n_max]);
    }
    Ok((0..classes)
        .map(|k| (n_max as f64 * rho.powf(-(k as f64) / (classes - 1) as f64)).round() as usize)
        .collect())
}

/// Keeps `n_k` uniformly chosen samples of class `k`.
pub fn longtail_subsample(dataset: &Dataset, rho: f64, seed: u64) -> Result<(Dataset, LongTailSpec)> {
    let counts_in = dataset.class_counts();
    let n_max = counts_in[0];
    if counts_in.iter().any(|&c| c != n_max) {
        return input_err(format!("long-tail construction needs a class-balanced dataset, got counts {counts_in:?}"));
    }
    let counts = longtail_counts(n_max, dataset.num_classes(), rho)?;
    let mut rng = stream(seed, Stream::Data);
    let mut keep = Vec::new();
    for (k, &n_k) in counts.iter().enumerate() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels()[i] == k).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_k);
        idx.sort_unstable();
        keep.extend(idx);
    }
    keep.sort_unstable();
    Ok((dataset.subset(&keep)?, LongTailSpec { rho, counts }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn balanced(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let x = Tensor::from_fn(&[n, 1, 2, 2], |i| (i % 7) as f32 / 7.0);
        Dataset::with_own_normalization(x, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn formula_cases() {
        assert_eq!(longtail_counts(100, 2, 100.0).unwrap(), vec![100, 1]);
        let c = longtail_counts(500, 10, 100.0).unwrap();
        assert_eq!(c[9], 5);
        assert!(c.windows(2).all(|w| w[0] > w[1]), "{c:?}");
        assert_eq!(longtail_counts(7, 1, 1.0).unwrap(), vec![7]);
        assert!(longtail_counts(7, 1, 2.0).is_err());
        assert!(longtail_counts(50, 10, 51.0).is_err());
        assert!(longtail_counts(50, 10, 0.5).is_err());
    }

    #[test]
    fn rho_one_keeps_everything() {
        let d = balanced(4, 6);
        let (lt, spec) = longtail_subsample(&d, 1.0, 3).unwrap();
        assert_eq!(spec.counts, vec![6; 4]);
        assert_eq!(lt, d);
    }

    #[test]
    fn subsample_matches_counts() {
        let d = balanced(5, 40);
        let (lt, spec) = longtail_subsample(&d, 10.0, 3).unwrap();
        assert_eq!(lt.class_counts(), spec.counts);
        assert_eq!(spec.counts[0], 40);
        assert_eq!(spec.counts[4], 4);
        assert!(longtail_subsample(&d.subset(&[0, 1, 2, 3, 4, 5]).unwrap(), 2.0, 0).is_err());
    }
}
