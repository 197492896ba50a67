//! Random crop with zero padding and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const CROP_PADDING: usize = 4;

/// One draw of the augmentation: crop offset into the padded image and
/// whether to mirror it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { offset_y: CROP_PADDING, offset_x: CROP_PADDING, flip: false }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            offset_y: rng.random_range(0..=2 * CROP_PADDING),
            offset_x: rng.random_range(0..=2 * CROP_PADDING),
            flip: rng.random_bool(0.5),
        }
    }

    /// Applies the crop and flip to one `[c, h, w]` image.
    pub fn apply(&self, image: &[f32], channels: usize, height: usize, width: usize, out: &mut [f32]) {
        let pad = CROP_PADDING as isize;
        for c in 0..channels {
            let plane = &image[c * height * width..(c + 1) * height * width];
            let dst = &mut out[c * height * width..(c + 1) * height * width];
            for y in 0..height {
                let sy = y as isize + self.offset_y as isize - pad;
                for x in 0..width {
                    let tx = if self.flip { width - 1 - x } else { x };
                    let sx = tx as isize + self.offset_x as isize - pad;
                    dst[y * width + x] = if sy < 0 || sy >= height as isize || sx < 0 || sx >= width as isize {
                        0.0
                    } else {
                        plane[sy as usize * width + sx as usize]
                    };
                }
            }
        }
    }
}

/// Augments one square `[c, h, w]` image with parameters drawn from `seed`.
pub fn augment(image: &Tensor, seed: u64) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return dim_err(format!("augment expects [c, h, w], got {:?}", image.shape()));
    };
    if h != w {
        return dim_err(format!("augment expects a square image, got {h}x{w}"));
    }
    let params = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0.0; image.numel()];
    params.apply(image.data(), c, h, w, &mut out);
    Tensor::new(&[c, h, w], out)
}
