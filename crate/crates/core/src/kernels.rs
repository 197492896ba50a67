//! Raw slice kernels behind the differentiable ops.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible
//! across runs on the same machine.

/// Matrix operand layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the respective slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output spatial size, or `None` when the window does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.kernel_h == 0 || self.kernel_w == 0 || self.kernel_h > ph || self.kernel_w > pw {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

/// Expands one `[c, h, w]` image into a `[c*kh*kw, oh*ow]` patch matrix.
pub fn im2col(input: &[f32], win: &Window, cols: &mut [f32]) {
    let (oh, ow) = win.output_hw().expect("window fits");
    let spatial = oh * ow;
    debug_assert_eq!(cols.len(), win.patch_len() * spatial);
    let pad = win.padding as isize;
    for c in 0..win.channels {
        let plane = &input[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= win.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= win.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto a `[c, h, w]` image (adjoint of
/// [`im2col`]).
pub fn col2im(cols: &[f32], win: &Window, output: &mut [f32]) {
    let (oh, ow) = win.output_hw().expect("window fits");
    let spatial = oh * ow;
    let pad = win.padding as isize;
    for c in 0..win.channels {
        let plane = &mut output[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < win.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a `[b, c, h, w]` batch with `[o, c, kh, kw]` kernels.
pub fn conv2d_forward(input: &[f32], batch: usize, kernel: &[f32], out_ch: usize, win: &Window) -> Vec<f32> {
    let (oh, ow) = win.output_hw().expect("window fits");
    let spatial = oh * ow;
    let in_len = win.channels * win.height * win.width;
    let patch = win.patch_len();
    let mut cols = vec![0.0f32; patch * spatial];
    let mut out = vec![0.0f32; batch * out_ch * spatial];
    for b in 0..batch {
        im2col(&input[b * in_len..(b + 1) * in_len], win, &mut cols);
        let dst = &mut out[b * out_ch * spatial..(b + 1) * out_ch * spatial];
        gemm(out_ch, patch, spatial, kernel, Layout::Normal, &cols, Layout::Normal, dst, 0.0);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
///
/// Kernel gradients are accumulated sample by sample in batch order.
pub fn conv2d_backward(
    input: &[f32],
    batch: usize,
    kernel: &[f32],
    out_ch: usize,
    win: &Window,
    grad_out: &[f32],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (oh, ow) = win.output_hw().expect("window fits");
    let spatial = oh * ow;
    let in_len = win.channels * win.height * win.width;
    let patch = win.patch_len();
    let mut cols = vec![0.0f32; patch * spatial];
    let mut d_input = want_input.then(|| vec![0.0f32; batch * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![0.0f32; out_ch * patch]);
    for b in 0..batch {
        let dy = &grad_out[b * out_ch * spatial..(b + 1) * out_ch * spatial];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input[b * in_len..(b + 1) * in_len], win, &mut cols);
            gemm(out_ch, spatial, patch, dy, Layout::Normal, &cols, Layout::Transposed, dk, 1.0);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(patch, out_ch, spatial, kernel, Layout::Transposed, dy, Layout::Normal, &mut cols, 0.0);
            col2im(&cols, win, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (d_input, d_kernel)
}

/// Max pooling over `[b*c]` planes; returns the output and the flat input
/// index of each selected maximum (first maximum wins on ties).
pub fn max_pool_forward(input: &[f32], planes: usize, win: &Window) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = win.output_hw().expect("window fits");
    let plane_len = win.height * win.width;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let pad = win.padding as isize;
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..win.kernel_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    for kx in 0..win.kernel_w {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix < 0 || ix >= win.width as isize {
                            continue;
                        }
                        let idx = base + iy as usize * win.width + ix as usize;
                        if input[idx] > best || best_idx == usize::MAX {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Average pooling (padding counts toward the divisor).
pub fn avg_pool_forward(input: &[f32], planes: usize, win: &Window) -> Vec<f32> {
    let (oh, ow) = win.output_hw().expect("window fits");
    let plane_len = win.height * win.width;
    let norm = 1.0 / (win.kernel_h * win.kernel_w) as f32;
    let pad = win.padding as isize;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..win.kernel_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    for kx in 0..win.kernel_w {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < win.width as isize {
                            acc += input[base + iy as usize * win.width + ix as usize];
                        }
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &[f32], planes: usize, win: &Window) -> Vec<f32> {
    let (oh, ow) = win.output_hw().expect("window fits");
    let plane_len = win.height * win.width;
    let norm = 1.0 / (win.kernel_h * win.kernel_w) as f32;
    let pad = win.padding as isize;
    let mut dx = vec![0.0f32; planes * plane_len];
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(p * oh + oy) * ow + ox] * norm;
                for ky in 0..win.kernel_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    for kx in 0..win.kernel_w {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < win.width as isize {
                            dx[base + iy as usize * win.width + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics of a `[b, c, spatial]` tensor: mean and
/// biased variance, accumulated in `f64`.
pub fn channel_stats(input: &[f32], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += input[off..off + spatial].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            sq += input[off..off + spatial]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}
