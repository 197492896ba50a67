//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

use std::fmt;

use crate::error::{dim_err, input_err, Error, Result};
use crate::kernels::{self, Layout, Window};
use crate::tensor::Tensor;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f32 = 1e-12;

/// Epsilon added to the variance in batch normalization.
pub const BN_EPS: f32 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom unary op: `(input, output, grad_output) -> grad_input`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[f32]) -> Vec<f32>>;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        win: Window,
        batch: usize,
        out_ch: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics were used (train mode) rather than fixed ones.
        batch_stats: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        win: Window,
        planes: usize,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    KlUniform {
        logits: Var,
        lambda: f32,
        probs: Vec<f32>,
        log_probs: Vec<f32>,
    },
    Custom {
        input: Var,
        backward: BackwardFn,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlUniform { .. } => "kl_uniform",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<&str> = self.nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Graph").field("ops", &ops).finish()
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => dim_err(format!("{what} expects a 4-d tensor, got {s:?}")),
    }
}

fn rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, n] => Ok((b, n)),
        ref s => dim_err(format!("{what} expects a 2-d tensor, got {s:?}")),
    }
}

/// Numerically stable log-softmax of one row, in `f64`.
fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&z| z as f64 - lse).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} produced NaN/Inf", op.name())));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are accumulated into it when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        // Gradients start from zero on every graph.
        tensor.zero_grad();
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows(self.value(a), "matmul lhs")?;
        let (k2, n) = rows(self.value(b), "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dimensions differ: {m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("add shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mul shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Scale(a, s), &[a])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.numel() != n {
            return dim_err(format!("bias of length {} for last axis {n}", tb.numel()));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data)?, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let mut t = t.reshape(shape)?;
        t.zero_grad();
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Flattens `[b, ...]` into `[b, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let b = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Cross-correlation of `input[b, c, h, w]` with `kernel[o, c, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.value(input), "conv2d input")?;
        let (o, kc, kh, kw) = nchw(self.value(kernel), "conv2d kernel")?;
        if kc != c {
            return dim_err(format!("conv2d kernel has {kc} input channels, input has {c}"));
        }
        let win = Window { channels: c, height: h, width: w, kernel_h: kh, kernel_w: kw, stride, padding };
        let Some((oh, ow)) = win.output_hw() else {
            return dim_err(format!(
                "conv2d kernel {kh}x{kw} stride {stride} padding {padding} does not fit {h}x{w}"
            ));
        };
        let out = kernels::conv2d_forward(self.value(input).data(), b, self.value(kernel).data(), o, &win);
        let op = Op::Conv2d { input, kernel, win, batch: b, out_ch: o };
        self.push(Tensor::new(&[b, o, oh, ow], out)?, op, &[input, kernel])
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// observed statistics so the caller can update running estimates.
    pub fn batchnorm2d_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (b, c, h, w) = nchw(self.value(input), "batchnorm2d input")?;
        self.check_affine(gamma, beta, c)?;
        let spatial = h * w;
        let (mean, var) = kernels::channel_stats(self.value(input).data(), b, c, spatial);
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32).collect();
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean32, &inv_std, b, c, spatial);
        let count = (b * spatial) as f64;
        let unbiased = var
            .iter()
            .map(|&v| if count > 1.0 { (v * count / (count - 1.0)) as f32 } else { v as f32 })
            .collect();
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats: true };
        let v = self.push(Tensor::new(&[b, c, h, w], out)?, op, &[input, gamma, beta])?;
        Ok((v, BatchStats { mean: mean32, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<Var> {
        let (b, c, h, w) = nchw(self.value(input), "batchnorm2d input")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return dim_err(format!("running stats do not have {c} channels"));
        }
        let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, running_mean, &inv_std, b, c, h * w);
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats: false };
        self.push(Tensor::new(&[b, c, h, w], out)?, op, &[input, gamma, beta])
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return dim_err(format!("batchnorm2d gamma/beta must have {c} entries"));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        b: usize,
        c: usize,
        spatial: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * spatial;
                for i in off..off + spatial {
                    let n = (x[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = n;
                    out[i] = g[ci] * n + be[ci];
                }
            }
        }
        (out, xhat)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.value(x), "max_pool2d input")?;
        let win = Window { channels: 1, height: h, width: w, kernel_h: kernel, kernel_w: kernel, stride, padding: 0 };
        let Some((oh, ow)) = win.output_hw() else {
            return dim_err(format!("max_pool2d window {kernel} does not fit {h}x{w}"));
        };
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), b * c, &win);
        self.push(Tensor::new(&[b, c, oh, ow], out)?, Op::MaxPool { input: x, argmax }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.value(x), "avg_pool2d input")?;
        let win = Window { channels: 1, height: h, width: w, kernel_h: kernel, kernel_w: kernel, stride, padding: 0 };
        let Some((oh, ow)) = win.output_hw() else {
            return dim_err(format!("avg_pool2d window {kernel} does not fit {h}x{w}"));
        };
        let out = kernels::avg_pool_forward(self.value(x).data(), b * c, &win);
        let op = Op::AvgPool { input: x, win, planes: b * c };
        self.push(Tensor::new(&[b, c, oh, ow], out)?, op, &[x])
    }

    /// Mean over the spatial axes: `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = nchw(self.value(x), "global_avg_pool input")?;
        let spatial = h * w;
        let inv = 1.0 / spatial as f32;
        let out = self.value(x).data().chunks(spatial).map(|p| p.iter().sum::<f32>() * inv).collect();
        self.push(Tensor::new(&[b, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = rows(t, "softmax")?;
        let data = softmax_rows(t.data(), n);
        self.push(Tensor::new(&[b, n], data)?, Op::Softmax(logits), &[logits])
    }

    /// Mean negative log-likelihood of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = rows(t, "cross_entropy")?;
        if labels.len() != b {
            return input_err(format!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return input_err(format!("label {bad} out of range for {n} classes"));
        }
        let mut probs = Vec::with_capacity(b * n);
        let mut total = 0.0f64;
        for (row, &label) in t.data().chunks(n).zip(labels) {
            let lp = log_softmax_row(row);
            total -= lp[label];
            probs.extend(lp.iter().map(|&v| v.exp() as f32));
        }
        let loss = (total / b as f64) as f32;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// `lambda` times the batch-mean KL divergence between the softmax of
    /// each row and the uniform distribution over its `N` classes.
    pub fn kl_uniform(&mut self, logits: Var, lambda: f32) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = rows(t, "kl_uniform")?;
        if n < 2 {
            return dim_err("kl_uniform needs at least two classes");
        }
        let (per_row, probs, log_probs) = kl_uniform_rows(t.data(), n);
        let mean = (per_row.iter().sum::<f64>() / b as f64) as f32;
        let op = Op::KlUniform { logits, lambda, probs, log_probs };
        self.push(Tensor::scalar(lambda * mean), op, &[logits])
    }

    /// Unary op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, input: Var, value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(value, Op::Custom { input, backward }, &[input])
    }

    /// Back-propagates from a scalar `loss`, adding gradients into every
    /// leaf that requires them. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("gradient of a leaf".into()));
                }
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, delta: Vec<f32>| match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Transposed, &mut da, 0.0);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), Layout::Transposed, g, Layout::Normal, &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let mut db = vec![0.0f32; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    send(*bias, db);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                send(*x, g.iter().zip(xs).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Conv2d { input, kernel, win, batch, out_ch } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    *batch,
                    self.value(*kernel).data(),
                    *out_ch,
                    win,
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.value(*input).shape();
                let (b, c) = (shape[0], shape[1]);
                let spatial = shape[2] * shape[3];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * spatial;
                        for j in off..off + spatial {
                            dbeta[ci] += g[j] as f64;
                            dgamma[ci] += (g[j] * xhat[j]) as f64;
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0f32; g.len()];
                    let m = (b * spatial) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let scale = gam[ci] * inv_std[ci];
                            for j in off..off + spatial {
                                dx[j] = if *batch_stats {
                                    let centered = g[j] as f64 - dbeta[ci] / m - xhat[j] as f64 * dgamma[ci] / m;
                                    (scale as f64 * centered) as f32
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                if wants(*gamma) {
                    send(*gamma, dgamma.iter().map(|&v| v as f32).collect());
                }
                if wants(*beta) {
                    send(*beta, dbeta.iter().map(|&v| v as f32).collect());
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                send(*input, dx);
            }
            Op::AvgPool { input, win, planes } => send(*input, kernels::avg_pool_backward(g, *planes, win)),
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let spatial = shape[2] * shape[3];
                let inv = 1.0 / spatial as f32;
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, spatial)).collect();
                send(*x, dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f32;
                let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * n + l] -= scale;
                }
                send(*logits, dx);
            }
            Op::KlUniform { logits, lambda, probs, log_probs } => {
                let n = self.value(*logits).shape()[1];
                let b = probs.len() / n;
                let scale = g[0] as f64 * *lambda as f64 / b as f64;
                let mut dx = Vec::with_capacity(probs.len());
                for (p, lp) in probs.chunks(n).zip(log_probs.chunks(n)) {
                    let mean_lp: f64 = p.iter().zip(lp).map(|(&p, &l)| p as f64 * l as f64).sum();
                    dx.extend(p.iter().zip(lp).map(|(&p, &l)| (scale * p as f64 * (l as f64 - mean_lp)) as f32));
                }
                send(*logits, dx);
            }
            Op::Custom { input, backward } => {
                send(*input, backward(self.value(*input), &node.value, g));
            }
        }
    }
}

/// Row-wise softmax of a flat `[b, n]` buffer.
pub fn softmax_rows(data: &[f32], n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// Per-row `KL(softmax(z) || uniform)` together with the probabilities and
/// floored log-probabilities used to compute it.
pub fn kl_uniform_rows(data: &[f32], n: usize) -> (Vec<f64>, Vec<f32>, Vec<f32>) {
    let ln_n = (n as f64).ln();
    let floor = (PROB_FLOOR as f64).ln();
    let mut per_row = Vec::with_capacity(data.len() / n);
    let mut probs = Vec::with_capacity(data.len());
    let mut log_probs = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let lp = log_softmax_row(row);
        let mut acc = ln_n;
        for &l in &lp {
            let p = l.exp();
            let lf = l.max(floor);
            acc += p * lf;
            probs.push(p as f32);
            log_probs.push(lf as f32);
        }
        per_row.push(acc.clamp(0.0, ln_n));
    }
    (per_row, probs, log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn stale_gradient_does_not_leak_into_graph() {
        let mut w = t(&[2], &[1.0, 2.0]);
        w.accumulate_grad(&[100.0, 100.0]);
        let mut g = Graph::new();
        let v = g.param(w);
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32));
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 7, 5]));
        let k = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 4, 3]);
        let big = g.constant(Tensor::zeros(&[4, 3, 9, 9]));
        assert!(matches!(g.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 7919) % 13) as f32 * 0.5 - 2.0));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g.batchnorm2d_train(x, gamma, beta).unwrap();
        assert_eq!(stats.mean.len(), 2);
        let (mean, var) = kernels::channel_stats(g.value(y).data(), 4, 2, 9);
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-4);
            assert!((var[c] - 1.0).abs() < 1e-4, "var {}", var[c]);
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32 * 0.1 - 1.0));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.batchnorm2d_eval(x, gamma, beta, &[0.0; 3], &[1.0; 3]).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() <= b.abs() * 1e-5 + 1e-7);
        }
    }

    #[test]
    fn batchnorm_constant_channel_batch_one_is_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 2, 2], 3.0));
        let gamma = g.param(Tensor::full(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let (y, _) = g.batchnorm2d_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(gamma).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_pool_and_add() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let p = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.max_pool2d(p, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        let a = g.avg_pool2d(p, 2, 2).unwrap();
        assert_eq!(g.value(a).data(), &[2.5]);

        let u = g.param(t(&[2], &[1.0, 2.0]));
        let v = g.param(t(&[2], &[3.0, 5.0]));
        let w = g.add(u, v).unwrap();
        let coef = g.constant(t(&[2], &[7.0, -3.0]));
        let z = g.mul(w, coef).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(u).unwrap(), &[7.0, -3.0]);
        assert_eq!(g.grad(v).unwrap(), &[7.0, -3.0]);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(u, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 4], &[0.0; 4]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.25; 4]);

        let z = g.constant(t(&[1, 2], &[1000.0, 1000.0]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let z = g.constant(t(&[1, 3], &[1f32.ln(), 2f32.ln(), 3f32.ln()]));
        let p = g.softmax(z).unwrap();
        for (got, want) in g.value(p).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 10]));
        let l = g.cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((g.value(l).data()[0] - std::f32::consts::LN_10).abs() < 1e-6);

        let mut row = vec![0.0; 10];
        row[2] = 50.0;
        let z = g.constant(t(&[1, 10], &row));
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);

        assert!(matches!(g.cross_entropy(z, &[10]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);

        assert!(matches!(g.backward(sq), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn kl_uniform_oracle_cases() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[2, 7]));
        let l = g.kl_uniform(z, 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|v| v.abs() <= 1e-7));

        let mut row = vec![0.0; 10];
        row[3] = 50.0;
        let z = g.constant(t(&[1, 10], &row));
        let l = g.kl_uniform(z, 1.0).unwrap();
        assert!((g.value(l).data()[0] - 10f32.ln()).abs() < 1e-4);

        // logits = ln p reproduce p exactly under softmax.
        let p = [0.4f32, 0.2, 0.2, 0.2];
        let z = g.constant(t(&[1, 4], &p.map(f32::ln)));
        let l = g.kl_uniform(z, 0.5).unwrap();
        assert!((g.value(l).data()[0] - 0.02706).abs() < 1e-5);
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f32::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}
