//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Deviation per parameter: the largest elementwise
    /// `|analytic - numeric|`, divided by the larger of the two gradients'
    /// max-norms.
    pub deviations: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_deviation() <= self.tolerance
    }

    /// Indices of parameters whose deviation exceeds the tolerance.
    pub fn flagged(&self) -> Vec<usize> {
        self.deviations
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > self.tolerance)
            .map(|(i, _)| i)
            .collect()
    }
}

fn eval_loss<F>(build: &F, params: &[Tensor]) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences with step `h`, for every element of every parameter.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return input_err(format!("finite-difference step must be positive, got {h}"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut deviations = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f32> = match g.grad(*var) {
            Some(grad) => grad.to_vec(),
            None => vec![0.0; params[pi].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..params[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval_loss(&build, &work)? as f64;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval_loss(&build, &work)? as f64;
            work[pi].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h as f64));
        }
        let scale = analytic
            .iter()
            .map(|&a| (a as f64).abs())
            .chain(numeric.iter().map(|n| n.abs()))
            .fold(0.0, f64::max);
        let max_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).abs())
            .fold(0.0, f64::max);
        deviations.push(if scale > 0.0 { max_err / scale } else { 0.0 });
    }
    Ok(GradCheckReport { deviations, tolerance })
}
