//! Central-difference gradient oracle.
//!
//! The error measure for one coordinate is
//! `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)` and the checks
//! return the maximum over all probed coordinates.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::Module;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the tape gradient of `f` at `x` against central differences
/// with the given step.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-tensor outcome of [`check_module`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the probed coordinates.
    pub max_abs_grad: f64,
    /// Largest absolute gap between analytic and numeric gradients.
    pub max_abs_err: f64,
    pub probed: usize,
}

/// Which coordinates of each tensor [`check_module_with`] probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// Up to `k` coordinates spread evenly across the tensor.
    Spread(usize),
    /// The `k` coordinates with the largest analytic gradient. Useful for
    /// deep models where many coordinates carry gradients below what a
    /// central difference can resolve.
    Largest(usize),
}

impl Probe {
    fn pick(self, grad: &[f64]) -> Vec<usize> {
        let n = grad.len();
        match self {
            Probe::Spread(k) => {
                let stride = n.div_ceil(k.max(1)).max(1);
                (0..n).step_by(stride).collect()
            }
            Probe::Largest(k) => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
                idx.truncate(k.max(1));
                idx
            }
        }
    }
}

/// Finite-difference check of `loss` with respect to every trainable
/// tensor of `module`. At most `max_coords` coordinates per tensor are
/// probed, spread evenly across the tensor.
pub fn check_module<M, F>(
    module: &mut M,
    loss: F,
    step: f64,
    max_coords: usize,
) -> Result<Vec<ParamCheck>>
where
    M: Module,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    check_module_with(module, loss, step, Probe::Spread(max_coords))
}

/// [`check_module`] with an explicit probe policy.
pub fn check_module_with<M, F>(
    module: &mut M,
    loss: F,
    step: f64,
    probe: Probe,
) -> Result<Vec<ParamCheck>>
where
    M: Module,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(module, &mut g)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    module.visit(&mut |name, t| {
        if t.requires_grad {
            let grad = g.param_grad(t).unwrap_or_else(|| Tensor::zeros(t.shape()));
            analytic.push((name.to_string(), grad));
        }
    });
    drop(g);

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(m, &mut g)?;
        scalar_of(&g, out)
    };

    let mut report = Vec::with_capacity(analytic.len());
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        let mut max_abs_err: f64 = 0.0;
        let mut probed = 0;
        for i in probe.pick(grad.data()) {
            let nudge = |m: &mut M, delta: f64| {
                let mut seen = 0;
                m.visit_mut(&mut |_, t| {
                    if t.requires_grad {
                        if seen == k {
                            t.data_mut()[i] += delta;
                        }
                        seen += 1;
                    }
                });
            };
            nudge(module, step);
            let up = eval(module);
            nudge(module, -2.0 * step);
            let down = eval(module);
            nudge(module, step);
            let numeric = (up? - down?) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            max_abs_grad = max_abs_grad.max(grad.data()[i].abs());
            max_abs_err = max_abs_err.max((grad.data()[i] - numeric).abs());
            probed += 1;
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            max_abs_grad,
            max_abs_err,
            probed,
        });
    }
    Ok(report)
}

pub fn worst(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[4], vec![0.1, -2.0, 3.5, 7.0]).unwrap();
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, DEFAULT_STEP).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::zeros(&[1]);
        let err = finite_diff_check(
            |g, x| {
                let e = g.exp(x);
                Ok(g.sum(e))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::zeros(&[3]);
        let r = finite_diff_check(|_, x| Ok(x), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }
}
