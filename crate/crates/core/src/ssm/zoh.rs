//! Zero-order-hold discretization of a diagonal continuous-time SSM.
//!
//! For a state entry with continuous rate `a < 0` and step `delta > 0`:
//!
//! ```text
//! a_bar = exp(delta * a)
//! b_bar = (delta * a)^-1 (exp(delta * a) - 1) * delta * b
//! ```
//!
//! `b_bar` is `psi * b` with `psi = expm1(z) / z * delta`, `z = delta * a`.
//! Below `|z| < TAYLOR_CUTOFF` the ratio is replaced by `1 + z / 2`.

use crate::error::{Error, Result};

pub const TAYLOR_CUTOFF: f64 = 1e-6;

// Above this |z|, (exp(z) - 1) / z loses under 1e-15 relative to expm1.
const EXPM1_CUTOFF: f64 = 0.1;

/// How the input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// Exact ZOH for both `A` and `B`.
    #[default]
    Exact,
    /// Exact `A`, Euler `B_bar = delta * B` (the common Mamba shortcut).
    Simplified,
}

/// `(a_bar, psi)` for one entry; `b_bar = psi * b`.
#[inline]
pub fn zoh_coeffs(a: f64, delta: f64, mode: Discretization) -> (f64, f64) {
    let z = delta * a;
    let a_bar = z.exp();
    let psi = match mode {
        Discretization::Simplified => delta,
        Discretization::Exact if z.abs() < TAYLOR_CUTOFF => delta * (1.0 + 0.5 * z),
        Discretization::Exact if z.abs() < EXPM1_CUTOFF => z.exp_m1() / z * delta,
        Discretization::Exact => (a_bar - 1.0) / z * delta,
    };
    (a_bar, psi)
}

#[cfg(test)]
/// Partial derivatives `(d a_bar / d delta, d a_bar / d a, d psi / d delta, d psi / d a)`.
#[inline]
pub(crate) fn zoh_partials(a: f64, delta: f64, mode: Discretization) -> [f64; 4] {
    let (a_bar, psi) = zoh_coeffs(a, delta, mode);
    zoh_partials_from(a, delta, a_bar, psi, mode)
}

/// [`zoh_partials`] given the already computed `(a_bar, psi)`.
#[inline]
pub(crate) fn zoh_partials_from(a: f64, delta: f64, a_bar: f64, psi: f64, mode: Discretization) -> [f64; 4] {
    let z = delta * a;
    let (dpsi_ddelta, dpsi_da) = match mode {
        Discretization::Simplified => (1.0, 0.0),
        Discretization::Exact if z.abs() < TAYLOR_CUTOFF => (1.0 + z, 0.5 * delta * delta),
        Discretization::Exact => (a_bar, delta * delta * phi_prime(z, a_bar, psi / delta)),
    };
    [a * a_bar, delta * a_bar, dpsi_ddelta, dpsi_da]
}

/// Derivative of `phi(z) = expm1(z) / z`, i.e. `(e^z - phi(z)) / z`.
fn phi_prime(z: f64, e: f64, phi: f64) -> f64 {
    if z.abs() < 1e-2 {
        // sum_{m>=2} (m-1)/m! z^(m-2)
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        (e - phi) / z
    }
}

/// Elementwise discretization of parallel arrays `a`, `b`, `delta`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    zoh_discretize_with(a, b, delta, Discretization::Exact)
}

pub fn zoh_discretize_with(
    a: &[f64],
    b: &[f64],
    delta: &[f64],
    mode: Discretization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            left: vec![a.len(), b.len()],
            right: vec![delta.len()],
            context: "zoh_discretize",
        });
    }
    if let Some(&d) = delta.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDelta(d));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for ((&ai, &bi), &di) in a.iter().zip(b).zip(delta) {
        let (ab, psi) = zoh_coeffs(ai, di, mode);
        a_bar.push(ab);
        b_bar.push(psi * bi);
    }
    Ok((a_bar, b_bar))
}
