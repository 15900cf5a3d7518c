//! Selective scan kernels.
//!
//! Layout conventions for a batch of `rows = num_seqs * seq_len` tokens:
//! `u` and `delta` are `rows x d`, `A` is `d x n`, `B` and `C` are `rows x n`
//! and the optional skip vector has length `d`. Every `(sequence, channel,
//! state)` triple is an independent lane with recurrence
//! `h_t = a_bar_t * h_{t-1} + psi_t * B_t * u_t`, `h_0 = 0`, and the output
//! is `y_t = sum_n C_t[n] h_t[n] + skip * u_t`.

use super::zoh::{zoh_coeffs, zoh_partials_from, Discretization};
use crate::error::{Error, Result};
use crate::numeric::{macs, CustomOp, Graph, Tensor, Var};

/// Multiplies per `(token, channel, state)`: `delta*a`, `psi*B`, `*u`,
/// `a_bar*h`, `C*h`.
pub const SCAN_MACS_PER_STATE: usize = 5;

/// One step of the linear recurrence `h -> a * h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: ScanElement = ScanElement { a: 1.0, b: 0.0 };

    /// Applies `self` first, then `next`.
    #[inline]
    pub fn then(self, next: ScanElement) -> ScanElement {
        ScanElement {
            a: self.a * next.a,
            b: next.a * self.b + next.b,
        }
    }
}

/// Work-efficient (Blelloch) inclusive scan in place. The up-sweep and
/// down-sweep levels combine disjoint pairs, so each level is data
/// parallel; the combination order is fixed and results are reproducible.
pub fn blelloch_inclusive(elems: &mut [ScanElement]) {
    let n = elems.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree = Vec::with_capacity(size);
    tree.extend_from_slice(elems);
    tree.resize(size, ScanElement::IDENTITY);

    let mut stride = 1;
    while stride < size {
        for right in (2 * stride - 1..size).step_by(2 * stride) {
            tree[right] = tree[right - stride].then(tree[right]);
        }
        stride *= 2;
    }
    tree[size - 1] = ScanElement::IDENTITY;
    stride = size / 2;
    while stride >= 1 {
        for right in (2 * stride - 1..size).step_by(2 * stride) {
            let left = tree[right - stride];
            tree[right - stride] = tree[right];
            tree[right] = tree[right].then(left);
        }
        stride /= 2;
    }
    // tree now holds the exclusive scan.
    for (e, prefix) in elems.iter_mut().zip(&tree) {
        *e = prefix.then(*e);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub rows: usize,
    pub d: usize,
    pub n: usize,
    pub seq_len: usize,
}

impl ScanDims {
    fn num_seqs(&self) -> usize {
        self.rows / self.seq_len
    }
}

/// Raw inputs of a selective scan.
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: Option<&'a [f64]>,
}

/// Output `y` (`rows x d`) and every hidden state (`rows x d x n`).
pub struct ScanOutput {
    pub y: Vec<f64>,
    /// Hidden states, `rows x d x n`.
    pub h: Vec<f64>,
    /// Discretized decay per state, same layout as `h`.
    pub a_bar: Vec<f64>,
    /// `b_bar / b` per state, same layout as `h`.
    pub psi: Vec<f64>,
}

fn validate(inp: &ScanInputs, dims: ScanDims) -> Result<()> {
    let ScanDims { rows, d, n, seq_len } = dims;
    if rows == 0 || seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    if rows % seq_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "{rows} rows do not split into sequences of {seq_len}"
        )));
    }
    let checks = [
        ("u", inp.u.len(), rows * d),
        ("delta", inp.delta.len(), rows * d),
        ("A", inp.a.len(), d * n),
        ("B", inp.b.len(), rows * n),
        ("C", inp.c.len(), rows * n),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(Error::InvalidArgument(format!(
                "scan input {name} has {got} values, expected {want}"
            )));
        }
    }
    if let Some(s) = inp.skip {
        if s.len() != d {
            return Err(Error::InvalidArgument(format!("skip has {} values, expected {d}", s.len())));
        }
    }
    if let Some(&dl) = inp.delta.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveDelta(dl));
    }
    Ok(())
}

fn readout(inp: &ScanInputs, dims: ScanDims, h: &[f64]) -> Vec<f64> {
    let ScanDims { rows, d, n, .. } = dims;
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let c = &inp.c[r * n..(r + 1) * n];
        for i in 0..d {
            let hs = &h[(r * d + i) * n..(r * d + i + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                acc += c[k] * hs[k];
            }
            if let Some(s) = inp.skip {
                acc += s[i] * inp.u[r * d + i];
            }
            y[r * d + i] = acc;
        }
    }
    y
}

/// Reference recurrence, one step at a time.
pub fn scan_sequential(inp: &ScanInputs, dims: ScanDims, disc: Discretization) -> Result<ScanOutput> {
    validate(inp, dims)?;
    let ScanDims { rows, d, n, seq_len } = dims;
    let mut h = vec![0.0; rows * d * n];
    let mut a_bars = vec![0.0; rows * d * n];
    let mut psis = vec![0.0; rows * d * n];
    for s in 0..dims.num_seqs() {
        for t in 0..seq_len {
            let r = s * seq_len + t;
            for i in 0..d {
                let x = inp.u[r * d + i];
                let dl = inp.delta[r * d + i];
                for k in 0..n {
                    let (a_bar, psi) = zoh_coeffs(inp.a[i * n + k], dl, disc);
                    let hi = (r * d + i) * n + k;
                    let prev = if t == 0 { 0.0 } else { h[hi - d * n] };
                    h[hi] = a_bar * prev + psi * inp.b[r * n + k] * x;
                    a_bars[hi] = a_bar;
                    psis[hi] = psi;
                }
            }
        }
    }
    let y = readout(inp, dims, &h);
    Ok(ScanOutput { y, h, a_bar: a_bars, psi: psis })
}

/// Same result as [`scan_sequential`] computed with a Blelloch scan over
/// [`ScanElement`]s per lane.
pub fn scan_parallel(inp: &ScanInputs, dims: ScanDims, disc: Discretization) -> Result<ScanOutput> {
    validate(inp, dims)?;
    let ScanDims { rows, d, n, seq_len } = dims;
    let mut h = vec![0.0; rows * d * n];
    let mut a_bars = vec![0.0; rows * d * n];
    let mut psis = vec![0.0; rows * d * n];
    let mut lane = vec![ScanElement::IDENTITY; seq_len];
    for s in 0..dims.num_seqs() {
        for i in 0..d {
            for k in 0..n {
                for (t, e) in lane.iter_mut().enumerate() {
                    let r = s * seq_len + t;
                    let (a_bar, psi) = zoh_coeffs(inp.a[i * n + k], inp.delta[r * d + i], disc);
                    a_bars[(r * d + i) * n + k] = a_bar;
                    psis[(r * d + i) * n + k] = psi;
                    *e = ScanElement {
                        a: a_bar,
                        b: psi * inp.b[r * n + k] * inp.u[r * d + i],
                    };
                }
                blelloch_inclusive(&mut lane);
                for (t, e) in lane.iter().enumerate() {
                    h[((s * seq_len + t) * d + i) * n + k] = e.b;
                }
            }
        }
    }
    let y = readout(inp, dims, &h);
    Ok(ScanOutput { y, h, a_bar: a_bars, psi: psis })
}

pub fn scan(inp: &ScanInputs, dims: ScanDims, disc: Discretization, mode: ScanMode) -> Result<ScanOutput> {
    match mode {
        ScanMode::Sequential => scan_sequential(inp, dims, disc),
        ScanMode::Parallel => scan_parallel(inp, dims, disc),
    }
}

/// Gradients of a scan given `dy`, in input order `u, delta, A, B, C, skip`.
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Option<Vec<f64>>,
}

/// Reverse-time adjoint recurrence `g_t = C_t dy_t + a_bar_{t+1} g_{t+1}`.
pub fn scan_backward(
    inp: &ScanInputs,
    dims: ScanDims,
    disc: Discretization,
    fwd: &ScanOutput,
    dy: &[f64],
) -> ScanGrads {
    let h = &fwd.h;
    let ScanDims { rows, d, n, seq_len } = dims;
    let mut gu = vec![0.0; rows * d];
    let mut gdelta = vec![0.0; rows * d];
    let mut ga = vec![0.0; d * n];
    let mut gb = vec![0.0; rows * n];
    let mut gc = vec![0.0; rows * n];
    let mut gskip = inp.skip.map(|_| vec![0.0; d]);
    // Adjoint carried into step t from step t + 1, already multiplied by a_bar_{t+1}.
    let mut carry = vec![0.0; d * n];

    for s in 0..dims.num_seqs() {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..seq_len).rev() {
            let r = s * seq_len + t;
            for i in 0..d {
                let x = inp.u[r * d + i];
                let dl = inp.delta[r * d + i];
                let dyv = dy[r * d + i];
                if let (Some(gs), Some(sk)) = (gskip.as_mut(), inp.skip) {
                    gs[i] += dyv * x;
                    gu[r * d + i] += sk[i] * dyv;
                }
                for k in 0..n {
                    let hi = (r * d + i) * n + k;
                    let a = inp.a[i * n + k];
                    let bk = inp.b[r * n + k];
                    gc[r * n + k] += dyv * h[hi];
                    let g = inp.c[r * n + k] * dyv + carry[i * n + k];
                    let (a_bar, psi) = (fwd.a_bar[hi], fwd.psi[hi]);
                    let [dabar_ddelta, dabar_da, dpsi_ddelta, dpsi_da] =
                        zoh_partials_from(a, dl, a_bar, psi, disc);
                    let prev = if t == 0 { 0.0 } else { h[hi - d * n] };
                    let g_abar = g * prev;
                    let g_psi = g * bk * x;
                    gu[r * d + i] += g * psi * bk;
                    gb[r * n + k] += g * psi * x;
                    gdelta[r * d + i] += g_psi * dpsi_ddelta + g_abar * dabar_ddelta;
                    ga[i * n + k] += g_psi * dpsi_da + g_abar * dabar_da;
                    carry[i * n + k] = a_bar * g;
                }
            }
        }
    }
    ScanGrads {
        u: gu,
        delta: gdelta,
        a: ga,
        b: gb,
        c: gc,
        skip: gskip,
    }
}

struct ScanOp {
    dims: ScanDims,
    disc: Discretization,
    fwd: ScanOutput,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let inp = ScanInputs {
            u: inputs[0].data(),
            delta: inputs[1].data(),
            a: inputs[2].data(),
            b: inputs[3].data(),
            c: inputs[4].data(),
            skip: inputs.get(5).map(|t| t.data()),
        };
        let g = scan_backward(&inp, self.dims, self.disc, &self.fwd, grad_out);
        let mut out = vec![Some(g.u), Some(g.delta), Some(g.a), Some(g.b), Some(g.c)];
        if let Some(s) = g.skip {
            out.push(Some(s));
        }
        out.into_iter()
            .zip(needs)
            .map(|(g, &need)| if need { g } else { None })
            .collect()
    }
}

/// Tape op: selective scan over `u` with per-token `delta`, `B`, `C`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_op(
    g: &mut Graph,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    skip: Option<Var>,
    seq_len: usize,
    disc: Discretization,
    mode: ScanMode,
) -> Result<Var> {
    let us = g.shape(u).to_vec();
    let as_ = g.shape(a).to_vec();
    if us.len() != 2 || as_.len() != 2 || us[1] != as_[0] {
        return Err(Error::ShapeMismatch {
            left: us,
            right: as_,
            context: "selective_scan (u vs A)",
        });
    }
    let dims = ScanDims {
        rows: us[0],
        d: us[1],
        n: as_[1],
        seq_len,
    };
    let out = {
        let inp = ScanInputs {
            u: g.value(u).data(),
            delta: g.value(delta).data(),
            a: g.value(a).data(),
            b: g.value(b).data(),
            c: g.value(c).data(),
            skip: skip.map(|s| g.value(s).data()),
        };
        scan(&inp, dims, disc, mode)?
    };
    macs::charge(dims.rows * dims.d * (dims.n * SCAN_MACS_PER_STATE + usize::from(skip.is_some())));
    let mut out = out;
    let value = Tensor::new(&[dims.rows, dims.d], std::mem::take(&mut out.y))?;
    let mut inputs = vec![u, delta, a, b, c];
    inputs.extend(skip);
    Ok(g.custom(&inputs, value, Box::new(ScanOp { dims, disc, fwd: out })))
}
