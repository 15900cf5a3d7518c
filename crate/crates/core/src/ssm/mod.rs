//! Selective state space kernels and Mamba blocks.

pub mod block;
pub mod conv;
pub mod scan;
pub mod zoh;

pub use block::{bi_mamba, reverse_index, BiMamba, MambaBlock, MambaConfig, ScanPath, SsmParams};
pub use scan::{
    blelloch_inclusive, scan_parallel, scan_sequential, selective_scan_op, ScanDims, ScanElement,
    ScanInputs, ScanMode, ScanOutput,
};
pub use zoh::{zoh_discretize, zoh_discretize_with, Discretization};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn project(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k, n) = (x.rows(), x.cols(), w.shape()[1]);
    Tensor::new(&[m, n], crate::numeric::graph::matmul_raw(x.data(), w.data(), m, k, n)).unwrap()
}

/// Per-token selection for a raw input sequence `x` (`T x d_inner`):
/// returns `(delta, B, C)` with `delta = softplus(x W_down W_up + bias)`.
pub fn selection(x: &Tensor, params: &SsmParams) -> Result<(Tensor, Tensor, Tensor)> {
    let di = params.a_log.shape()[0];
    if x.shape().len() != 2 || x.cols() != di {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: params.a_log.shape().to_vec(),
            context: "selection input vs A",
        });
    }
    let raw = project(&project(x, &params.delta_down), &params.delta_up);
    let delta_data = raw
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let v = v + params.delta_bias.data()[k % di];
            crate::numeric::graph::scalar_fn(crate::numeric::ElementwiseOp::Softplus, v)
        })
        .collect();
    let delta = Tensor::new(raw.shape(), delta_data)?;
    Ok((delta, project(x, &params.b_proj), project(x, &params.c_proj)))
}

fn run(x: &Tensor, params: &SsmParams, disc: Discretization, mode: ScanMode) -> Result<Tensor> {
    if x.shape().first() == Some(&0) || x.numel() == 0 {
        return Err(Error::EmptySequence);
    }
    let (delta, b, c) = selection(x, params)?;
    let a = params.a_matrix();
    let dims = ScanDims {
        rows: x.rows(),
        d: x.cols(),
        n: a.shape()[1],
        seq_len: x.rows(),
    };
    let inp = ScanInputs {
        u: x.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        skip: Some(params.skip.data()),
    };
    let out = scan::scan(&inp, dims, disc, mode)?;
    Tensor::new(&[dims.rows, dims.d], out.y)
}

/// S6 scan over one sequence with the recurrence evaluated step by step.
pub fn selective_scan_seq(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    run(x, params, Discretization::Exact, ScanMode::Sequential)
}

/// S6 scan over one sequence via the associative (Blelloch) scan.
pub fn selective_scan_parallel(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    run(x, params, Discretization::Exact, ScanMode::Parallel)
}
