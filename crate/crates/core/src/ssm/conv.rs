//! Depthwise causal 1-D convolution along the sequence axis.
//!
//! `y[t, i] = sum_j w[i, j] * x[t - (k - 1) + j, i]`, positions before the
//! start of a sequence read as zero. Tap `k - 1` multiplies the current
//! token.

use crate::error::{Error, Result};
use crate::numeric::{macs, CustomOp, Graph, Tensor, Var};

fn conv_forward(x: &[f64], w: &[f64], rows: usize, d: usize, k: usize, seq_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let t = r % seq_len;
        for j in 0..k {
            // source offset back in time
            let back = k - 1 - j;
            if back > t {
                continue;
            }
            let src = (r - back) * d;
            for i in 0..d {
                y[r * d + i] += w[i * k + j] * x[src + i];
            }
        }
    }
    y
}

struct ConvOp {
    rows: usize,
    d: usize,
    k: usize,
    seq_len: usize,
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        gy: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let Self { rows, d, k, seq_len } = *self;
        let mut gx = vec![0.0; rows * d];
        let mut gw = vec![0.0; d * k];
        for r in 0..rows {
            let t = r % seq_len;
            for j in 0..k {
                let back = k - 1 - j;
                if back > t {
                    continue;
                }
                let src = (r - back) * d;
                for i in 0..d {
                    let g = gy[r * d + i];
                    gx[src + i] += w[i * k + j] * g;
                    gw[i * k + j] += x[src + i] * g;
                }
            }
        }
        vec![needs[0].then_some(gx), needs[1].then_some(gw)]
    }
}

/// `x`: `rows x d` with `rows = num_seqs * seq_len`; `w`: `d x k`.
pub fn causal_conv_op(g: &mut Graph, x: Var, w: Var, seq_len: usize) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::ShapeMismatch {
            left: xs,
            right: ws,
            context: "causal_conv",
        });
    }
    if seq_len == 0 || !xs[0].is_multiple_of(seq_len) {
        return Err(Error::InvalidArgument(format!(
            "{} rows do not split into sequences of {seq_len}",
            xs[0]
        )));
    }
    let (rows, d, k) = (xs[0], xs[1], ws[1]);
    let y = conv_forward(g.value(x).data(), g.value(w).data(), rows, d, k, seq_len);
    macs::charge(rows * d * k);
    let value = Tensor::new(&[rows, d], y)?;
    Ok(g.custom(&[x, w], value, Box::new(ConvOp { rows, d, k, seq_len })))
}
