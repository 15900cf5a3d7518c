//! Loop-level reference implementations used as test oracles. Nothing here
//! goes through the autodiff tape.
#![allow(dead_code)]

use hmba::numeric::Tensor;
use hmba::ssm::{BiMamba, MambaBlock, MambaConfig, ScanPath};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_cfg(d_model: usize) -> MambaConfig {
    let mut cfg = MambaConfig::new(d_model).with_state(4);
    cfg.dt_rank = 2;
    cfg.d_conv = 3;
    cfg
}

/// `x` as nested rows.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn from_rows(r: &[Vec<f64>]) -> Tensor {
    let cols = r[0].len();
    Tensor::new(&[r.len(), cols], r.concat()).unwrap()
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    (0..n)
        .map(|j| (0..k).map(|i| x[i] * w.data()[i * n + j]).sum())
        .collect()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// One direction's `scan(silu(conv(stream)))` for a single sequence.
pub fn naive_path(stream: &[Vec<f64>], path: &ScanPath) -> Vec<Vec<f64>> {
    let t_len = stream.len();
    let di = stream[0].len();
    let k = path.conv.shape()[1];
    let w = path.conv.data();
    let u: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            (0..di)
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let back = k - 1 - j;
                        if back <= t {
                            acc += w[i * k + j] * stream[t - back][i];
                        }
                    }
                    silu(acc)
                })
                .collect()
        })
        .collect();
    let p = &path.ssm;
    let n = p.a_log.shape()[1];
    let mut h = vec![vec![0.0; n]; di];
    let mut out = Vec::with_capacity(t_len);
    for ut in &u {
        let delta: Vec<f64> = matvec(&matvec(ut, &p.delta_down), &p.delta_up)
            .into_iter()
            .zip(p.delta_bias.data())
            .map(|(v, b)| softplus(v + b))
            .collect();
        let b = matvec(ut, &p.b_proj);
        let c = matvec(ut, &p.c_proj);
        let mut y = vec![0.0; di];
        for i in 0..di {
            for s in 0..n {
                let a = -p.a_log.data()[i * n + s].exp();
                let z = delta[i] * a;
                let bbar = (z.exp() - 1.0) / a * b[s];
                h[i][s] = z.exp() * h[i][s] + bbar * ut[i];
                y[i] += c[s] * h[i][s];
            }
            y[i] += p.skip.data()[i] * ut[i];
        }
        out.push(y);
    }
    out
}

/// Unit-RMS rows when the config asks for it.
pub fn naive_norm(x: &[Vec<f64>], cfg: &MambaConfig) -> Vec<Vec<f64>> {
    if !cfg.input_norm {
        return x.to_vec();
    }
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            r.iter().map(|v| v / (ms + hmba::ssm::block::NORM_EPS).sqrt()).collect()
        })
        .collect()
}

fn split_in(x: &[Vec<f64>], in_proj: &Tensor, di: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let xz: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, in_proj)).collect();
    (
        xz.iter().map(|r| r[..di].to_vec()).collect(),
        xz.iter().map(|r| r[di..].to_vec()).collect(),
    )
}

fn gate_out(y: &[Vec<f64>], gate: &[Vec<f64>], out_proj: &Tensor) -> Vec<Vec<f64>> {
    y.iter()
        .zip(gate)
        .map(|(yr, gr)| {
            let g: Vec<f64> = yr.iter().zip(gr).map(|(a, b)| a * silu(*b)).collect();
            matvec(&g, out_proj)
        })
        .collect()
}

pub fn naive_block(x: &[Vec<f64>], block: &MambaBlock) -> Vec<Vec<f64>> {
    let di = block.cfg.d_inner();
    let (stream, gate) = split_in(&naive_norm(x, &block.cfg), &block.in_proj, di);
    let y = naive_path(&stream, &block.path);
    gate_out(&y, &gate, &block.out_proj)
}

pub fn naive_bi(x: &[Vec<f64>], block: &BiMamba) -> Vec<Vec<f64>> {
    let di = block.cfg.d_inner();
    let (stream, gate) = split_in(&naive_norm(x, &block.cfg), &block.in_proj, di);
    let yf = naive_path(&stream, &block.fwd);
    let rev: Vec<Vec<f64>> = stream.iter().rev().cloned().collect();
    let mut yb = naive_path(&rev, &block.bwd);
    yb.reverse();
    let y: Vec<Vec<f64>> = yf
        .iter()
        .zip(&yb)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    gate_out(&y, &gate, &block.out_proj)
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Adds noise to every parameter and moves step-size biases to O(1), where
/// the `a_log` gradients sit far above finite-difference noise.
pub fn perturb_all(m: &mut dyn hmba::params::Module, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    m.visit_mut(&mut |name, t| {
        let bias = name.ends_with("delta_bias");
        for v in t.data_mut() {
            if bias {
                *v = 0.5;
            }
            *v += normal.sample(&mut r);
        }
    });
}
