//! Closed-form parameter and multiply-add counts.
//!
//! Counts follow the same convention as the instrumented graph ops:
//! matmul `m x k x n` costs `m k n`, elementwise products cost one per
//! output element, scaling and group means one per element, and the scan
//! `5 N + 1` per `(token, channel)`. Additions, exponentials, activations,
//! softmax and gathers are free. FLOPs are reported as twice the
//! multiply-adds.

use std::io::Write;

use crate::context::{Branch, ContextConfig, Granularity};
use crate::error::{Error, Result};
use crate::fusion::{AdapterKind, KvScope};
use crate::model::{BaseMode, ModelConfig};
use crate::ssm::block::MambaConfig;
use crate::ssm::scan::SCAN_MACS_PER_STATE;

/// Temporal modules compared in the cost table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostModule {
    TMamba,
    DstMamba,
    JstMamba,
    TemporalTransformer,
    Timesformer,
    JointAttention,
}

impl CostModule {
    pub const ALL: [CostModule; 6] = [
        CostModule::TMamba,
        CostModule::DstMamba,
        CostModule::JstMamba,
        CostModule::TemporalTransformer,
        CostModule::Timesformer,
        CostModule::JointAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostModule::TMamba => "t_mamba",
            CostModule::DstMamba => "dst_mamba",
            CostModule::JstMamba => "jst_mamba",
            CostModule::TemporalTransformer => "transformer",
            CostModule::Timesformer => "timesformer",
            CostModule::JointAttention => "joint_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown module `{s}`")))
    }
}

/// Input and block dimensions for a count.
#[derive(Clone, Debug, PartialEq)]
pub struct CostDims {
    pub batch: usize,
    pub t: usize,
    pub c: usize,
    pub mamba: MambaConfig,
    /// Rows of the learned temporal embedding in JST.
    pub t_max: usize,
    /// Layers in the divided space-time Transformer.
    pub depth: usize,
}

impl CostDims {
    pub fn new(t: usize, c: usize, d: usize) -> Self {
        Self {
            batch: 1,
            t,
            c,
            mamba: MambaConfig::new(d),
            t_max: t.max(8),
            depth: crate::baselines::TIMESFORMER_DEPTH,
        }
    }

    pub fn d(&self) -> usize {
        self.mamba.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mamba;
        let named = [
            ("batch", self.batch),
            ("t", self.t),
            ("c", self.c),
            ("d", m.d_model),
            ("d_state", m.d_state),
            ("d_conv", m.d_conv),
            ("expand", m.expand),
            ("dt_rank", m.dt_rank),
            ("depth", self.depth),
        ];
        if let Some((k, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("cost dims: `{k}` must be >= 1")));
        }
        if self.t > self.t_max {
            return Err(Error::Config(format!("t = {} exceeds t_max = {}", self.t, self.t_max)));
        }
        Ok(())
    }
}

/// Analytic cost of one module for a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub module: String,
    pub params: u64,
    /// Multiply-adds, summed over `breakdown`.
    pub macs: u64,
    pub breakdown: Vec<(String, u64)>,
}

impl FlopsReport {
    fn from_parts(module: &str, params: u64, breakdown: Vec<(String, u64)>) -> Self {
        Self {
            module: module.to_string(),
            params,
            macs: breakdown.iter().map(|(_, v)| v).sum(),
            breakdown,
        }
    }

    /// Two FLOPs per multiply-add.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Widens before multiplying, so counts stay exact on 32-bit targets.
fn u(v: usize) -> u64 {
    v as u64
}

/// Conv plus scan parameters of one direction.
pub fn scan_path_params(m: &MambaConfig) -> u64 {
    let di = m.d_inner();
    u(di) * u(m.d_conv + 3 * m.d_state + 2 * m.dt_rank + 2)
}

/// Bidirectional block with shared projections.
pub fn bi_mamba_params(m: &MambaConfig) -> u64 {
    let (d, di) = (m.d_model, m.d_inner());
    3 * u(d) * u(di) + 2 * scan_path_params(m)
}

pub fn mamba_block_params(m: &MambaConfig) -> u64 {
    let (d, di) = (m.d_model, m.d_inner());
    3 * u(d) * u(di) + scan_path_params(m)
}

fn scan_path_macs(m: &MambaConfig, rows: usize) -> u64 {
    let di = m.d_inner();
    u(rows) * u(di) * u(m.d_conv + 2 * m.dt_rank + 2 * m.d_state + SCAN_MACS_PER_STATE * m.d_state + 1)
}

/// Square and rescale per input element.
fn norm_macs(m: &MambaConfig, rows: usize) -> u64 {
    if m.input_norm {
        2 * u(rows) * u(m.d_model)
    } else {
        0
    }
}

/// Multiply-adds of a Bi-Mamba pass over `rows` tokens.
pub fn bi_mamba_macs(m: &MambaConfig, rows: usize) -> u64 {
    let (d, di) = (m.d_model, m.d_inner());
    norm_macs(m, rows) + u(rows) * (3 * u(d) * u(di) + u(di)) + 2 * scan_path_macs(m, rows)
}

pub fn mamba_block_macs(m: &MambaConfig, rows: usize) -> u64 {
    let (d, di) = (m.d_model, m.d_inner());
    norm_macs(m, rows) + u(rows) * (3 * u(d) * u(di) + u(di)) + scan_path_macs(m, rows)
}

/// Single-head attention over `seqs` sequences of `len` tokens.
pub fn attention_macs(d: usize, seqs: usize, len: usize) -> u64 {
    u(seqs) * (4 * u(len) * u(d) * u(d) + 2 * u(len) * u(len) * u(d))
}

pub fn ffn_macs(d: usize, rows: usize) -> u64 {
    2 * u(rows) * u(d) * u(crate::baselines::FFN_MULT) * u(d)
}

pub fn count_params(module: CostModule, dims: &CostDims) -> Result<u64> {
    Ok(count_flops(module, dims)?.params)
}

pub fn count_flops(module: CostModule, dims: &CostDims) -> Result<FlopsReport> {
    dims.validate()?;
    let m = &dims.mamba;
    let (b, t, c, d) = (dims.batch, dims.t, dims.c, m.d_model);
    let attn_p = 4 * u(d) * u(d);
    let ffn_p = 2 * u(crate::baselines::FFN_MULT) * u(d) * u(d);
    let s = |k: &str| k.to_string();
    let (params, parts) = match module {
        CostModule::TMamba => (
            bi_mamba_params(m),
            vec![(s("pool"), u(b) * u(t) * u(d)), (s("bi_mamba"), bi_mamba_macs(m, b * t))],
        ),
        CostModule::DstMamba => (
            2 * bi_mamba_params(m),
            vec![
                (s("temporal_bi_mamba"), bi_mamba_macs(m, b * c * t)),
                (s("spatial_bi_mamba"), bi_mamba_macs(m, b * c)),
            ],
        ),
        CostModule::JstMamba => (
            bi_mamba_params(m) + u(dims.t_max) * u(d),
            vec![(s("bi_mamba"), bi_mamba_macs(m, b * t * c))],
        ),
        CostModule::TemporalTransformer => (
            attn_p + ffn_p,
            vec![
                (s("pool"), u(b) * u(t) * u(d)),
                (s("attention"), attention_macs(d, b, t)),
                (s("ffn"), ffn_macs(d, b * t)),
            ],
        ),
        CostModule::Timesformer => {
            let l = u(dims.depth);
            (
                l * (2 * attn_p + ffn_p),
                vec![
                    (s("temporal_attention"), l * attention_macs(d, b * c, t)),
                    (s("spatial_attention"), l * attention_macs(d, b * t, c)),
                    (s("ffn"), l * ffn_macs(d, b * t * c)),
                ],
            )
        }
        CostModule::JointAttention => (attn_p, vec![(s("attention"), attention_macs(d, b, t * c))]),
    };
    Ok(FlopsReport::from_parts(module.name(), params, parts))
}

/// Adapter over `n` context maps of `rows x D`, `c` channels per map.
pub fn adapter_report(
    kind: AdapterKind,
    n: usize,
    kv_scope: KvScope,
    m: &MambaConfig,
    rows: usize,
    c: usize,
) -> Result<FlopsReport> {
    if n == 0 || rows == 0 || c == 0 || !rows.is_multiple_of(c) {
        return Err(Error::Config(format!("adapter dims n={n} rows={rows} c={c}")));
    }
    let d = m.d_model;
    let dd = u(d) * u(d);
    let r = u(rows);
    let n64 = u(n);
    let s = |k: &str| k.to_string();
    let (params, parts) = match kind {
        AdapterKind::Da => (n64, vec![(s("weighted_sum"), n64 * r * u(d))]),
        AdapterKind::Ic => (n64 * dd, vec![(s("fc"), n64 * r * dd)]),
        AdapterKind::QMamba => {
            let mut parts = vec![
                (s("query"), r * dd),
                (s("values"), n64 * r * dd),
                (s("outputs"), n64 * r * dd),
            ];
            if kv_scope == KvScope::AllChannels {
                let seqs = u(rows / c);
                parts.push((s("keys"), n64 * r * dd));
                parts.push((s("scores"), n64 * seqs * (2 * u(c) * u(c) * u(d) + u(c) * u(c))));
            }
            parts.push((s("latent"), n64 * bi_mamba_macs(m, rows)));
            parts.push((s("gate"), r * dd));
            ((2 + 3 * n64) * dd + bi_mamba_params(m), parts)
        }
    };
    Ok(FlopsReport::from_parts(kind.name(), params, parts))
}

fn context_report(cfg: &ContextConfig, batch: usize, c: usize) -> Result<Vec<(String, u64, u64)>> {
    let mut out = Vec::new();
    for (branch, gran) in cfg.pairs() {
        let t = match branch {
            Branch::High => cfg.frames,
            Branch::Low => crate::context::resample_indices(cfg.frames, cfg.frames - 1, cfg.low_stride)?.len(),
        };
        let module = match gran {
            Granularity::T => CostModule::TMamba,
            Granularity::Dst => CostModule::DstMamba,
            Granularity::Jst => CostModule::JstMamba,
        };
        let dims = CostDims {
            batch,
            t,
            c,
            mamba: cfg.mamba(),
            t_max: cfg.t_max,
            depth: 1,
        };
        let rep = count_flops(module, &dims)?;
        out.push((format!("{}.{}", branch.name(), gran.name()), rep.params, rep.macs));
    }
    Ok(out)
}

/// Full model logits pass for `batch` clips whose current frame is the
/// last one.
pub fn model_report(cfg: &ModelConfig, batch: usize) -> Result<FlopsReport> {
    let ctx = &cfg.context;
    let (c, d) = (cfg.channels, ctx.d_model);
    if batch == 0 || c == 0 || d == 0 || ctx.frames == 0 {
        return Err(Error::Config("model cost dims must be >= 1".into()));
    }
    let rows = batch * c;
    let mut params = u(d);
    let mut parts = Vec::new();
    if cfg.mode == BaseMode::PooledFrames {
        parts.push(("base".to_string(), u(rows) * u(d)));
    }
    if !cfg.frame_only() {
        let contexts = context_report(ctx, batch, c)?;
        let n = contexts.len();
        for (label, p, macs) in contexts {
            params += p;
            parts.push((label, macs));
        }
        let a = adapter_report(cfg.adapter, n, cfg.kv_scope, &ctx.mamba(), rows, c)?;
        params += a.params;
        parts.push(("adapter".to_string(), a.macs));
    }
    parts.push(("head".to_string(), u(rows) * u(d)));
    Ok(FlopsReport::from_parts("hmba", params, parts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub module: String,
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub params: u64,
    pub flops: u64,
}

/// Costs of every module at every frame count, `base` supplying the rest.
pub fn sweep(modules: &[CostModule], ts: &[usize], base: &CostDims) -> Result<Vec<SweepRow>> {
    if modules.is_empty() || ts.is_empty() {
        return Err(Error::Config("sweep needs at least one module and one length".into()));
    }
    let mut rows = Vec::with_capacity(modules.len() * ts.len());
    for &module in modules {
        for &t in ts {
            let dims = CostDims {
                t,
                t_max: base.t_max.max(t),
                ..base.clone()
            };
            let rep = count_flops(module, &dims)?;
            rows.push(SweepRow {
                module: module.name().to_string(),
                t,
                c: dims.c,
                d: dims.d(),
                params: rep.params,
                flops: rep.flops(),
            });
        }
    }
    Ok(rows)
}

/// `flops` counts two operations per multiply-add.
pub const CSV_HEADER: &str = "module,t,c,d,params,flops";

pub fn write_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.module, r.t, r.c, r.d, r.params, r.flops)?;
    }
    Ok(())
}

fn r_squared(ys: &[f64], fitted: impl Iterator<Item = f64>) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(fitted).map(|(y, f)| (y - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Least-squares `y = a x`; returns `(a, R^2)`.
pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let a = sxy / sxx;
    (a, r_squared(ys, xs.iter().map(|x| a * x)))
}

/// Least-squares `y = c0 + c1 x + c2 x^2`; returns the coefficients and
/// `R^2`.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> ([f64; 3], f64) {
    let mut m = [[0.0; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let p = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += p[i] * p[j];
            }
            m[i][3] += p[i] * y;
        }
    }
    // Gauss-Jordan with partial pivoting on the 3x3 normal equations
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        if p == 0.0 {
            return ([f64::NAN; 3], f64::NAN);
        }
        for k in col..4 {
            m[col][k] /= p;
        }
        for row in 0..3 {
            if row != col {
                let f = m[row][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let coef = [m[0][3], m[1][3], m[2][3]];
    let fitted = xs.iter().map(|x| coef[0] + coef[1] * x + coef[2] * x * x);
    (coef, r_squared(ys, fitted))
}
