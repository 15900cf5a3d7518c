use rand::Rng;

use super::conv::causal_conv_op;
use super::scan::{selective_scan_op, ScanMode};
use super::zoh::Discretization;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{visit_child, visit_child_mut, Module};

/// Dimensions and numerics of a Mamba block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    /// State size `N` per channel.
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Rank of the factored `d_inner -> d_inner` step-size projection.
    pub dt_rank: usize,
    pub discretization: Discretization,
    pub scan_mode: ScanMode,
    /// Rescale every input token to unit RMS before the projections.
    pub input_norm: bool,
}

pub const NORM_EPS: f64 = 1e-6;

/// Initial step-size range.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 0.1;

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dt_rank: d_model.div_ceil(16),
            discretization: Discretization::Exact,
            scan_mode: ScanMode::Sequential,
            input_norm: true,
        }
    }

    pub fn with_state(mut self, d_state: usize) -> Self {
        self.d_state = d_state;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
            ("dt_rank", self.dt_rank),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Selection parameters of one scan: `A = -exp(a_log)` (`d_inner x N`),
/// the factored step-size projection, the `B`/`C` projections and the
/// skip vector.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: Tensor,
    pub delta_down: Tensor,
    pub delta_up: Tensor,
    /// Added before the softplus; sets the initial step-size range.
    pub delta_bias: Tensor,
    pub b_proj: Tensor,
    pub c_proj: Tensor,
    pub skip: Tensor,
}

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (di, n, r) = (cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        // A[i, n] = -(n + 1)
        let a_log: Vec<f64> = (0..di).flat_map(|_| (0..n).map(|k| ((k + 1) as f64).ln())).collect();
        // step sizes log-uniform in [DT_MIN, DT_MAX], stored through the
        // inverse softplus
        let delta_bias: Vec<f64> = (0..di)
            .map(|_| {
                let dt = (rng.random::<f64>() * (DT_MAX.ln() - DT_MIN.ln()) + DT_MIN.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        Self {
            a_log: Tensor::new(&[di, n], a_log).unwrap().into_param(),
            delta_down: Tensor::randn(&[di, r], (di as f64).powf(-0.5), rng).into_param(),
            delta_up: Tensor::randn(&[r, di], (r as f64).powf(-0.5), rng).into_param(),
            delta_bias: Tensor::new(&[di], delta_bias).unwrap().into_param(),
            b_proj: Tensor::randn(&[di, n], (di as f64).powf(-0.5), rng).into_param(),
            c_proj: Tensor::randn(&[di, n], (di as f64).powf(-0.5), rng).into_param(),
            skip: Tensor::filled(&[di], 1.0).into_param(),
        }
    }

    /// The continuous-time state matrix; every entry is negative.
    pub fn a_matrix(&self) -> Tensor {
        let data = self.a_log.data().iter().map(|v| -v.exp()).collect();
        Tensor::new(self.a_log.shape(), data).unwrap()
    }
}

impl Module for SsmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("a_log", &self.a_log);
        f("delta_down", &self.delta_down);
        f("delta_up", &self.delta_up);
        f("delta_bias", &self.delta_bias);
        f("b_proj", &self.b_proj);
        f("c_proj", &self.c_proj);
        f("skip", &self.skip);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("a_log", &mut self.a_log);
        f("delta_down", &mut self.delta_down);
        f("delta_up", &mut self.delta_up);
        f("delta_bias", &mut self.delta_bias);
        f("b_proj", &mut self.b_proj);
        f("c_proj", &mut self.c_proj);
        f("skip", &mut self.skip);
    }
}

/// Causal conv followed by the selective scan: the direction-specific part
/// of a block.
#[derive(Clone, Debug)]
pub struct ScanPath {
    pub conv: Tensor,
    pub ssm: SsmParams,
}

impl ScanPath {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        Self {
            conv: Tensor::randn(&[cfg.d_inner(), cfg.d_conv], (cfg.d_conv as f64).powf(-0.5), rng)
                .into_param(),
            ssm: SsmParams::init(cfg, rng),
        }
    }

    /// `scan(silu(conv(stream)))` for `stream` of shape `rows x d_inner`.
    pub fn forward(&self, g: &mut Graph, stream: Var, seq_len: usize, cfg: &MambaConfig) -> Result<Var> {
        let w = g.param(&self.conv);
        let c = causal_conv_op(g, stream, w, seq_len)?;
        let u = g.silu(c);
        let down = g.param(&self.ssm.delta_down);
        let up = g.param(&self.ssm.delta_up);
        let low = g.matmul(u, down)?;
        let raw = g.matmul(low, up)?;
        let bias = g.param(&self.ssm.delta_bias);
        let raw = g.add(raw, bias)?;
        let delta = g.softplus(raw);
        let bp = g.param(&self.ssm.b_proj);
        let cp = g.param(&self.ssm.c_proj);
        let b = g.matmul(u, bp)?;
        let c = g.matmul(u, cp)?;
        let a_log = g.param(&self.ssm.a_log);
        let e = g.exp(a_log);
        let a = g.neg(e);
        let skip = g.param(&self.ssm.skip);
        selective_scan_op(
            g,
            u,
            delta,
            a,
            b,
            c,
            Some(skip),
            seq_len,
            cfg.discretization,
            cfg.scan_mode,
        )
    }
}

impl Module for ScanPath {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv", &self.conv);
        visit_child("ssm", &self.ssm, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv", &mut self.conv);
        visit_child_mut("ssm", &mut self.ssm, f);
    }
}

/// Row permutation reversing each length-`seq_len` sequence.
pub fn reverse_index(rows: usize, seq_len: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let (s, t) = (r / seq_len, r % seq_len);
            s * seq_len + (seq_len - 1 - t)
        })
        .collect()
}

fn check_input(g: &Graph, x: Var, d_model: usize, seq_len: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != d_model {
        return Err(Error::ShapeMismatch {
            left: s.to_vec(),
            right: vec![d_model],
            context: "block input width vs d_model",
        });
    }
    if seq_len == 0 || !s[0].is_multiple_of(seq_len) {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

fn normed(g: &mut Graph, x: Var, cfg: &MambaConfig) -> Result<Var> {
    if cfg.input_norm {
        g.rms_norm(x, NORM_EPS)
    } else {
        Ok(x)
    }
}

/// Gated selective-scan block:
/// `out_proj(scan(silu(conv(stream))) * silu(gate))` with
/// `[stream | gate] = in_proj(x)`. All maps are bias-free.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub in_proj: Tensor,
    pub path: ScanPath,
    pub out_proj: Tensor,
}

impl MambaBlock {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (dm, di) = (cfg.d_model, cfg.d_inner());
        Self {
            cfg: cfg.clone(),
            in_proj: Tensor::randn(&[dm, 2 * di], (dm as f64).powf(-0.5), rng).into_param(),
            path: ScanPath::init(cfg, rng),
            out_proj: Tensor::randn(&[di, dm], (di as f64).powf(-0.5), rng).into_param(),
        }
    }

    /// `x`: `(num_seqs * seq_len) x d_model`, sequences stacked row-wise.
    pub fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        check_input(g, x, self.cfg.d_model, seq_len)?;
        let x = normed(g, x, &self.cfg)?;
        let di = self.cfg.d_inner();
        let w_in = g.param(&self.in_proj);
        let xz = g.matmul(x, w_in)?;
        let stream = g.slice_cols(xz, 0, di)?;
        let gate = g.slice_cols(xz, di, di)?;
        let y = self.path.forward(g, stream, seq_len, &self.cfg)?;
        let sg = g.silu(gate);
        let gated = g.mul(y, sg)?;
        let w_out = g.param(&self.out_proj);
        g.matmul(gated, w_out)
    }

    /// Single sequence, value only.
    pub fn apply(&self, seq: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(seq.clone());
        let y = self.forward(&mut g, x, seq.rows())?;
        Ok(g.value(y).clone())
    }
}

impl Module for MambaBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("in_proj", &self.in_proj);
        visit_child("path", &self.path, f);
        f("out_proj", &self.out_proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("in_proj", &mut self.in_proj);
        visit_child_mut("path", &mut self.path, f);
        f("out_proj", &mut self.out_proj);
    }
}

/// `fwd(x) + reverse(bwd(reverse(x)))` for two arbitrary blocks.
pub fn bi_mamba(g: &mut Graph, x: Var, fwd: &MambaBlock, bwd: &MambaBlock, seq_len: usize) -> Result<Var> {
    if fwd.cfg.d_model != bwd.cfg.d_model {
        return Err(Error::Config(format!(
            "bi_mamba direction widths differ: {} vs {}",
            fwd.cfg.d_model, bwd.cfg.d_model
        )));
    }
    check_input(g, x, fwd.cfg.d_model, seq_len)?;
    let rev = reverse_index(g.shape(x)[0], seq_len);
    let yf = fwd.forward(g, x, seq_len)?;
    let xr = g.gather_rows(x, &rev)?;
    let yb = bwd.forward(g, xr, seq_len)?;
    let yb = g.gather_rows(yb, &rev)?;
    g.add(yf, yb)
}

/// Bidirectional block whose two directions share the input and output
/// projections and keep separate conv and scan parameters. Equal to
/// [`bi_mamba`] over [`BiMamba::forward_block`] and
/// [`BiMamba::backward_block`].
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub cfg: MambaConfig,
    pub in_proj: Tensor,
    pub fwd: ScanPath,
    pub bwd: ScanPath,
    pub out_proj: Tensor,
}

impl BiMamba {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (dm, di) = (cfg.d_model, cfg.d_inner());
        Self {
            cfg: cfg.clone(),
            in_proj: Tensor::randn(&[dm, 2 * di], (dm as f64).powf(-0.5), rng).into_param(),
            fwd: ScanPath::init(cfg, rng),
            bwd: ScanPath::init(cfg, rng),
            out_proj: Tensor::randn(&[di, dm], (di as f64).powf(-0.5), rng).into_param(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        check_input(g, x, self.cfg.d_model, seq_len)?;
        let x = normed(g, x, &self.cfg)?;
        let di = self.cfg.d_inner();
        let w_in = g.param(&self.in_proj);
        let xz = g.matmul(x, w_in)?;
        let stream = g.slice_cols(xz, 0, di)?;
        let gate = g.slice_cols(xz, di, di)?;
        let yf = self.fwd.forward(g, stream, seq_len, &self.cfg)?;
        let rev = reverse_index(g.shape(x)[0], seq_len);
        let sr = g.gather_rows(stream, &rev)?;
        let yb = self.bwd.forward(g, sr, seq_len, &self.cfg)?;
        let yb = g.gather_rows(yb, &rev)?;
        let y = g.add(yf, yb)?;
        let sg = g.silu(gate);
        let gated = g.mul(y, sg)?;
        let w_out = g.param(&self.out_proj);
        g.matmul(gated, w_out)
    }

    pub fn apply(&self, seq: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(seq.clone());
        let y = self.forward(&mut g, x, seq.rows())?;
        Ok(g.value(y).clone())
    }

    fn direction(&self, path: &ScanPath) -> MambaBlock {
        MambaBlock {
            cfg: self.cfg.clone(),
            in_proj: self.in_proj.clone(),
            path: path.clone(),
            out_proj: self.out_proj.clone(),
        }
    }

    pub fn forward_block(&self) -> MambaBlock {
        self.direction(&self.fwd)
    }

    pub fn backward_block(&self) -> MambaBlock {
        self.direction(&self.bwd)
    }
}

impl Module for BiMamba {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("in_proj", &self.in_proj);
        visit_child("fwd", &self.fwd, f);
        visit_child("bwd", &self.bwd, f);
        f("out_proj", &self.out_proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("in_proj", &mut self.in_proj);
        visit_child_mut("fwd", &mut self.fwd, f);
        visit_child_mut("bwd", &mut self.bwd, f);
        f("out_proj", &mut self.out_proj);
    }
}
