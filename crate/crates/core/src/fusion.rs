//! Adapters that merge `n` context features into the base frame feature.
//!
//! Every adapter works on `(batch * C) x D` row blocks (one `C x D` map per
//! sample, stacked) and returns the adapted feature with the base already
//! added back:
//!
//! | kind   | output                                                   |
//! |--------|----------------------------------------------------------|
//! | DA     | `base + sum_i w_i f_i`                                   |
//! | IC     | `base + FC(concat(f_1..f_n))`                            |
//! | QMamba | `base + G(sum_i Latent(CrossAttn(Q, f_i, f_i)))`         |

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{visit_child, visit_child_mut, Module};
use crate::ssm::{BiMamba, MambaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterKind {
    Da,
    Ic,
    QMamba,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Da, AdapterKind::Ic, AdapterKind::QMamba];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Da => "da",
            AdapterKind::Ic => "ic",
            AdapterKind::QMamba => "qmamba",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "da" => Ok(AdapterKind::Da),
            "ic" => Ok(AdapterKind::Ic),
            "qmamba" | "q-mamba" => Ok(AdapterKind::QMamba),
            other => Err(Error::Config(format!("unknown adapter `{other}`"))),
        }
    }
}

/// Which tokens a Q-Mamba query attends over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KvScope {
    /// The feature's own token at the same channel. A single key, so the
    /// attention weight is exactly 1.
    #[default]
    Channel,
    /// All `C` tokens of the feature for the same sample.
    AllChannels,
}

impl KvScope {
    pub fn name(self) -> &'static str {
        match self {
            KvScope::Channel => "channel",
            KvScope::AllChannels => "all_channels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "channel" => Ok(KvScope::Channel),
            "all_channels" => Ok(KvScope::AllChannels),
            other => Err(Error::Config(format!("unknown kv_scope `{other}`"))),
        }
    }
}

fn check_features(g: &Graph, base: Var, feats: &[Var], n: usize) -> Result<()> {
    if feats.len() != n {
        return Err(Error::InvalidArgument(format!(
            "adapter built for {n} features, got {}",
            feats.len()
        )));
    }
    for &f in feats {
        if g.shape(f) != g.shape(base) {
            return Err(Error::ShapeMismatch {
                left: g.shape(base).to_vec(),
                right: g.shape(f).to_vec(),
                context: "context feature vs base feature",
            });
        }
    }
    Ok(())
}

/// Direct addition with one learnable weight per feature.
#[derive(Clone, Debug)]
pub struct DaAdapter {
    pub weights: Tensor,
}

impl DaAdapter {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("adapter needs at least one feature".into()));
        }
        Ok(Self {
            weights: Tensor::filled(&[n], 1.0 / n as f64).into_param(),
        })
    }

    pub fn n(&self) -> usize {
        self.weights.numel()
    }

    pub fn forward(&self, g: &mut Graph, base: Var, feats: &[Var]) -> Result<Var> {
        check_features(g, base, feats, self.n())?;
        let w = g.param(&self.weights);
        let w = g.reshape(w, &[self.n(), 1])?;
        let mut terms = vec![base];
        for (i, &f) in feats.iter().enumerate() {
            let wi = g.gather_rows(w, &[i])?;
            terms.push(g.mul(f, wi)?);
        }
        g.add_all(&terms)
    }
}

impl Module for DaAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weights", &self.weights);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weights", &mut self.weights);
    }
}

/// Concatenate along the feature axis and project `n * D -> D`.
#[derive(Clone, Debug)]
pub struct IcAdapter {
    pub fc: Tensor,
}

impl IcAdapter {
    pub fn init<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("adapter needs at least one feature".into()));
        }
        let fan_in = (n * d) as f64;
        Ok(Self {
            fc: Tensor::randn(&[n * d, d], fan_in.powf(-0.5), rng).into_param(),
        })
    }

    pub fn n(&self) -> usize {
        self.fc.shape()[0] / self.fc.shape()[1]
    }

    /// `FC(concat(feats))`, without the base.
    pub fn project(&self, g: &mut Graph, feats: &[Var]) -> Result<Var> {
        if feats.len() != self.n() {
            return Err(Error::InvalidArgument(format!(
                "adapter built for {} features, got {}",
                self.n(),
                feats.len()
            )));
        }
        let cat = g.concat_cols(feats)?;
        let w = g.param(&self.fc);
        g.matmul(cat, w)
    }

    pub fn forward(&self, g: &mut Graph, base: Var, feats: &[Var]) -> Result<Var> {
        check_features(g, base, feats, self.n())?;
        let p = self.project(g, feats)?;
        g.add(base, p)
    }
}

impl Module for IcAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("fc", &self.fc);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("fc", &mut self.fc);
    }
}

/// Per-channel cross-attention from the base feature to each context
/// feature, a shared latent Bi-Mamba across channels, and a zero-initialized
/// output gate.
#[derive(Clone, Debug)]
pub struct QMambaAdapter {
    pub q_proj: Tensor,
    pub k_proj: Vec<Tensor>,
    pub v_proj: Vec<Tensor>,
    pub o_proj: Vec<Tensor>,
    pub latent: BiMamba,
    pub out_gate: Tensor,
    pub kv_scope: KvScope,
    /// Add the query to each attention output before the latent scan.
    pub query_residual: bool,
    /// Wrap the latent scan as `z + Latent(z)`.
    pub latent_residual: bool,
}

impl QMambaAdapter {
    pub fn init<R: Rng + ?Sized>(n: usize, cfg: &MambaConfig, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("adapter needs at least one feature".into()));
        }
        let d = cfg.d_model;
        let eye = || Tensor::eye(d).into_param();
        Ok(Self {
            q_proj: eye(),
            k_proj: (0..n).map(|_| eye()).collect(),
            v_proj: (0..n).map(|_| eye()).collect(),
            o_proj: (0..n).map(|_| eye()).collect(),
            latent: BiMamba::init(cfg, rng),
            out_gate: Tensor::zeros(&[d, d]).into_param(),
            kv_scope: KvScope::Channel,
            query_residual: true,
            latent_residual: true,
        })
    }

    pub fn n(&self) -> usize {
        self.v_proj.len()
    }

    fn attend(&self, g: &mut Graph, q: Var, f: Var, i: usize, c: usize) -> Result<Var> {
        let wv = g.param(&self.v_proj[i]);
        let v = g.matmul(f, wv)?;
        match self.kv_scope {
            // softmax over a single key is 1
            KvScope::Channel => Ok(v),
            KvScope::AllChannels => {
                let wk = g.param(&self.k_proj[i]);
                let k = g.matmul(f, wk)?;
                let d = g.shape(q)[1];
                let batch = g.shape(q)[0] / c;
                let mut outs = Vec::with_capacity(batch);
                for b in 0..batch {
                    let idx: Vec<usize> = (b * c..(b + 1) * c).collect();
                    let qb = g.gather_rows(q, &idx)?;
                    let kb = g.gather_rows(k, &idx)?;
                    let vb = g.gather_rows(v, &idx)?;
                    let kt = g.transpose(kb)?;
                    let s = g.matmul(qb, kt)?;
                    let s = g.scale(s, (d as f64).powf(-0.5));
                    let p = g.row_softmax(s)?;
                    outs.push(g.matmul(p, vb)?);
                }
                g.concat_rows(&outs)
            }
        }
    }

    /// Adapted feature for `base` (`(batch * c) x D`).
    pub fn forward(&self, g: &mut Graph, base: Var, feats: &[Var], c: usize) -> Result<Var> {
        check_features(g, base, feats, self.n())?;
        if c == 0 || !g.shape(base)[0].is_multiple_of(c) {
            return Err(Error::InvalidArgument(format!(
                "{} rows are not a whole number of {c}-channel maps",
                g.shape(base)[0]
            )));
        }
        let wq = g.param(&self.q_proj);
        let q = g.matmul(base, wq)?;
        let mut latents = Vec::with_capacity(feats.len());
        for (i, &f) in feats.iter().enumerate() {
            let a = self.attend(g, q, f, i, c)?;
            let wo = g.param(&self.o_proj[i]);
            let mut z = g.matmul(a, wo)?;
            if self.query_residual {
                z = g.add(z, q)?;
            }
            let l = self.latent.forward(g, z, c)?;
            latents.push(if self.latent_residual { g.add(z, l)? } else { l });
        }
        let s = g.add_all(&latents)?;
        let gate = g.param(&self.out_gate);
        let delta = g.matmul(s, gate)?;
        g.add(base, delta)
    }
}

impl Module for QMambaAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("q_proj", &self.q_proj);
        for (i, ((k, v), o)) in self.k_proj.iter().zip(&self.v_proj).zip(&self.o_proj).enumerate() {
            f(&format!("k_proj.{i}"), k);
            f(&format!("v_proj.{i}"), v);
            f(&format!("o_proj.{i}"), o);
        }
        visit_child("latent", &self.latent, f);
        f("out_gate", &self.out_gate);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("q_proj", &mut self.q_proj);
        let projs = self.k_proj.iter_mut().zip(&mut self.v_proj).zip(&mut self.o_proj);
        for (i, ((k, v), o)) in projs.enumerate() {
            f(&format!("k_proj.{i}"), k);
            f(&format!("v_proj.{i}"), v);
            f(&format!("o_proj.{i}"), o);
        }
        visit_child_mut("latent", &mut self.latent, f);
        f("out_gate", &mut self.out_gate);
    }
}

#[derive(Clone, Debug)]
pub enum Adapter {
    Da(DaAdapter),
    Ic(IcAdapter),
    QMamba(QMambaAdapter),
}

impl Adapter {
    pub fn init<R: Rng + ?Sized>(kind: AdapterKind, n: usize, cfg: &MambaConfig, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            AdapterKind::Da => Adapter::Da(DaAdapter::new(n)?),
            AdapterKind::Ic => Adapter::Ic(IcAdapter::init(n, cfg.d_model, rng)?),
            AdapterKind::QMamba => Adapter::QMamba(QMambaAdapter::init(n, cfg, rng)?),
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Da(_) => AdapterKind::Da,
            Adapter::Ic(_) => AdapterKind::Ic,
            Adapter::QMamba(_) => AdapterKind::QMamba,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Adapter::Da(a) => a.n(),
            Adapter::Ic(a) => a.n(),
            Adapter::QMamba(a) => a.n(),
        }
    }

    /// `c` is the channel count per sample (the latent scan length).
    pub fn forward(&self, g: &mut Graph, base: Var, feats: &[Var], c: usize) -> Result<Var> {
        match self {
            Adapter::Da(a) => a.forward(g, base, feats),
            Adapter::Ic(a) => a.forward(g, base, feats),
            Adapter::QMamba(a) => a.forward(g, base, feats, c),
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            Adapter::Da(a) => a,
            Adapter::Ic(a) => a,
            Adapter::QMamba(a) => a,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module {
        match self {
            Adapter::Da(a) => a,
            Adapter::Ic(a) => a,
            Adapter::QMamba(a) => a,
        }
    }
}

impl Module for Adapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.module().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.module_mut().visit_mut(f)
    }
}

fn run<F>(base: &Tensor, feats: &[Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = g.constant(base.clone());
    let fs: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&mut g, b, &fs)?;
    Ok(g.value(y).clone())
}

pub fn da_fuse(base: &Tensor, feats: &[Tensor], adapter: &DaAdapter) -> Result<Tensor> {
    run(base, feats, |g, b, fs| adapter.forward(g, b, fs))
}

/// `FC(concat(feats))` for one `C x D` map set.
pub fn ic_fuse(feats: &[Tensor], adapter: &IcAdapter) -> Result<Tensor> {
    let first = feats
        .first()
        .ok_or_else(|| Error::InvalidArgument("no features to fuse".into()))?;
    run(first, feats, |g, _, fs| adapter.project(g, fs))
}

pub fn q_mamba_fuse(current: &Tensor, feats: &[Tensor], adapter: &QMambaAdapter) -> Result<Tensor> {
    let c = current.rows();
    run(current, feats, |g, b, fs| adapter.forward(g, b, fs, c))
}

/// Uniform entry point over all adapter kinds for one `C x D` map.
pub fn fuse(base: &Tensor, feats: &[Tensor], adapter: &Adapter) -> Result<Tensor> {
    let c = base.rows();
    run(base, feats, |g, b, fs| adapter.forward(g, b, fs, c))
}
