//! Attention baselines for the cost comparison: a time-only Transformer, a
//! divided space-time Transformer and single-layer joint attention.
//!
//! All layers are single-head, bias-free and norm-free. The `1/sqrt(D)`
//! score scale is folded into the query projection at init, so a forward
//! pass costs exactly `4 L D^2 + 2 L^2 D` multiply-adds per attention and
//! `8 L D^2` per feed-forward sublayer.

use rand::Rng;

use crate::context::BatchDims;
use crate::error::Result;
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{visit_child, visit_child_mut, Module};

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = (d as f64).powf(-0.5);
        let mut wq = Tensor::randn(&[d, d], std, rng);
        wq.data_mut().iter_mut().for_each(|v| *v *= std);
        Self {
            wq: wq.into_param(),
            wk: Tensor::randn(&[d, d], std, rng).into_param(),
            wv: Tensor::randn(&[d, d], std, rng).into_param(),
            wo: Tensor::randn(&[d, d], std, rng).into_param(),
        }
    }

    /// Self-attention within consecutive blocks of `seq_len` rows.
    pub fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let rows = g.shape(x)[0];
        let (wq, wk, wv, wo) = (
            g.param(&self.wq),
            g.param(&self.wk),
            g.param(&self.wv),
            g.param(&self.wo),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(rows / seq_len);
        for s in 0..rows / seq_len {
            let idx: Vec<usize> = (s * seq_len..(s + 1) * seq_len).collect();
            let qs = g.gather_rows(q, &idx)?;
            let ks = g.gather_rows(k, &idx)?;
            let vs = g.gather_rows(v, &idx)?;
            let kt = g.transpose(ks)?;
            let scores = g.matmul(qs, kt)?;
            let p = g.row_softmax(scores)?;
            outs.push(g.matmul(p, vs)?);
        }
        let a = g.concat_rows(&outs)?;
        g.matmul(a, wo)
    }
}

impl Module for Attention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("wo", &self.wo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("wo", &mut self.wo);
    }
}

/// `D -> 4D -> D` with a SiLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

pub const FFN_MULT: usize = 4;

impl FeedForward {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let h = FFN_MULT * d;
        Self {
            w1: Tensor::randn(&[d, h], (d as f64).powf(-0.5), rng).into_param(),
            w2: Tensor::randn(&[h, d], (h as f64).powf(-0.5), rng).into_param(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w1 = g.param(&self.w1);
        let w2 = g.param(&self.w2);
        let h = g.matmul(x, w1)?;
        let h = g.silu(h);
        g.matmul(h, w2)
    }
}

impl Module for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("w2", &self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
    }
}

/// One attention + feed-forward layer over the channel-pooled frame
/// sequence; the Transformer counterpart of T-Mamba.
#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl TemporalTransformer {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::init(d, rng),
            ffn: FeedForward::init(d, rng),
        }
    }

    /// `(batch * C) x D`, current-frame output broadcast to every channel.
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        let pooled = g.mean_groups(frames, dims.c)?;
        let a = self.attn.forward(g, pooled, dims.t)?;
        let h = g.add(pooled, a)?;
        let f = self.ffn.forward(g, h)?;
        let y = g.add(h, f)?;
        let idx: Vec<usize> = (0..dims.batch)
            .flat_map(|b| std::iter::repeat_n(b * dims.t + dims.current, dims.c))
            .collect();
        g.gather_rows(y, &idx)
    }
}

impl Module for TemporalTransformer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("attn", &self.attn, f);
        visit_child("ffn", &self.ffn, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("attn", &mut self.attn, f);
        visit_child_mut("ffn", &mut self.ffn, f);
    }
}

#[derive(Clone, Debug)]
pub struct DividedLayer {
    pub temporal: Attention,
    pub spatial: Attention,
    pub ffn: FeedForward,
}

/// Divided space-time attention stack: each layer attends over time per
/// channel, then over channels per frame, then applies a feed-forward.
#[derive(Clone, Debug)]
pub struct Timesformer {
    pub layers: Vec<DividedLayer>,
}

pub const TIMESFORMER_DEPTH: usize = 4;

impl Timesformer {
    pub fn init<R: Rng + ?Sized>(d: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..depth)
                .map(|_| DividedLayer {
                    temporal: Attention::init(d, rng),
                    spatial: Attention::init(d, rng),
                    ffn: FeedForward::init(d, rng),
                })
                .collect(),
        }
    }

    /// Current frame of the final layer, `(batch * C) x D`.
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        let to_channel = dims.channel_major();
        let mut to_frame = vec![0; to_channel.len()];
        for (k, &r) in to_channel.iter().enumerate() {
            to_frame[r] = k;
        }
        let mut x = frames;
        for layer in &self.layers {
            let xc = g.gather_rows(x, &to_channel)?;
            let a = layer.temporal.forward(g, xc, dims.t)?;
            let a = g.gather_rows(a, &to_frame)?;
            let x1 = g.add(x, a)?;
            let s = layer.spatial.forward(g, x1, dims.c)?;
            let x2 = g.add(x1, s)?;
            let f = layer.ffn.forward(g, x2)?;
            x = g.add(x2, f)?;
        }
        g.gather_rows(x, &dims.current_rows())
    }
}

impl Module for Timesformer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            visit_child(&format!("{i}.temporal"), &l.temporal, f);
            visit_child(&format!("{i}.spatial"), &l.spatial, f);
            visit_child(&format!("{i}.ffn"), &l.ffn, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_child_mut(&format!("{i}.temporal"), &mut l.temporal, f);
            visit_child_mut(&format!("{i}.spatial"), &mut l.spatial, f);
            visit_child_mut(&format!("{i}.ffn"), &mut l.ffn, f);
        }
    }
}

/// Single attention layer over all `t * C` tokens.
#[derive(Clone, Debug)]
pub struct JointAttention {
    pub attn: Attention,
}

impl JointAttention {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::init(d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        let a = self.attn.forward(g, frames, dims.t * dims.c)?;
        let y = g.add(frames, a)?;
        g.gather_rows(y, &dims.current_rows())
    }
}

impl Module for JointAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("attn", &self.attn, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("attn", &mut self.attn, f);
    }
}
