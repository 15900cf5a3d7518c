//! End-to-end adapter model: contexts, fusion, residual onto the frozen
//! frame feature, and a per-channel localization head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::{BatchDims, ContextConfig, ContextMamba, VideoFeatures};
use crate::error::{Error, Result};
use crate::fusion::{Adapter, AdapterKind, KvScope};
use crate::numeric::{Graph, Tensor, Var};
use crate::optim::Optimizer;
use crate::params::{visit_child, visit_child_mut, Module};

/// Which frame feature receives the adapter residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BaseMode {
    #[default]
    CurrentFrame,
    /// Mean over all frames.
    PooledFrames,
}

impl BaseMode {
    pub fn name(self) -> &'static str {
        match self {
            BaseMode::CurrentFrame => "current_frame",
            BaseMode::PooledFrames => "pooled_frames",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "current_frame" => Ok(BaseMode::CurrentFrame),
            "pooled_frames" => Ok(BaseMode::PooledFrames),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub context: ContextConfig,
    /// Patch channels per frame.
    pub channels: usize,
    pub adapter: AdapterKind,
    pub kv_scope: KvScope,
    pub query_residual: bool,
    pub latent_residual: bool,
    pub mode: BaseMode,
}

impl ModelConfig {
    pub fn new(frames: usize, channels: usize, d_model: usize) -> Self {
        Self {
            context: ContextConfig::new(frames, d_model),
            channels,
            adapter: AdapterKind::QMamba,
            kv_scope: KvScope::Channel,
            query_residual: true,
            latent_residual: true,
            mode: BaseMode::CurrentFrame,
        }
    }

    /// No context branch at all: the head sees only the base feature.
    pub fn frame_only(&self) -> bool {
        self.context.granularities.is_empty() || self.context.branches.is_empty()
    }
}

/// A batch of equally shaped videos with their labels.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(batch * t * C) x D`, rows ordered `(sample, frame, channel)`.
    pub frames: Tensor,
    pub dims: BatchDims,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_videos(videos: &[&VideoFeatures], labels: Vec<usize>) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let dims = BatchDims {
            batch: videos.len(),
            ..first.dims()
        };
        let mut data = Vec::with_capacity(dims.rows() * dims.d);
        for v in videos {
            if v.dims() != first.dims() {
                return Err(Error::ShapeMismatch {
                    left: first.frames.shape().to_vec(),
                    right: v.frames.shape().to_vec(),
                    context: "videos in one batch",
                });
            }
            data.extend_from_slice(v.frames.data());
        }
        Ok(Self {
            frames: Tensor::new(&[dims.rows(), dims.d], data)?,
            dims,
            labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct HmbaModel {
    pub cfg: ModelConfig,
    pub context: Option<ContextMamba>,
    pub adapter: Option<Adapter>,
    /// `D x 1`: one logit per patch channel.
    pub head: Tensor,
}

impl HmbaModel {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.context.d_model;
        let (context, adapter) = if cfg.frame_only() {
            (None, None)
        } else {
            let ctx = ContextMamba::init(&cfg.context, rng)?;
            let mut adapter = Adapter::init(cfg.adapter, ctx.len(), &cfg.context.mamba(), rng)?;
            if let Adapter::QMamba(q) = &mut adapter {
                q.kv_scope = cfg.kv_scope;
                q.query_residual = cfg.query_residual;
                q.latent_residual = cfg.latent_residual;
            }
            (Some(ctx), Some(adapter))
        };
        Ok(Self {
            cfg: cfg.clone(),
            context,
            adapter,
            head: Tensor::randn(&[d, 1], (d as f64).powf(-0.5), rng).into_param(),
        })
    }

    pub fn init_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_dims(&self, dims: BatchDims) -> Result<()> {
        if dims.c != self.cfg.channels || dims.d != self.cfg.context.d_model {
            return Err(Error::ShapeMismatch {
                left: vec![dims.t, dims.c, dims.d],
                right: vec![self.cfg.context.frames, self.cfg.channels, self.cfg.context.d_model],
                context: "video dims vs model config",
            });
        }
        Ok(())
    }

    /// Base feature rows, `(batch * C) x D`.
    pub fn base(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        match self.cfg.mode {
            BaseMode::CurrentFrame => g.gather_rows(frames, &dims.current_rows()),
            BaseMode::PooledFrames => {
                let by_channel = g.gather_rows(frames, &dims.channel_major())?;
                g.mean_groups(by_channel, dims.t)
            }
        }
    }

    /// Adapted feature, `(batch * C) x D`.
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        self.check_dims(dims)?;
        let base = self.base(g, frames, dims)?;
        match (&self.context, &self.adapter) {
            (Some(ctx), Some(adapter)) => {
                let feats = ctx.forward(g, frames, dims)?;
                adapter.forward(g, base, &feats, dims.c)
            }
            _ => Ok(base),
        }
    }

    /// Per-sample channel logits, `batch x C`.
    pub fn logits(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        let y = self.forward(g, frames, dims)?;
        let h = g.param(&self.head);
        let l = g.matmul(y, h)?;
        g.reshape(l, &[dims.batch, dims.c])
    }

    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.frames.clone());
        let logits = self.logits(g, x, batch.dims)?;
        g.cross_entropy(logits, &batch.labels)
    }

    /// Adapted feature of a single video, `C x D`.
    pub fn apply(&self, video: &VideoFeatures) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(video.tokens());
        let y = self.forward(&mut g, x, video.dims())?;
        Ok(g.value(y).clone())
    }

    /// Argmax channel per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(batch.frames.clone());
        let l = self.logits(&mut g, x, batch.dims)?;
        Ok(g
            .value(l)
            .data()
            .chunks(batch.dims.c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut Optimizer, step: usize) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        g.backward(loss)?;
        let mut grads = Vec::new();
        self.visit(&mut |_, t| {
            if t.requires_grad {
                grads.push(g.param_grad(t));
            }
        });
        drop(g);
        opt.apply(self, &grads)?;
        Ok(value)
    }
}

impl Module for HmbaModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(c) = &self.context {
            visit_child("context", c, f);
        }
        if let Some(a) = &self.adapter {
            visit_child("adapter", a, f);
        }
        f("head", &self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(c) = &mut self.context {
            visit_child_mut("context", c, f);
        }
        if let Some(a) = &mut self.adapter {
            visit_child_mut("adapter", a, f);
        }
        f("head", &mut self.head);
    }
}

/// Deterministic stand-in for a frozen image encoder. A frame of `C` patch
/// intensities maps to `C x D` features
/// `pos[c] + intensity * (signal + shade[c])`, so patch content carries
/// its location even after pooling over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackboneStub {
    pub pos: Tensor,
    pub signal: Tensor,
    pub shade: Tensor,
}

impl FrozenBackboneStub {
    pub fn new(channels: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            pos: Tensor::randn(&[channels, d], 0.5, &mut rng),
            signal: Tensor::randn(&[d], 1.0, &mut rng),
            shade: Tensor::randn(&[channels, d], 0.7, &mut rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.pos.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.pos.shape()[1]
    }

    /// `intensity` holds `t x C` patch values, frame-major.
    pub fn encode(&self, intensity: &[f64], t: usize) -> Result<Tensor> {
        let (c, d) = (self.channels(), self.d());
        if intensity.len() != t * c {
            return Err(Error::InvalidArgument(format!(
                "{} intensities for {t} frames of {c} patches",
                intensity.len()
            )));
        }
        let mut out = Vec::with_capacity(t * c * d);
        for (k, &v) in intensity.iter().enumerate() {
            let ch = k % c;
            let pos = self.pos.row(ch);
            let shade = self.shade.row(ch);
            out.extend((0..d).map(|j| pos[j] + v * (self.signal.data()[j] + shade[j])));
        }
        Tensor::new(&[t, c, d], out)
    }

    pub fn checksum(&self) -> u64 {
        self.pos.checksum() ^ self.signal.checksum().rotate_left(21) ^ self.shade.checksum().rotate_left(42)
    }
}
