//! Multi-granularity context extraction over a stack of frame features.
//!
//! Three sequence arrangements run on each temporal branch:
//!
//! - **T**: mean-pool each frame over its patch channels, scan the `t`
//!   frame tokens, keep the current frame's output and broadcast it to all
//!   channels.
//! - **DST**: scan every patch channel over time, take the current frame of
//!   the result and scan its `C` channels in raster order.
//! - **JST**: flatten to `t * C` tokens frame by frame, add a per-frame
//!   temporal embedding, scan the whole sequence, keep the current frame's
//!   `C` tokens.
//!
//! The high branch sees every frame; the low branch keeps every
//! `low_stride`-th frame counted backward from the current one.
//!
//! Batched forms work on a `(batch * t * C) x D` matrix with rows ordered
//! `(sample, frame, channel)` and return `(batch * C) x D`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::params::{visit_child, visit_child_mut, Module};
use crate::ssm::{BiMamba, MambaConfig};

/// A `t x C x D` stack of frame features and the index of the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub frames: Tensor,
    pub current_index: usize,
}

impl VideoFeatures {
    pub fn new(frames: Tensor, current_index: usize) -> Result<Self> {
        if frames.shape().len() != 3 {
            return Err(Error::InvalidShape {
                shape: frames.shape().to_vec(),
                reason: "video features must be t x C x D".into(),
            });
        }
        if current_index >= frames.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "current index {current_index} outside {} frames",
                frames.shape()[0]
            )));
        }
        Ok(Self {
            frames,
            current_index,
        })
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        let n = self.c() * self.d();
        Tensor::new(&[self.c(), self.d()], self.frames.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    pub fn current(&self) -> Tensor {
        self.frame(self.current_index)
    }

    /// Frame features flattened to `(t * C) x D`.
    pub fn tokens(&self) -> Tensor {
        self.frames.reshape(&[self.t() * self.c(), self.d()]).unwrap()
    }

    pub fn dims(&self) -> BatchDims {
        BatchDims {
            batch: 1,
            t: self.t(),
            c: self.c(),
            d: self.d(),
            current: self.current_index,
        }
    }
}

/// Shape of a batch of videos sharing `t`, `C`, `D` and the current index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchDims {
    pub batch: usize,
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub current: usize,
}

impl BatchDims {
    pub fn rows(&self) -> usize {
        self.batch * self.t * self.c
    }

    fn row(&self, b: usize, f: usize, c: usize) -> usize {
        (b * self.t + f) * self.c + c
    }

    /// Rows of the current frame, ordered `(sample, channel)`.
    pub fn current_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.c).map(move |c| (b, c)))
            .map(|(b, c)| self.row(b, self.current, c))
            .collect()
    }

    /// Pooled-mode base: mean over frames, `(batch * C) x D`, via rows
    /// reordered to `(sample, channel, frame)`.
    pub fn channel_major(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.rows());
        for b in 0..self.batch {
            for c in 0..self.c {
                for f in 0..self.t {
                    idx.push(self.row(b, f, c));
                }
            }
        }
        idx
    }
}

/// Frame indices kept at the given stride: the current frame and every
/// `stride`-th frame before and after it.
pub fn resample_indices(t: usize, current: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if current >= t {
        return Err(Error::InvalidArgument(format!("current {current} >= t {t}")));
    }
    let first = current % stride;
    Ok((first..t).step_by(stride).collect())
}

/// Keeps every `stride`-th frame anchored at the current frame.
pub fn temporal_resample(video: &VideoFeatures, stride: usize) -> Result<VideoFeatures> {
    let keep = resample_indices(video.t(), video.current_index, stride)?;
    let per = video.c() * video.d();
    let mut data = Vec::with_capacity(keep.len() * per);
    for &f in &keep {
        data.extend_from_slice(&video.frames.data()[f * per..(f + 1) * per]);
    }
    let current = keep.iter().position(|&f| f == video.current_index).unwrap();
    VideoFeatures::new(
        Tensor::new(&[keep.len(), video.c(), video.d()], data)?,
        current,
    )
}

/// Batched resampling: returns the gathered rows and the new dims.
pub fn resample_batch(
    g: &mut Graph,
    frames: Var,
    dims: BatchDims,
    stride: usize,
) -> Result<(Var, BatchDims)> {
    if stride == 1 {
        return Ok((frames, dims));
    }
    let keep = resample_indices(dims.t, dims.current, stride)?;
    let mut idx = Vec::with_capacity(dims.batch * keep.len() * dims.c);
    for b in 0..dims.batch {
        for &f in &keep {
            idx.extend((0..dims.c).map(|c| dims.row(b, f, c)));
        }
    }
    let out = g.gather_rows(frames, &idx)?;
    let current = keep.iter().position(|&f| f == dims.current).unwrap();
    Ok((
        out,
        BatchDims {
            t: keep.len(),
            current,
            ..dims
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    T,
    Dst,
    Jst,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::T, Granularity::Dst, Granularity::Jst];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::T => "t",
            Granularity::Dst => "dst",
            Granularity::Jst => "jst",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" => Ok(Granularity::T),
            "dst" => Ok(Granularity::Dst),
            "jst" => Ok(Granularity::Jst),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    High,
    Low,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::High, Branch::Low];

    pub fn name(self) -> &'static str {
        match self {
            Branch::High => "high",
            Branch::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(Branch::High),
            "low" => Ok(Branch::Low),
            other => Err(Error::Config(format!("unknown branch `{other}`"))),
        }
    }
}

/// One branch's output, aligned to the current frame's `C x D` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeature {
    pub map: Tensor,
    pub granularity: Granularity,
    pub branch: Branch,
}

#[derive(Clone, Debug)]
pub struct TemporalEmbedding {
    pub table: Tensor,
}

impl TemporalEmbedding {
    pub fn init<R: Rng + ?Sized>(t_max: usize, d: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::randn(&[t_max, d], 0.1, rng).into_param(),
        }
    }

    pub fn zeros(t_max: usize, d: usize) -> Self {
        Self {
            table: Tensor::zeros(&[t_max, d]).into_param(),
        }
    }

    pub fn t_max(&self) -> usize {
        self.table.shape()[0]
    }
}

fn check_width(dims: BatchDims, block: &BiMamba) -> Result<()> {
    if dims.d != block.d_model() {
        return Err(Error::ShapeMismatch {
            left: vec![dims.t, dims.c, dims.d],
            right: vec![block.d_model()],
            context: "video feature width vs block d_model",
        });
    }
    Ok(())
}

/// Temporal-only arrangement.
#[derive(Clone, Debug)]
pub struct TMamba {
    pub block: BiMamba,
}

impl TMamba {
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        check_width(dims, &self.block)?;
        let pooled = g.mean_groups(frames, dims.c)?;
        let y = self.block.forward(g, pooled, dims.t)?;
        let idx: Vec<usize> = (0..dims.batch)
            .flat_map(|b| std::iter::repeat_n(b * dims.t + dims.current, dims.c))
            .collect();
        g.gather_rows(y, &idx)
    }
}

impl Module for TMamba {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("block", &self.block, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("block", &mut self.block, f);
    }
}

/// Divided space-time arrangement.
#[derive(Clone, Debug)]
pub struct DstMamba {
    pub temporal: BiMamba,
    pub spatial: BiMamba,
}

impl DstMamba {
    /// Per-channel temporal scan; rows ordered `(sample, channel, frame)`.
    pub fn temporal_stage(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        check_width(dims, &self.temporal)?;
        let by_channel = g.gather_rows(frames, &dims.channel_major())?;
        self.temporal.forward(g, by_channel, dims.t)
    }

    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        let v_t = self.temporal_stage(g, frames, dims)?;
        let idx: Vec<usize> = (0..dims.batch * dims.c)
            .map(|bc| bc * dims.t + dims.current)
            .collect();
        let current = g.gather_rows(v_t, &idx)?;
        self.spatial.forward(g, current, dims.c)
    }
}

impl Module for DstMamba {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("temporal", &self.temporal, f);
        visit_child("spatial", &self.spatial, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("temporal", &mut self.temporal, f);
        visit_child_mut("spatial", &mut self.spatial, f);
    }
}

/// Joint space-time arrangement.
#[derive(Clone, Debug)]
pub struct JstMamba {
    pub block: BiMamba,
    pub te: TemporalEmbedding,
}

impl JstMamba {
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        check_width(dims, &self.block)?;
        if dims.t > self.te.t_max() {
            return Err(Error::InvalidArgument(format!(
                "{} frames exceed the temporal embedding's t_max {}",
                dims.t,
                self.te.t_max()
            )));
        }
        let te = g.param(&self.te.table);
        let frame_of_row: Vec<usize> = (0..dims.rows()).map(|r| (r / dims.c) % dims.t).collect();
        let te_rows = g.gather_rows(te, &frame_of_row)?;
        let tokens = g.add(frames, te_rows)?;
        let y = self.block.forward(g, tokens, dims.t * dims.c)?;
        g.gather_rows(y, &dims.current_rows())
    }
}

impl Module for JstMamba {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("block", &self.block, f);
        f("te", &self.te.table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("block", &mut self.block, f);
        f("te", &mut self.te.table);
    }
}

#[derive(Clone, Debug)]
pub enum Extractor {
    T(TMamba),
    Dst(DstMamba),
    Jst(JstMamba),
}

impl Extractor {
    pub fn init<R: Rng + ?Sized>(gran: Granularity, cfg: &ContextConfig, rng: &mut R) -> Self {
        let m = cfg.mamba();
        match gran {
            Granularity::T => Extractor::T(TMamba {
                block: BiMamba::init(&m, rng),
            }),
            Granularity::Dst => Extractor::Dst(DstMamba {
                temporal: BiMamba::init(&m, rng),
                spatial: BiMamba::init(&m, rng),
            }),
            Granularity::Jst => Extractor::Jst(JstMamba {
                block: BiMamba::init(&m, rng),
                te: TemporalEmbedding::init(cfg.t_max, cfg.d_model, rng),
            }),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            Extractor::T(_) => Granularity::T,
            Extractor::Dst(_) => Granularity::Dst,
            Extractor::Jst(_) => Granularity::Jst,
        }
    }

    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Var> {
        match self {
            Extractor::T(m) => m.forward(g, frames, dims),
            Extractor::Dst(m) => m.forward(g, frames, dims),
            Extractor::Jst(m) => m.forward(g, frames, dims),
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            Extractor::T(m) => m,
            Extractor::Dst(m) => m,
            Extractor::Jst(m) => m,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module {
        match self {
            Extractor::T(m) => m,
            Extractor::Dst(m) => m,
            Extractor::Jst(m) => m,
        }
    }
}

impl Module for Extractor {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.module().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.module_mut().visit_mut(f)
    }
}

/// Which contexts to extract and the block dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextConfig {
    pub frames: usize,
    pub low_stride: usize,
    pub granularities: Vec<Granularity>,
    pub branches: Vec<Branch>,
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub t_max: usize,
    pub mamba_template: Option<MambaConfig>,
}

impl ContextConfig {
    pub fn new(frames: usize, d_model: usize) -> Self {
        Self {
            frames,
            low_stride: 2,
            granularities: Granularity::ALL.to_vec(),
            branches: Branch::ALL.to_vec(),
            d_model,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            t_max: frames.max(8),
            mamba_template: None,
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        let mut m = self.mamba_template.clone().unwrap_or_else(|| MambaConfig::new(self.d_model));
        m.d_model = self.d_model;
        m.d_state = self.d_state;
        m.d_conv = self.d_conv;
        m.expand = self.expand;
        m
    }

    /// Enabled `(branch, granularity)` pairs in canonical order: branches
    /// outer (high, low), granularities inner (T, DST, JST).
    pub fn pairs(&self) -> Vec<(Branch, Granularity)> {
        let mut out = Vec::new();
        for b in Branch::ALL {
            if !self.branches.contains(&b) {
                continue;
            }
            for gr in Granularity::ALL {
                if self.granularities.contains(&gr) {
                    out.push((b, gr));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs().is_empty() {
            return Err(Error::Config("no granularity x branch enabled".into()));
        }
        if self.frames == 0 || self.low_stride == 0 {
            return Err(Error::Config("frames and low_stride must be >= 1".into()));
        }
        if self.frames > self.t_max {
            return Err(Error::Config(format!(
                "frames {} exceed t_max {}",
                self.frames, self.t_max
            )));
        }
        self.mamba().validate()
    }

    pub fn stride(&self, branch: Branch) -> usize {
        match branch {
            Branch::High => 1,
            Branch::Low => self.low_stride,
        }
    }
}

/// All enabled extractors, each with its own parameters.
#[derive(Clone, Debug)]
pub struct ContextMamba {
    pub cfg: ContextConfig,
    pub extractors: Vec<(Branch, Extractor)>,
}

impl ContextMamba {
    pub fn init<R: Rng + ?Sized>(cfg: &ContextConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let extractors = cfg
            .pairs()
            .into_iter()
            .map(|(b, gr)| (b, Extractor::init(gr, cfg, rng)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            extractors,
        })
    }

    pub fn len(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extractors.is_empty()
    }

    pub fn labels(&self) -> Vec<(Branch, Granularity)> {
        self.extractors
            .iter()
            .map(|(b, e)| (*b, e.granularity()))
            .collect()
    }

    /// One `(batch * C) x D` var per enabled pair, in canonical order.
    pub fn forward(&self, g: &mut Graph, frames: Var, dims: BatchDims) -> Result<Vec<Var>> {
        let mut per_branch: Vec<(Branch, Var, BatchDims)> = Vec::new();
        let mut out = Vec::with_capacity(self.extractors.len());
        for (branch, ex) in &self.extractors {
            let (v, d) = match per_branch.iter().find(|(b, _, _)| b == branch) {
                Some(&(_, v, d)) => (v, d),
                None => {
                    let (v, d) = resample_batch(g, frames, dims, self.cfg.stride(*branch))?;
                    per_branch.push((*branch, v, d));
                    (v, d)
                }
            };
            out.push(ex.forward(g, v, d)?);
        }
        Ok(out)
    }

    /// Runs every enabled extractor on a single video.
    pub fn extract(&self, video: &VideoFeatures) -> Result<Vec<ContextFeature>> {
        let mut g = Graph::new();
        let frames = g.constant(video.tokens());
        let vars = self.forward(&mut g, frames, video.dims())?;
        Ok(vars
            .into_iter()
            .zip(self.labels())
            .map(|(v, (branch, granularity))| ContextFeature {
                map: g.value(v).clone(),
                granularity,
                branch,
            })
            .collect())
    }
}

impl Module for ContextMamba {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (b, ex) in &self.extractors {
            visit_child(&format!("{}.{}", b.name(), ex.granularity().name()), ex, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (b, ex) in &mut self.extractors {
            let prefix = format!("{}.{}", b.name(), ex.granularity().name());
            visit_child_mut(&prefix, ex, f);
        }
    }
}

fn single<F>(video: &VideoFeatures, gran: Granularity, f: F) -> Result<ContextFeature>
where
    F: FnOnce(&mut Graph, Var, BatchDims) -> Result<Var>,
{
    let mut g = Graph::new();
    let frames = g.constant(video.tokens());
    let y = f(&mut g, frames, video.dims())?;
    Ok(ContextFeature {
        map: g.value(y).clone(),
        granularity: gran,
        branch: Branch::High,
    })
}

pub fn t_mamba(video: &VideoFeatures, block: &TMamba) -> Result<ContextFeature> {
    single(video, Granularity::T, |g, x, d| block.forward(g, x, d))
}

pub fn dst_mamba(video: &VideoFeatures, block: &DstMamba) -> Result<ContextFeature> {
    single(video, Granularity::Dst, |g, x, d| block.forward(g, x, d))
}

pub fn jst_mamba(video: &VideoFeatures, block: &JstMamba) -> Result<ContextFeature> {
    single(video, Granularity::Jst, |g, x, d| block.forward(g, x, d))
}

/// Extracts every enabled context for one video.
pub fn extract_contexts(video: &VideoFeatures, model: &ContextMamba) -> Result<Vec<ContextFeature>> {
    model.extract(video)
}
