//! A desk-scale localization task that needs temporal context.
//!
//! Every clip is `t` frames of `C` patch intensities on a raster that wraps
//! around. One target and `K` distractors are bright. Distractors never
//! move. In the moving configuration the target travels at a constant
//! nonzero velocity and has the same brightness as the distractors, so the
//! current frame alone cannot tell them apart. In the static configuration
//! the target stands still and is brighter by `margin`, which a frame-only
//! model can pick up. The label is the target's channel at the current
//! (last) frame.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::context::VideoFeatures;
use crate::error::{Error, Result};
use crate::model::{Batch, FrozenBackboneStub};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Motion {
    #[default]
    Moving,
    Static,
}

impl Motion {
    pub fn name(self) -> &'static str {
        match self {
            Motion::Moving => "moving",
            Motion::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "moving" => Ok(Motion::Moving),
            "static" => Ok(Motion::Static),
            other => Err(Error::Config(format!("unknown motion `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub channels: usize,
    pub d_model: usize,
    pub distractors: usize,
    pub motion: Motion,
    /// Target brightness above distractors (static) and minimum per-frame
    /// displacement energy of the target (moving).
    pub margin: f64,
    pub noise: f64,
    pub max_speed: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub stub_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            channels: 16,
            d_model: 32,
            distractors: 6,
            motion: Motion::Moving,
            margin: 0.5,
            noise: 0.05,
            max_speed: 2,
            train_size: 2000,
            test_size: 500,
            stub_seed: 0x5eed,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config("the task needs at least 2 channels".into()));
        }
        if self.frames == 0 || self.train_size == 0 || self.test_size == 0 || self.d_model == 0 {
            return Err(Error::Config("frames, d_model and dataset sizes must be >= 1".into()));
        }
        if self.motion == Motion::Moving && (self.max_speed == 0 || self.frames < 2) {
            return Err(Error::Config("a moving target needs max_speed >= 1 and >= 2 frames".into()));
        }
        // trace positions must be distinct, and distractors need free cells
        let trace_len = match self.motion {
            Motion::Moving => self.frames,
            Motion::Static => 1,
        };
        if self.max_speed * (self.frames - 1) >= self.channels && self.motion == Motion::Moving {
            return Err(Error::Config("target path wraps onto itself".into()));
        }
        if trace_len + self.distractors > self.channels {
            return Err(Error::Config(format!(
                "{} distractors do not fit beside a {trace_len}-cell path in {} channels",
                self.distractors, self.channels
            )));
        }
        if !(self.margin > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("margin must be > 0 and noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub video: VideoFeatures,
    pub label: usize,
    /// Target channel per frame.
    pub trace: Vec<usize>,
    pub distractors: Vec<usize>,
    /// Raw `t x C` intensities fed to the stub.
    pub intensity: Vec<f64>,
}

impl SyntheticSample {
    /// Target-over-distractor signal under the sample's motion regime:
    /// brightness gap for a static target, frame-to-frame displacement
    /// energy gap for a moving one.
    pub fn signal_margin(&self, motion: Motion) -> f64 {
        let c = self.intensity.len() / self.trace.len();
        let at = |f: usize, ch: usize| self.intensity[f * c + ch];
        let last = self.trace.len() - 1;
        match motion {
            Motion::Static => {
                let target = at(last, self.label);
                let best = self.distractors.iter().map(|&d| at(last, d)).fold(f64::MIN, f64::max);
                target - best
            }
            Motion::Moving => {
                let var = |ch: usize| -> f64 {
                    (1..self.trace.len()).map(|f| (at(f, ch) - at(f - 1, ch)).abs()).sum()
                };
                let target = var(self.trace[last]);
                let best = self.distractors.iter().map(|&d| var(d)).fold(0.0, f64::max);
                target - best
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    /// FNV-style fold over every sample's feature bits and label.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.train.iter().chain(&self.test) {
            h ^= s.video.frames.checksum();
            h = h.wrapping_mul(0x0100_0000_01b3);
            h ^= s.label as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

fn sample_one(cfg: &SyntheticConfig, stub: &FrozenBackboneStub, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let (t, c) = (cfg.frames, cfg.channels);
    let start = rng.random_range(0..c);
    let trace: Vec<usize> = match cfg.motion {
        Motion::Static => vec![start; t],
        Motion::Moving => {
            let speed = rng.random_range(1..=cfg.max_speed) as i64;
            let v = if rng.random_bool(0.5) { speed } else { -speed };
            (0..t)
                .map(|f| (start as i64 + v * f as i64).rem_euclid(c as i64) as usize)
                .collect()
        }
    };
    let free: Vec<usize> = (0..c).filter(|ch| !trace.contains(ch)).collect();
    let distractors: Vec<usize> = sample_indices(rng, free.len(), cfg.distractors)
        .into_iter()
        .map(|i| free[i])
        .collect();
    let target_level = match cfg.motion {
        Motion::Static => 1.0 + cfg.margin,
        Motion::Moving => 1.0,
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut intensity = vec![0.0; t * c];
    for f in 0..t {
        for &d in &distractors {
            intensity[f * c + d] = 1.0;
        }
        intensity[f * c + trace[f]] = target_level;
    }
    for v in intensity.iter_mut() {
        *v += noise.sample(rng);
    }
    let frames = stub.encode(&intensity, t)?;
    Ok(SyntheticSample {
        video: VideoFeatures::new(frames, t - 1)?,
        label: trace[t - 1],
        trace,
        distractors,
        intensity,
    })
}

/// The stub used for a config.
pub fn stub_for(cfg: &SyntheticConfig) -> FrozenBackboneStub {
    FrozenBackboneStub::new(cfg.channels, cfg.d_model, cfg.stub_seed)
}

/// Train and test splits drawn from separate streams of the same seed.
pub fn generate_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let stub = stub_for(cfg);
    let split = |stream: u64, n: usize| -> Result<Vec<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n).map(|_| sample_one(cfg, &stub, &mut rng)).collect()
    };
    Ok(Dataset {
        train: split(1, cfg.train_size)?,
        test: split(2, cfg.test_size)?,
    })
}

pub fn batch_of(samples: &[&SyntheticSample]) -> Result<Batch> {
    let videos: Vec<&VideoFeatures> = samples.iter().map(|s| &s.video).collect();
    Batch::from_videos(&videos, samples.iter().map(|s| s.label).collect())
}
