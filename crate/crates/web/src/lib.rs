//! Browser bindings for the demo page in `www/`.
//!
//! Everything returns flat numeric arrays or small getter structs so the
//! page needs no serialization layer.

use hmba::costmodel::{count_flops, CostDims, CostModule};
use hmba::ssm::zoh_discretize;
use hmba::synthetic::{generate_dataset, Motion, SyntheticConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: hmba::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Impulse response `h_k = Ā^k B̄` of a scalar SSM with `A = -exp(a_log)`
/// discretized at step `delta`, for `k = 0..len`.
#[wasm_bindgen]
pub fn impulse_response(a_log: f64, delta: f64, len: usize) -> Result<Vec<f64>, JsError> {
    if !(delta > 0.0) {
        return Err(JsError::new("delta must be positive"));
    }
    let (a_bar, b_bar) = zoh_discretize(&[-a_log.exp()], &[1.0], &[delta]).map_err(js_err)?;
    let mut h = b_bar[0];
    Ok((0..len)
        .map(|_| {
            let out = h;
            h *= a_bar[0];
            out
        })
        .collect())
}

/// Names accepted by [`flops_curve`].
#[wasm_bindgen]
pub fn module_names() -> Vec<String> {
    CostModule::ALL.iter().map(|m| m.name().to_string()).collect()
}

/// Forward GFLOPs of `module` for clip lengths `1..=t_max`.
#[wasm_bindgen]
pub fn flops_curve(module: &str, c: usize, d: usize, t_max: usize) -> Result<Vec<f64>, JsError> {
    let module = CostModule::parse(module).map_err(js_err)?;
    (1..=t_max)
        .map(|t| {
            let dims = CostDims { t_max, ..CostDims::new(t, c, d) };
            count_flops(module, &dims).map(|r| r.flops() as f64 / 1e9).map_err(js_err)
        })
        .collect()
}

/// Parameter count of `module` at the given sizes.
#[wasm_bindgen]
pub fn module_params(module: &str, t: usize, c: usize, d: usize) -> Result<f64, JsError> {
    let module = CostModule::parse(module).map_err(js_err)?;
    count_flops(module, &CostDims::new(t, c, d)).map(|r| r.params as f64).map_err(js_err)
}

/// One clip of the moving-target task, as raw intensities.
#[wasm_bindgen]
pub struct Clip {
    frames: usize,
    channels: usize,
    intensity: Vec<f64>,
    trace: Vec<u32>,
    distractors: Vec<u32>,
}

#[wasm_bindgen]
impl Clip {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `frames x channels`.
    #[wasm_bindgen(getter)]
    pub fn intensity(&self) -> Vec<f64> {
        self.intensity.clone()
    }

    /// Target channel per frame; the label is the last entry.
    #[wasm_bindgen(getter)]
    pub fn trace(&self) -> Vec<u32> {
        self.trace.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn distractors(&self) -> Vec<u32> {
        self.distractors.clone()
    }
}

/// Draws a clip with the default task sizes. `moving = false` gives the
/// static control, where the target is simply the brightest channel.
#[wasm_bindgen]
pub fn synthetic_clip(seed: u64, moving: bool, noise: f64) -> Result<Clip, JsError> {
    let cfg = SyntheticConfig {
        motion: if moving { Motion::Moving } else { Motion::Static },
        noise,
        train_size: 1,
        test_size: 1,
        ..SyntheticConfig::default()
    };
    let ds = generate_dataset(&cfg, seed).map_err(js_err)?;
    let s = &ds.train[0];
    Ok(Clip {
        frames: cfg.frames,
        channels: cfg.channels,
        intensity: s.intensity.clone(),
        trace: s.trace.iter().map(|&c| c as u32).collect(),
        distractors: s.distractors.iter().map(|&c| c as u32).collect(),
    })
}
