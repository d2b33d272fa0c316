//! Frame-by-frame generation: each new frame starts from seeded noise and
//! is denoised on a uniform time grid, optionally with classifier-free
//! guidance, then joins the context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_attention::{AttentionStats, KVCache};
use crate::model::{GPDiTModel, ModelError};
use crate::rng;
use crate::schedule::{denoise_step, Parameterization, ScheduleError};
use crate::tensor::{Float, Tensor};

/// First grid time for the epsilon head: at `t = 1` the clean estimate
/// divides by `cos θ = 0`.
pub const EPSILON_START_TIME: f64 = 0.999;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("non-finite values while denoising frame {frame} at step {step}")]
    Diverged { frame: usize, step: usize },
    #[error("prediction shape {got:?} differs from {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Denoising steps per frame.
    pub steps: usize,
    /// Guidance scale `w`; 1 disables the unconditional branch.
    pub guidance: f64,
    /// Frames to generate after the context.
    pub frames: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 2.0, frames: 1, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Config("steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(SamplerError::Config(format!("guidance {} must be finite and non-negative", self.guidance)));
        }
        Ok(())
    }
}

/// `uncond + w·(cond − uncond)`, exact at `w ∈ {0, 1}`.
pub fn cfg_combine<T: Float>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>, SamplerError> {
    if cond.shape() != uncond.shape() {
        return Err(SamplerError::Shape { expected: cond.shape().to_vec(), got: uncond.shape().to_vec() });
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let w = T::from_f64_lossy(w);
    Ok(cond.zip_map(uncond, "cfg", |c, u| u + w * (c - u)).expect("shapes checked"))
}

/// Anything that predicts a noisy frame from accepted clean frames.
/// Frames are patch tokens `[P × token_dim]`.
pub trait FramePredictor<T: Float> {
    fn parameterization(&self) -> Parameterization;

    /// Number of clean frames accepted so far.
    fn context_len(&self) -> usize;

    fn predict(&mut self, frame: usize, x_t: &Tensor<T>, t: f64, drop_context: bool) -> Result<Tensor<T>, SamplerError>;

    fn accept(&mut self, frame: usize, tokens: &Tensor<T>) -> Result<(), SamplerError>;
}

/// Incremental predictor backed by a key/value cache.
pub struct CachedPredictor<'a, T: Float> {
    pub model: &'a GPDiTModel<T>,
    pub cache: KVCache<T>,
    pub stats: AttentionStats,
}

impl<'a, T: Float> CachedPredictor<'a, T> {
    pub fn new(model: &'a GPDiTModel<T>, capacity_frames: usize) -> Self {
        Self { model, cache: model.new_cache(capacity_frames), stats: AttentionStats::default() }
    }
}

impl<T: Float> FramePredictor<T> for CachedPredictor<'_, T> {
    fn parameterization(&self) -> Parameterization {
        self.model.config().param
    }

    fn context_len(&self) -> usize {
        self.cache.frames().len()
    }

    fn predict(&mut self, frame: usize, x_t: &Tensor<T>, t: f64, drop_context: bool) -> Result<Tensor<T>, SamplerError> {
        let (p, s) = self.model.predict_cached(frame, x_t, t, &self.cache, drop_context)?;
        self.stats += s;
        Ok(p)
    }

    fn accept(&mut self, frame: usize, tokens: &Tensor<T>) -> Result<(), SamplerError> {
        self.stats += self.model.encode_tokens(frame, tokens, &mut self.cache)?;
        Ok(())
    }
}

/// Reference predictor that re-runs the whole context for every call.
pub struct RecomputePredictor<'a, T: Float> {
    pub model: &'a GPDiTModel<T>,
    pub context: Vec<Tensor<T>>,
    pub stats: AttentionStats,
}

impl<'a, T: Float> RecomputePredictor<'a, T> {
    pub fn new(model: &'a GPDiTModel<T>) -> Self {
        Self { model, context: Vec::new(), stats: AttentionStats::default() }
    }
}

impl<T: Float> FramePredictor<T> for RecomputePredictor<'_, T> {
    fn parameterization(&self) -> Parameterization {
        self.model.config().param
    }

    fn context_len(&self) -> usize {
        self.context.len()
    }

    fn predict(&mut self, frame: usize, x_t: &Tensor<T>, t: f64, drop_context: bool) -> Result<Tensor<T>, SamplerError> {
        if frame != self.context.len() {
            return Err(SamplerError::Config(format!("frame {frame} requested with {} context frames", self.context.len())));
        }
        let (p, s) = self.model.predict_recompute_tokens(&self.context, x_t, t, drop_context)?;
        self.stats += s;
        Ok(p)
    }

    fn accept(&mut self, frame: usize, tokens: &Tensor<T>) -> Result<(), SamplerError> {
        if frame != self.context.len() {
            return Err(SamplerError::Config(format!("frame {frame} accepted after {} frames", self.context.len())));
        }
        self.context.push(tokens.clone());
        Ok(())
    }
}

/// Decreasing times `t_0 > … > t_steps = 0`, uniform in `j/steps`.
pub fn time_grid(steps: usize, param: Parameterization) -> Vec<f64> {
    let start = match param {
        Parameterization::Companion => 1.0,
        Parameterization::Epsilon => EPSILON_START_TIME,
    };
    (0..=steps).map(|j| if j == steps { 0.0 } else { start * (1.0 - j as f64 / steps as f64) }).collect()
}

/// Initial noise of frame `frame`, from its own stream.
pub fn frame_noise<T: Float>(seed: u64, frame: usize, shape: &[usize]) -> Tensor<T> {
    rng::normal_tensor(&mut rng::stream(seed, "noise", frame as u64), shape)
}

/// Denoises frame `frame` (which must be the next one after the accepted
/// context) and returns its tokens. `shape` is `[P, token_dim]`.
pub fn denoise_frame<T: Float>(pred: &mut dyn FramePredictor<T>, frame: usize, shape: &[usize], cfg: &SamplerConfig) -> Result<Tensor<T>, SamplerError> {
    cfg.validate()?;
    let param = pred.parameterization();
    let grid = time_grid(cfg.steps, param);
    // Pure noise stands in for the first grid time for both heads.
    let mut x: Tensor<T> = frame_noise(cfg.seed, frame, shape);
    let guided = cfg.guidance != 1.0 && pred.context_len() > 0;
    for (step, w) in grid.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let cond = pred.predict(frame, &x, t, false)?;
        if cond.shape() != shape {
            return Err(SamplerError::Shape { expected: shape.to_vec(), got: cond.shape().to_vec() });
        }
        let out = if guided { cfg_combine(&cond, &pred.predict(frame, &x, t, true)?, cfg.guidance)? } else { cond };
        x = denoise_step(&x, &out, param, t, s)?;
        if !x.all_finite() {
            return Err(SamplerError::Diverged { frame, step });
        }
    }
    Ok(x)
}

/// Accepts `context`, then generates `cfg.frames` frames, accepting each
/// one before generating the next.
pub fn rollout_tokens<T: Float>(
    pred: &mut dyn FramePredictor<T>,
    context: &[Tensor<T>],
    shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<T>>, SamplerError> {
    cfg.validate()?;
    for (i, c) in context.iter().enumerate() {
        pred.accept(i, c)?;
    }
    let mut out = Vec::with_capacity(cfg.frames);
    for g in 0..cfg.frames {
        let frame = context.len() + g;
        let x = denoise_frame(pred, frame, shape, cfg)?;
        pred.accept(frame, &x)?;
        out.push(x);
    }
    Ok(out)
}

/// Generated frames (pixels) plus the attention work done.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<T> {
    pub frames: Vec<Vec<T>>,
    pub stats: AttentionStats,
    pub cached_frames: usize,
}

/// Pixel-space rollout. With `cached = false` every prediction recomputes
/// the full context; the cache holds `context + frames` frames.
pub fn rollout<T: Float>(model: &GPDiTModel<T>, context: &[&[T]], cfg: &SamplerConfig, cached: bool) -> Result<Rollout<T>, SamplerError> {
    rollout_with_capacity(model, context, cfg, cached, context.len() + cfg.frames)
}

pub fn rollout_with_capacity<T: Float>(
    model: &GPDiTModel<T>,
    context: &[&[T]],
    cfg: &SamplerConfig,
    cached: bool,
    capacity: usize,
) -> Result<Rollout<T>, SamplerError> {
    let mc = model.config();
    let geometry = mc.geometry();
    let shape = [mc.tokens_per_frame(), mc.token_dim()];
    let ctx = context.iter().map(|c| model.tokens_of(&[c])).collect::<Result<Vec<_>, _>>()?;
    let (tokens, stats, cached_frames) = if cached {
        let mut p = CachedPredictor::new(model, capacity);
        let out = rollout_tokens(&mut p, &ctx, &shape, cfg)?;
        (out, p.stats, p.cache.frames().len())
    } else {
        let mut p = RecomputePredictor::new(model);
        let out = rollout_tokens(&mut p, &ctx, &shape, cfg)?;
        (out, p.stats, p.context.len())
    };
    let frames = tokens.iter().map(|t| crate::model::unpatchify(t, &geometry)).collect::<Result<Vec<_>, _>>()?;
    Ok(Rollout { frames, stats, cached_frames })
}
