//! Diffusion training with one shared time per sequence, context dropout
//! and Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LatentVideo;
use crate::frame_attention::{FrameLayout, MaskVariant};
use crate::model::{GPDiTModel, ModelConfig, ModelError, TokenSequence};
use crate::rng;
use crate::schedule::{theta_of, NoiseSchedule, Parameterization};
use crate::tensor::{Float, Tape, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("video {index} does not match the model geometry: {msg}")]
    Geometry { index: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Probability of training a sequence without its context.
    pub p_drop: f64,
    /// 32 or 64.
    pub precision: u32,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub t_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 16, steps: 2000, p_drop: 0.1, precision: 32, seed: 0, checkpoint_every: 0, t_min: 0.001 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.precision != 32 && self.precision != 64 {
            return bad(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return bad(format!("t_min {} outside [0, 1)", self.t_min));
        }
        Ok(())
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let z = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Self { m: params.iter().map(z).collect(), v: params.iter().map(z).collect(), step: 0 }
    }
}

/// One bias-corrected Adam update at 1-based step `step`.
pub fn adam_update<T: Float>(param: &mut Tensor<T>, grad: &Tensor<T>, m: &mut Tensor<T>, v: &mut Tensor<T>, step: u64, lr: f64) -> Result<(), TrainError> {
    for t in [grad, &*m, &*v] {
        if t.shape() != param.shape() {
            return Err(TensorError::Shape { op: "adam", left: param.shape().to_vec(), right: t.shape().to_vec() }.into());
        }
    }
    let f = T::from_f64_lossy;
    let (b1, b2, eps) = (f(ADAM_BETA1), f(ADAM_BETA2), f(ADAM_EPS));
    let c1 = f(1.0 - ADAM_BETA1.powf(step as f64));
    let c2 = f(1.0 - ADAM_BETA2.powf(step as f64));
    let lr = f(lr);
    let it = param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
    for ((p, &g), (mi, vi)) in it {
        *mi = b1 * *mi + (T::one() - b1) * g;
        *vi = b2 * *vi + (T::one() - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Float> {
    pub model: GPDiTModel<T>,
    pub adam: AdamState<T>,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl<T: Float> TrainState<T> {
    pub fn new(model: GPDiTModel<T>) -> Self {
        let adam = AdamState::new(model.params());
        Self { model, adam, step: 0, losses: Vec::new() }
    }
}

/// A training sequence with its regression target.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub sequence: TokenSequence<T>,
    /// `[F·P × token_dim]` in noisy-frame order.
    pub target: Tensor<T>,
}

/// Draws `t`, the per-frame noise and the dropout flag for one video.
/// `counter` keys the random streams so every sample is reproducible alone.
pub fn prepare_sample<T: Float>(model: &GPDiTModel<T>, video: &LatentVideo, cfg: &TrainConfig, counter: u64) -> Result<PreparedSample<T>, TrainError> {
    let mc = model.config();
    let g = mc.geometry();
    if video.geometry.channels != g.channels || video.geometry.height != g.height || video.geometry.width != g.width {
        return Err(TrainError::Geometry { index: counter as usize, msg: format!("{:?} vs {g:?}", video.geometry) });
    }
    let frames = video.geometry.frames;
    let mut noise = rng::stream(cfg.seed, "noise", counter);
    let schedule = NoiseSchedule { t_min: cfg.t_min, t_max: 1.0 };
    let t = schedule.time_from_uniform(noise.random::<f64>());
    let a = theta_of(t).map_err(ModelError::from)?;
    let (c, s) = (T::from_f64_lossy(a.cos), T::from_f64_lossy(a.sin));
    let drop_context = rng::stream(cfg.seed, "dropout", counter).random::<f64>() < cfg.p_drop;

    let (p, td) = (mc.tokens_per_frame(), mc.token_dim());
    let mut tokens = Vec::with_capacity(2 * frames * p * td);
    let mut target = Vec::with_capacity(frames * p * td);
    for f in 0..frames {
        let pixels: Vec<T> = video.frame(f).iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
        let x0 = model.tokens_of(&[&pixels])?;
        let eps = rng::normal_tensor::<T>(&mut noise, &[p, td]);
        tokens.extend_from_slice(x0.data());
        tokens.extend(x0.data().iter().zip(eps.data()).map(|(&x, &e)| c * x + s * e));
        match mc.param {
            Parameterization::Companion => target.extend(x0.data().iter().zip(eps.data()).map(|(&x, &e)| c * e - s * x)),
            Parameterization::Epsilon => target.extend_from_slice(eps.data()),
        }
    }
    let layout = FrameLayout::training(frames, p).map_err(ModelError::from)?;
    Ok(PreparedSample {
        sequence: TokenSequence { segments: layout.segments().to_vec(), tokens: Tensor::new([2 * frames * p, td], tokens)?, time: t, drop_context },
        target: Tensor::new([frames * p, td], target)?,
    })
}

/// Loss and gradients on prepared samples without touching the state.
pub fn loss_and_grads<T: Float>(
    model: &GPDiTModel<T>,
    batch: &[PreparedSample<T>],
) -> Result<(f64, Vec<Tensor<T>>, crate::frame_attention::AttentionStats), TrainError> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let seqs: Vec<TokenSequence<T>> = batch.iter().map(|s| s.sequence.clone()).collect();
    let pass = model.forward(&mut tape, &binding, &seqs, None)?;
    let mut target = Vec::with_capacity(batch.iter().map(|s| s.target.numel()).sum());
    for s in batch {
        target.extend_from_slice(s.target.data());
    }
    let pred = pass.prediction.ok_or_else(|| TrainError::Config("batch has no noisy frames".into()))?;
    let target = tape.constant(Tensor::new(tape.value(pred).shape().to_vec(), target)?);
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0].to_f64_lossy();
    let mut grads = tape.backward(loss)?;
    let grads = binding.0.iter().zip(model.params()).map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))).collect();
    Ok((value, grads, pass.stats))
}

/// Mean squared error on prepared samples followed by one Adam step.
pub fn train_step<T: Float>(state: &mut TrainState<T>, batch: &[PreparedSample<T>], lr: f64) -> Result<f64, TrainError> {
    let (loss, grads, _) = loss_and_grads(&state.model, batch)?;
    apply_step(state, loss, &grads, lr)
}

fn apply_step<T: Float>(state: &mut TrainState<T>, loss: f64, grads: &[Tensor<T>], lr: f64) -> Result<f64, TrainError> {
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(TrainError::Diverged { step: state.step + 1 });
    }
    state.adam.step += 1;
    let step = state.adam.step;
    let AdamState { m, v, .. } = &mut state.adam;
    for (((p, g), m), v) in state.model.params_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        adam_update(p, g, m, v, step, lr)?;
    }
    state.step += 1;
    state.losses.push(loss);
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub variant: MaskVariant,
    pub lr: f64,
    pub wall_ms: f64,
    /// Hash of the step's inputs (tokens, targets, dropout flags).
    pub batch_digest: String,
    pub attention_pairs: u64,
    pub attention_macs: u64,
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// File stem prefix, e.g. `"of2_"` in paired runs.
    pub prefix: String,
}

impl OutputSpec {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}{name}", self.prefix))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Index order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "shuffle", epoch));
    idx
}

fn batch_digest<T: Float>(batch: &[PreparedSample<T>]) -> String {
    let flags = Tensor::<T>::from_fn(vec![batch.len()], |i| if batch[i].sequence.drop_context { T::one() } else { T::zero() });
    let h = rng::digest(batch.iter().flat_map(|s| [&s.sequence.tokens, &s.target]).chain([&flags]));
    format!("{h:016x}")
}

/// Runs `cfg.steps` steps over `dataset` in seeded epoch order.
///
/// With `out` set, metrics go to `<prefix>metrics.jsonl` line by line and
/// checkpoints to `<prefix>step_<n>.ckpt` / `<prefix>final.ckpt`. On
/// divergence the error is returned and earlier checkpoints stay on disk.
pub fn fit<T: Float>(
    dataset: &[LatentVideo],
    state: TrainState<T>,
    cfg: &TrainConfig,
    out: Option<&OutputSpec>,
    mut on_step: impl FnMut(&MetricRecord),
) -> Result<(TrainState<T>, Vec<MetricRecord>), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let mut state = state;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut writer = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
            let p = o.path("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(io_err(&p))?), p))
        }
        None => None,
    };
    let mut order = Vec::new();
    let mut cursor = 0usize;
    let start_step = state.step;
    for step in start_step..start_step + cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch);
        for k in 0..cfg.batch {
            let global = step * cfg.batch + k;
            let (epoch, pos) = (global / dataset.len(), global % dataset.len());
            if cursor != epoch + 1 {
                order = epoch_order(cfg.seed, epoch as u64, dataset.len());
                cursor = epoch + 1;
            }
            batch.push(prepare_sample(&state.model, &dataset[order[pos]], cfg, global as u64)?);
        }
        let digest = batch_digest(&batch);
        let (loss, grads, stats) = loss_and_grads(&state.model, &batch)?;
        apply_step(&mut state, loss, &grads, cfg.lr)?;
        let record = MetricRecord {
            step: state.step,
            loss,
            variant: state.model.config().variant,
            lr: cfg.lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            batch_digest: digest,
            attention_pairs: stats.frame_pairs,
            attention_macs: stats.macs,
        };
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(p))?;
        }
        on_step(&record);
        log.push(record);
        if let (Some(o), true) = (out, cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every)) {
            state.model.save(&o.path(&format!("step_{}.ckpt", state.step)))?;
        }
    }
    if let Some(o) = out {
        state.model.save(&o.path("final.ckpt"))?;
    }
    Ok((state, log))
}

/// Trains the same initial weights under both mask variants with identical
/// data order and noise. Returns `(vanilla, lightweight)`.
#[allow(clippy::type_complexity)]
pub fn fit_paired<T: Float>(
    dataset: &[LatentVideo],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&MetricRecord),
) -> Result<[(TrainState<T>, Vec<MetricRecord>); 2], TrainError> {
    let base = GPDiTModel::<T>::new(model_cfg.clone(), cfg.seed)?;
    let run = |variant: MaskVariant, on_step: &mut dyn FnMut(&MetricRecord)| {
        let out = out_dir.map(|d| OutputSpec { dir: d.to_path_buf(), prefix: format!("{variant}_") });
        fit(dataset, TrainState::new(base.with_variant(variant)), cfg, out.as_ref(), on_step)
    };
    let a = run(MaskVariant::Vanilla, &mut on_step)?;
    let b = run(MaskVariant::Lightweight, &mut on_step)?;
    Ok([a, b])
}
