//! Attention cost per (variant, frame count): closed-form pair counts and
//! multiply-adds, the same quantities as counted by the kernel during a
//! real forward pass, cache size and wall time.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::frame_attention::{frame_pair_count, FrameLayout, MaskVariant};
use crate::model::{GPDiTModel, ModelConfig, ModelError, TokenSequence};
use crate::rng;
use crate::tensor::{Float, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: MaskVariant,
    pub frames: usize,
    /// Frame pairs of one training layout (one layer).
    pub pairs_closed: u64,
    pub pairs_counted: u64,
    /// Attention multiply-adds of one forward over all layers and heads.
    pub macs_closed: u64,
    pub macs_counted: u64,
    /// Key/value cache size for `frames` clean frames at 32-bit.
    pub cache_bytes: usize,
    /// Wall time of one training-layout forward pass.
    pub forward_ms: f64,
}

impl BenchRow {
    pub fn counts_agree(&self) -> bool {
        self.pairs_closed == self.pairs_counted && self.macs_closed == self.macs_counted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn all_agree(&self) -> bool {
        self.rows.iter().all(BenchRow::counts_agree)
    }

    /// Lightweight/vanilla pair ratio at `frames`, if both were measured.
    pub fn pair_ratio(&self, frames: usize) -> Option<f64> {
        let get = |v| self.rows.iter().find(|r| r.variant == v && r.frames == frames).map(|r| r.pairs_counted as f64);
        Some(get(MaskVariant::Lightweight)? / get(MaskVariant::Vanilla)?)
    }

    /// CSV without wall times, so identical inputs give identical bytes.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("variant,frames,pairs_closed,pairs_counted,macs_closed,macs_counted,cache_bytes");
        s.push_str(if with_timing { ",forward_ms\n" } else { "\n" });
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{},{}", r.variant, r.frames, r.pairs_closed, r.pairs_counted, r.macs_closed, r.macs_counted, r.cache_bytes));
            if with_timing {
                s.push_str(&format!(",{:.3}", r.forward_ms));
            }
            s.push('\n');
        }
        s
    }
}

/// Closed-form attention multiply-adds of one training forward pass.
pub fn closed_form_macs(cfg: &ModelConfig, variant: MaskVariant, frames: usize) -> u64 {
    let p = cfg.tokens_per_frame() as u64;
    frame_pair_count(variant, frames as u64).total * 2 * p * p * cfg.hidden as u64 * cfg.layers as u64
}

/// Floats held by a key/value cache after `frames` clean frames.
pub fn cache_floats(cfg: &ModelConfig, frames: usize) -> usize {
    2 * cfg.layers * frames * cfg.tokens_per_frame() * cfg.hidden
}

fn measure<T: Float>(model: &GPDiTModel<T>, frames: usize, seed: u64) -> Result<(u64, u64, f64), ModelError> {
    let cfg = model.config();
    let layout = FrameLayout::training(frames, cfg.tokens_per_frame())?;
    let shape = [layout.len(), cfg.token_dim()];
    let tokens = rng::normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let seq = TokenSequence { segments: layout.segments().to_vec(), tokens, time: 0.5, drop_context: false };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let started = Instant::now();
    let pass = model.forward(&mut tape, &b, &[seq], None)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((pass.stats.frame_pairs / cfg.layers.max(1) as u64, pass.stats.macs, ms))
}

/// One row per `(variant, F)`. The model is initialised from `seed` once
/// per variant; only its geometry matters for the counts.
pub fn run_bench(cfg: &ModelConfig, variants: &[MaskVariant], frames: &[usize], seed: u64) -> Result<BenchReport, ModelError> {
    if let Some(&f) = frames.iter().find(|&&f| f == 0) {
        return Err(ModelError::Config(format!("frame count must be at least 1, got {f}")));
    }
    let mut rows = Vec::new();
    for &v in variants {
        let mc = ModelConfig { variant: v, ..cfg.clone() };
        let model = GPDiTModel::<f32>::init(mc.clone(), seed, false)?;
        for &f in frames {
            let (pairs, macs, ms) = measure(&model, f, seed)?;
            rows.push(BenchRow {
                variant: v,
                frames: f,
                pairs_closed: frame_pair_count(v, f as u64).total,
                pairs_counted: pairs,
                macs_closed: closed_form_macs(&mc, v, f),
                macs_counted: macs,
                cache_bytes: cache_floats(&mc, f) * std::mem::size_of::<f32>(),
                forward_ms: ms,
            });
        }
    }
    Ok(BenchReport { model: cfg.clone(), rows })
}
