//! Self-check suite run by `gpdit verify`: small, seeded versions of the
//! structural invariants, reported as a pass/fail table.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frame_attention::{attention, build_mask, frame_pair_count, FrameLayout, FramePairCounts, MaskVariant, Segment, TokenKind};
use crate::model::{Binding, GPDiTModel, ModelConfig, TokenSequence};
use crate::rng;
use crate::sampler::{rollout, SamplerConfig};
use crate::schedule::{companion_of, denoise_step, forward_diffuse, recover, DiffusionPair, Parameterization};
use crate::tensor::{grad_check_many, Float, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Negative control: add one future edge to the mask used by the
    /// causality check, which must then fail.
    pub corrupt_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_error(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{:<width$}  {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    s
}

pub fn run_suite(opts: VerifyOptions) -> Vec<CheckResult> {
    vec![rotation_algebra(1000), mask_oracle(), pair_counts(64), attention_causality(opts.corrupt_mask), model_causality(10), cache_equivalence(), gradients()]
}

/// Round trips, pair norms and perfect-prediction one-step recovery.
pub fn rotation_algebra(cases: usize) -> CheckResult {
    const NAME: &str = "rotation algebra";
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut norm, mut step) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let t = r.random_range(0.0..=1.0);
        let x0 = Tensor::from_fn(vec![8], |_| r.random_range(-3.0..3.0));
        let eps = rng::normal_tensor::<f64>(&mut r, &[8]);
        let run = || -> Result<(f64, f64, f64), crate::schedule::ScheduleError> {
            let pair = DiffusionPair::new(x0.clone(), eps.clone())?;
            let (xt, comp) = (forward_diffuse(&pair, t)?, companion_of(&pair, t)?);
            let back = recover(&xt, &comp, t)?;
            let rt = back.x0.max_abs_diff(&x0).max(back.eps.max_abs_diff(&eps));
            let nm = (0..8)
                .map(|i| {
                    let before = x0.data()[i].hypot(eps.data()[i]);
                    (xt.data()[i].hypot(comp.data()[i]) - before).abs()
                })
                .fold(0.0, f64::max);
            let one = if t > 0.0 { denoise_step(&xt, &comp, Parameterization::Companion, t, 0.0)?.max_abs_diff(&x0) } else { 0.0 };
            Ok((rt, nm, one))
        };
        match run() {
            Ok((a, b, c)) => {
                round = round.max(a);
                norm = norm.max(b);
                step = step.max(c);
            }
            Err(e) => return CheckResult::from_error(NAME, e),
        }
    }
    let ok = round <= 1e-12 && norm <= 1e-10 && step <= 1e-10;
    CheckResult::new(NAME, ok, format!("{cases} cases: round trip {round:.1e}, norm {norm:.1e}, one-step {step:.1e}"))
}

/// Rule restated from first principles, independent of the library's.
fn rule(variant: MaskVariant, q: Segment, k: Segment) -> bool {
    use TokenKind::*;
    match (q.kind, k.kind) {
        (Clean, Noisy) => false,
        (Noisy, Noisy) => q.frame == k.frame,
        (Noisy, Clean) => k.frame < q.frame,
        (Clean, Clean) => k.frame == q.frame || (variant == MaskVariant::Vanilla && k.frame < q.frame),
    }
}

pub fn mask_oracle() -> CheckResult {
    const NAME: &str = "mask oracle";
    let mut compared = 0usize;
    for frames in 1..=6 {
        for p in [1, 4] {
            for v in MaskVariant::ALL {
                let layout = FrameLayout::training(frames, p).expect("non-empty layout");
                let mask = build_mask(&layout, v);
                for qi in 0..layout.len() {
                    for ki in 0..layout.len() {
                        let (q, k) = (layout.token(qi).unwrap(), layout.token(ki).unwrap());
                        let want = rule(v, Segment { frame: q.frame, kind: q.kind }, Segment { frame: k.frame, kind: k.kind });
                        if mask.admits(qi, ki) != want {
                            return CheckResult::new(NAME, false, format!("{v} F={frames} P={p}: token {qi} -> {ki}"));
                        }
                        compared += 1;
                    }
                }
            }
        }
    }
    CheckResult::new(NAME, true, format!("{compared} token pairs"))
}

pub fn pair_counts(max_frames: u64) -> CheckResult {
    const NAME: &str = "frame-pair counts";
    for f in 1..=max_frames {
        for v in MaskVariant::ALL {
            let closed = frame_pair_count(v, f);
            let counted = FramePairCounts::of_mask(&build_mask(&FrameLayout::training(f as usize, 1).unwrap(), v));
            let formula = match v {
                MaskVariant::Vanilla => f * f + f,
                MaskVariant::Lightweight => f * (f + 3) / 2,
            };
            if closed != counted || closed.total != formula {
                return CheckResult::new(NAME, false, format!("{v} F={f}: closed {closed:?}, counted {counted:?}"));
            }
        }
    }
    CheckResult::new(NAME, true, format!("F = 1..{max_frames}, both variants"))
}

/// Perturbs future key/value rows of a raw attention call and requires
/// every earlier query row to stay bit-identical.
pub fn attention_causality(corrupt: bool) -> CheckResult {
    const NAME: &str = "attention causality";
    let (frames, p, heads, dh) = (4, 2, 2, 3);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for v in MaskVariant::ALL {
        let layout = FrameLayout::training(frames, p).unwrap();
        let mut mask = build_mask(&layout, v);
        if corrupt {
            // Clean frame 0 reads the last clean frame.
            mask.set_block(0, 2 * (frames - 1), true);
        }
        let len = layout.len();
        let q = rng::normal_tensor::<f64>(&mut r, &[heads, len, dh]);
        let k = rng::normal_tensor::<f64>(&mut r, &[heads, len, dh]);
        let val = rng::normal_tensor::<f64>(&mut r, &[heads, len, dh]);
        let base = match attention(&q, &k, &val, &mask) {
            Ok((o, _)) => o,
            Err(e) => return CheckResult::from_error(NAME, e),
        };
        for cut in 0..frames - 1 {
            let future = |tok: usize| layout.token(tok).unwrap().frame > cut;
            let bump = |t: &Tensor<f64>, r: &mut ChaCha8Rng| {
                Tensor::from_fn(t.shape().to_vec(), |i| {
                    let x = t.data()[i];
                    if future((i / dh) % len) {
                        x + r.random_range(-1.0..1.0)
                    } else {
                        x
                    }
                })
            };
            let (k2, v2) = (bump(&k, &mut r), bump(&val, &mut r));
            let out = match attention(&q, &k2, &v2, &mask) {
                Ok((o, _)) => o,
                Err(e) => return CheckResult::from_error(NAME, e),
            };
            for i in 0..out.numel() {
                if !future((i / dh) % len) && out.data()[i] != base.data()[i] {
                    return CheckResult::new(NAME, false, format!("{v}: row {} moved when frames > {cut} changed", (i / dh) % len));
                }
            }
        }
    }
    CheckResult::new(NAME, true, format!("{frames} frames, both variants{}", if corrupt { " (corrupted mask)" } else { "" }))
}

fn small_config(variant: MaskVariant) -> ModelConfig {
    ModelConfig { layers: 2, hidden: 16, mlp: 32, heads: 2, patch: 2, channels: 1, height: 4, width: 4, variant, ..ModelConfig::desk() }
}

fn random_frames<T: Float>(cfg: &ModelConfig, n: usize, r: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    (0..n).map(|_| (0..cfg.geometry().frame_len()).map(|_| T::from_f64_lossy(r.random_range(-1.0..1.0))).collect()).collect()
}

/// Prediction rows of a training-layout forward pass.
pub fn training_prediction<T: Float>(model: &GPDiTModel<T>, clean: &[Vec<T>], noisy: &[Vec<T>], t: f64) -> Result<Tensor<T>, crate::model::ModelError> {
    let order: Vec<&[T]> = clean.iter().zip(noisy).flat_map(|(c, n)| [c.as_slice(), n.as_slice()]).collect();
    let layout = FrameLayout::training(clean.len(), model.config().tokens_per_frame())?;
    let seq = TokenSequence { segments: layout.segments().to_vec(), tokens: model.tokens_of(&order)?, time: t, drop_context: false };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let pass = model.forward(&mut tape, &b, &[seq], None)?;
    Ok(tape.value(pass.prediction.expect("training layout has noisy rows")).clone())
}

/// Perturbs random future frames of a full model and requires bit-identical
/// predictions for every earlier noisy frame.
pub fn model_causality(trials: usize) -> CheckResult {
    const NAME: &str = "model causality";
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let frames = 4;
    for v in MaskVariant::ALL {
        let cfg = small_config(v);
        let m = match GPDiTModel::<f64>::init(cfg.clone(), 4, false) {
            Ok(m) => m,
            Err(e) => return CheckResult::from_error(NAME, e),
        };
        let p = cfg.tokens_per_frame() * cfg.token_dim();
        let (clean, noisy) = (random_frames::<f64>(&cfg, frames, &mut r), random_frames::<f64>(&cfg, frames, &mut r));
        let base = match training_prediction(&m, &clean, &noisy, 0.5) {
            Ok(b) => b,
            Err(e) => return CheckResult::from_error(NAME, e),
        };
        for _ in 0..trials {
            let cut = r.random_range(0..frames - 1);
            let (mut c2, mut n2) = (clean.clone(), noisy.clone());
            for j in cut + 1..frames {
                c2[j].iter_mut().chain(n2[j].iter_mut()).for_each(|x| *x += r.random_range(-1.0..1.0));
            }
            let moved = match training_prediction(&m, &c2, &n2, 0.5) {
                Ok(x) => x,
                Err(e) => return CheckResult::from_error(NAME, e),
            };
            if moved.data()[..(cut + 1) * p] != base.data()[..(cut + 1) * p] {
                return CheckResult::new(NAME, false, format!("{v}: frames <= {cut} moved"));
            }
        }
    }
    CheckResult::new(NAME, true, format!("{trials} perturbations per variant"))
}

fn cache_gap<T: Float>(variant: MaskVariant, frames: usize) -> Result<f64, Box<dyn std::error::Error>> {
    let cfg = small_config(variant);
    let m = GPDiTModel::<f64>::init(cfg.clone(), 6, false)?.cast::<T>();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let ctx = random_frames::<T>(&cfg, 2, &mut r);
    let refs: Vec<&[T]> = ctx.iter().map(|c| c.as_slice()).collect();
    let sc = SamplerConfig { steps: 3, frames: frames - 2, guidance: 2.0, seed: 1 };
    let a = rollout(&m, &refs, &sc, true)?;
    let b = rollout(&m, &refs, &sc, false)?;
    Ok(a.frames.iter().flatten().zip(b.frames.iter().flatten()).map(|(x, y)| (*x - *y).abs().to_f64_lossy()).fold(0.0, f64::max))
}

/// Cached rollout against full recomputation in both precisions.
pub fn cache_equivalence() -> CheckResult {
    const NAME: &str = "cache equivalence";
    let mut worst = (0.0f64, 0.0f64);
    for v in MaskVariant::ALL {
        match (cache_gap::<f32>(v, 6), cache_gap::<f64>(v, 6)) {
            (Ok(a), Ok(b)) => worst = (worst.0.max(a), worst.1.max(b)),
            (Err(e), _) | (_, Err(e)) => return CheckResult::from_error(NAME, e),
        }
    }
    let ok = worst.0 <= 1e-5 && worst.1 <= 1e-10;
    CheckResult::new(NAME, ok, format!("max |diff| f32 {:.1e}, f64 {:.1e}", worst.0, worst.1))
}

/// Finite differences over every parameter of the tiny model.
pub fn gradients() -> CheckResult {
    const NAME: &str = "gradient check";
    let mut worst = 0.0f64;
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for v in MaskVariant::ALL {
        let cfg = ModelConfig { variant: v, ..ModelConfig::tiny() };
        let m = match GPDiTModel::<f64>::init(cfg.clone(), 8, false) {
            Ok(m) => m,
            Err(e) => return CheckResult::from_error(NAME, e),
        };
        let (clean, noisy) = (random_frames::<f64>(&cfg, 2, &mut r), random_frames::<f64>(&cfg, 2, &mut r));
        let order: Vec<&[f64]> = clean.iter().zip(&noisy).flat_map(|(c, n)| [c.as_slice(), n.as_slice()]).collect();
        let layout = FrameLayout::training(2, cfg.tokens_per_frame()).unwrap();
        let tokens = match m.tokens_of(&order) {
            Ok(t) => t,
            Err(e) => return CheckResult::from_error(NAME, e),
        };
        let seq = TokenSequence { segments: layout.segments().to_vec(), tokens, time: 0.3, drop_context: false };
        let n_noisy = layout.noisy_tokens().len();
        let target = Tensor::from_fn(vec![n_noisy, cfg.token_dim()], |i| (i as f64 * 0.37).sin());
        let err = grad_check_many(
            |tape, vars| {
                let pass = m
                    .forward(tape, &Binding(vars.to_vec()), std::slice::from_ref(&seq), None)
                    .map_err(|e| TensorError::Invalid { op: "forward", msg: e.to_string() })?;
                let tgt = tape.constant(target.clone());
                tape.mse(pass.prediction.expect("noisy rows"), tgt)
            },
            m.params(),
            1e-6,
        );
        match err {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckResult::from_error(NAME, e),
        }
    }
    CheckResult::new(NAME, worst < 1e-3, format!("max relative error {worst:.1e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_suite(VerifyOptions::default());
        assert!(all_passed(&a), "{}", render_table(&a));
        assert_eq!(render_table(&a), render_table(&run_suite(VerifyOptions::default())));
    }

    #[test]
    fn corrupted_mask_fails_causality() {
        let r = attention_causality(true);
        assert!(!r.passed, "{r:?}");
        assert!(!all_passed(&[rotation_algebra(10), r]));
    }
}
