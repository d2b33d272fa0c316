//! Variance-preserving noise schedule in rotation coordinates.
//!
//! Time `t ∈ [0, 1]` maps to an angle `θ = t·π/2`, so `ᾱ(t) = cos²θ`. The
//! forward process is a planar rotation of `(x0, ε)`:
//!
//! ```text
//! x_t       =  cosθ·x0 + sinθ·ε
//! companion = -sinθ·x0 + cosθ·ε
//! ```
//!
//! and the clean sample and noise come back under the inverse rotation. The
//! general SDE `dx = μ(x,t)dt + σ(t)dw` is only instantiated for this
//! variance-preserving case; sampling uses the deterministic probability-flow
//! update written in angle coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("target time {s} must be strictly below current time {t}")]
    StepOrder { t: f64, s: f64 },
    #[error("epsilon-to-companion conversion is singular at t = {0} (cos θ ≈ 0)")]
    Singular(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Smallest `cos θ` accepted when dividing by it.
pub const SINGULAR_COS: f64 = 1e-6;

/// What the network's output head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// The noise `ε`.
    #[serde(alias = "eps")]
    Epsilon,
    /// The rotated companion `-sinθ·x0 + cosθ·ε` (velocity-style target).
    #[default]
    Companion,
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Epsilon => "eps",
            Self::Companion => "companion",
        })
    }
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eps" | "epsilon" => Ok(Self::Epsilon),
            "companion" | "v" => Ok(Self::Companion),
            other => Err(format!("unknown parameterization '{other}' (expected eps or companion)")),
        }
    }
}

/// Rotation angle with its cosine and sine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Angle {
    pub theta: f64,
    pub cos: f64,
    pub sin: f64,
}

impl Angle {
    /// `ᾱ = cos²θ`.
    pub fn alpha_bar(&self) -> f64 {
        self.cos * self.cos
    }

    pub const ZERO: Angle = Angle { theta: 0.0, cos: 1.0, sin: 0.0 };
}

/// `θ(t) = t·π/2`. The end points are exact: `R(0) = I`, `R(π/2)` swaps axes.
pub fn theta_of(t: f64) -> Result<Angle> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ScheduleError::OutOfRange(t));
    }
    let theta = t * std::f64::consts::FRAC_PI_2;
    let (sin, cos) = if t == 0.0 {
        (0.0, 1.0)
    } else if t == 1.0 {
        (1.0, 0.0)
    } else {
        theta.sin_cos()
    };
    Ok(Angle { theta, cos, sin })
}

/// Training-time sampling range for `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { t_min: 0.001, t_max: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        theta_of(t_min)?;
        theta_of(t_max)?;
        if t_min > t_max {
            return Err(ScheduleError::StepOrder { t: t_max, s: t_min });
        }
        Ok(Self { t_min, t_max })
    }

    /// Maps a uniform draw `u ∈ [0, 1)` into `[t_min, t_max]`.
    pub fn time_from_uniform(&self, u: f64) -> f64 {
        (self.t_min + u * (self.t_max - self.t_min)).min(self.t_max)
    }
}

/// Clean sample and its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPair<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
}

impl<T: Float> DiffusionPair<T> {
    pub fn new(x0: Tensor<T>, eps: Tensor<T>) -> Result<Self> {
        check_shapes(&x0, &eps)?;
        Ok(Self { x0, eps })
    }
}

fn check_shapes<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ScheduleError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `a·u + b·v` elementwise.
fn combine<T: Float>(a: f64, u: &Tensor<T>, b: f64, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(u, v)?;
    let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
    Ok(u.zip_map(v, "combine", |x, y| a * x + b * y).expect("shapes checked"))
}

/// `x_t = cosθ·x0 + sinθ·ε`.
pub fn forward_diffuse<T: Float>(pair: &DiffusionPair<T>, t: f64) -> Result<Tensor<T>> {
    let a = theta_of(t)?;
    combine(a.cos, &pair.x0, a.sin, &pair.eps)
}

/// Second row of the rotation: `-sinθ·x0 + cosθ·ε`.
pub fn companion_of<T: Float>(pair: &DiffusionPair<T>, t: f64) -> Result<Tensor<T>> {
    let a = theta_of(t)?;
    combine(-a.sin, &pair.x0, a.cos, &pair.eps)
}

/// Inverse rotation of `(x_t, companion)` back to `(x0, ε)`.
pub fn recover<T: Float>(x_t: &Tensor<T>, companion: &Tensor<T>, t: f64) -> Result<DiffusionPair<T>> {
    let a = theta_of(t)?;
    Ok(DiffusionPair { x0: combine(a.cos, x_t, -a.sin, companion)?, eps: combine(a.sin, x_t, a.cos, companion)? })
}

/// Re-expresses a prediction in another parameterization.
pub fn convert_prediction<T: Float>(pred: &Tensor<T>, from: Parameterization, to: Parameterization, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_shapes(pred, x_t)?;
    let a = theta_of(t)?;
    match (from, to) {
        (f, t2) if f == t2 => Ok(pred.clone()),
        (Parameterization::Epsilon, Parameterization::Companion) => {
            if a.cos <= SINGULAR_COS {
                return Err(ScheduleError::Singular(t));
            }
            combine(1.0 / a.cos, pred, -a.sin / a.cos, x_t)
        }
        (Parameterization::Companion, Parameterization::Epsilon) => combine(a.sin, x_t, a.cos, pred),
        _ => unreachable!(),
    }
}

/// Deterministic update from time `t` to an earlier time `s`: estimate
/// `(x̂0, ε̂)` at `t`, then re-rotate to angle `θ_s`.
pub fn denoise_step<T: Float>(x_t: &Tensor<T>, pred: &Tensor<T>, param: Parameterization, t: f64, s: f64) -> Result<Tensor<T>> {
    theta_of(t)?;
    let target = theta_of(s)?;
    if s >= t {
        return Err(ScheduleError::StepOrder { t, s });
    }
    let companion = convert_prediction(pred, param, Parameterization::Companion, x_t, t)?;
    let est = recover(x_t, &companion, t)?;
    combine(target.cos, &est.x0, target.sin, &est.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const R: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    fn pair(x0: f64, eps: f64) -> DiffusionPair<f64> {
        DiffusionPair::new(s(x0), s(eps)).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn theta_end_points_and_midpoint() {
        let a0 = theta_of(0.0).unwrap();
        assert_eq!((a0.theta, a0.alpha_bar()), (0.0, 1.0));
        let a1 = theta_of(1.0).unwrap();
        assert_eq!(a1.theta, std::f64::consts::FRAC_PI_2);
        assert_eq!(a1.alpha_bar(), 0.0);
        let h = theta_of(0.5).unwrap();
        assert!((h.theta - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!((h.cos - 0.70711).abs() < 1e-5 && (h.sin - 0.70711).abs() < 1e-5);
        assert!(theta_of(-0.1).is_err() && theta_of(1.5).is_err() && theta_of(f64::NAN).is_err());
    }

    #[test]
    fn forward_and_companion_examples() {
        assert_eq!(forward_diffuse(&pair(1.0, 0.0), 0.0).unwrap().data(), &[1.0]);
        assert_eq!(forward_diffuse(&pair(0.0, 1.0), 1.0).unwrap().data(), &[1.0]);
        assert!((forward_diffuse(&pair(1.0, 0.0), 0.5).unwrap().data()[0] - R).abs() < 1e-12);

        assert_eq!(companion_of(&pair(1.0, 0.0), 0.0).unwrap().data(), &[0.0]);
        assert!((companion_of(&pair(1.0, 0.0), 0.5).unwrap().data()[0] + R).abs() < 1e-12);
        assert_eq!(companion_of(&pair(0.0, 1.0), 1.0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn recover_examples() {
        let p = recover(&s(R), &s(-R), 0.5).unwrap();
        assert!((p.x0.data()[0] - 1.0).abs() < 1e-12 && p.eps.data()[0].abs() < 1e-12);
        let p = recover(&s(0.3), &s(-2.0), 0.0).unwrap();
        assert_eq!((p.x0.data()[0], p.eps.data()[0]), (0.3, -2.0));
        assert!(recover(&s(0.0), &Tensor::zeros([2]), 0.3).is_err());
    }

    #[test]
    fn convert_examples() {
        let x = s(0.4);
        let p = s(-1.2);
        for param in [Parameterization::Epsilon, Parameterization::Companion] {
            assert_eq!(convert_prediction(&p, param, param, &x, 0.7).unwrap(), p);
        }
        assert_eq!(convert_prediction(&p, Parameterization::Epsilon, Parameterization::Companion, &x, 1.0), Err(ScheduleError::Singular(1.0)));
        assert!(convert_prediction(&p, Parameterization::Epsilon, Parameterization::Companion, &x, 1.0 - 1e-9).is_err());
    }

    #[test]
    fn perfect_companion_converts_to_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pr = pair(rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..1.0);
            let xt = forward_diffuse(&pr, t).unwrap();
            let v = companion_of(&pr, t).unwrap();
            let e = convert_prediction(&v, Parameterization::Companion, Parameterization::Epsilon, &xt, t).unwrap();
            assert!((e.data()[0] - pr.eps.data()[0]).abs() <= 1e-10);
        }
    }

    #[test]
    fn denoise_step_rejects_non_decreasing_time() {
        assert_eq!(denoise_step(&s(0.0), &s(0.0), Parameterization::Companion, 0.4, 0.4), Err(ScheduleError::StepOrder { t: 0.4, s: 0.4 }));
    }

    #[test]
    fn one_step_from_pure_noise_with_perfect_companion_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pr = pair(rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let xt = forward_diffuse(&pr, 1.0).unwrap();
            let v = companion_of(&pr, 1.0).unwrap();
            let x0 = denoise_step(&xt, &v, Parameterization::Companion, 1.0, 0.0).unwrap();
            assert_eq!(x0, pr.x0);
        }
    }

    #[test]
    fn fifty_step_trajectory_with_perfect_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::from_fn([16], |_| rng.random_range(-1.0..1.0));
        let eps = Tensor::from_fn([16], |_| rng.random_range(-3.0..3.0));
        let pr = DiffusionPair::new(x0, eps).unwrap();
        for param in [Parameterization::Companion, Parameterization::Epsilon] {
            let start = if param == Parameterization::Epsilon { 0.999 } else { 1.0 };
            let mut x = forward_diffuse(&pr, start).unwrap();
            let steps = 50;
            for j in 0..steps {
                let t = start * (1.0 - j as f64 / steps as f64);
                let sn = start * (1.0 - (j + 1) as f64 / steps as f64);
                let pred = match param {
                    Parameterization::Companion => companion_of(&pr, t).unwrap(),
                    Parameterization::Epsilon => pr.eps.clone(),
                };
                x = denoise_step(&x, &pred, param, t, sn).unwrap();
            }
            assert!(x.max_abs_diff(&pr.x0) <= 1e-6, "{param:?}");
        }
    }

    proptest! {
        #[test]
        fn rotation_round_trip_and_norm(x0 in -5.0f64..5.0, eps in -5.0f64..5.0, t in 0.0f64..=1.0) {
            let pr = pair(x0, eps);
            let xt = forward_diffuse(&pr, t).unwrap();
            let v = companion_of(&pr, t).unwrap();
            let back = recover(&xt, &v, t).unwrap();
            prop_assert!((back.x0.data()[0] - x0).abs() <= 1e-12 * (1.0 + x0.abs().max(eps.abs())));
            prop_assert!((back.eps.data()[0] - eps).abs() <= 1e-12 * (1.0 + x0.abs().max(eps.abs())));
            let lhs = xt.data()[0].powi(2) + v.data()[0].powi(2);
            prop_assert!((lhs - (x0 * x0 + eps * eps)).abs() <= 1e-10 * (1.0 + lhs));
        }

        #[test]
        fn perfect_step_lands_on_forward_process(x0 in -1.0f64..1.0, eps in -3.0f64..3.0, t in 0.01f64..=1.0, frac in 0.0f64..1.0) {
            let pr = pair(x0, eps);
            let sn = t * frac;
            let xt = forward_diffuse(&pr, t).unwrap();
            let v = companion_of(&pr, t).unwrap();
            let xs = denoise_step(&xt, &v, Parameterization::Companion, t, sn).unwrap();
            prop_assert!((xs.data()[0] - forward_diffuse(&pr, sn).unwrap().data()[0]).abs() <= 1e-10);
        }

        #[test]
        fn conversion_round_trip(p in -3.0f64..3.0, x in -3.0f64..3.0, t in 0.0f64..0.99) {
            let (e, c) = (Parameterization::Epsilon, Parameterization::Companion);
            let there = convert_prediction(&s(p), e, c, &s(x), t).unwrap();
            let back = convert_prediction(&there, c, e, &s(x), t).unwrap();
            prop_assert!((back.data()[0] - p).abs() <= 1e-8);
            let there = convert_prediction(&s(p), c, e, &s(x), t).unwrap();
            let back = convert_prediction(&there, e, c, &s(x), t).unwrap();
            prop_assert!((back.data()[0] - p).abs() <= 1e-8);
        }
    }
}
