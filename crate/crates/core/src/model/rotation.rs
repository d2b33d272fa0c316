//! Parameter-free time conditioning: noisy tokens have every channel pair
//! `(h₂ₖ, h₂ₖ₊₁)` turned by the diffusion angle, clean tokens are left alone.

use super::ModelError;
use crate::frame_attention::{FrameLayout, TokenKind};
use crate::schedule::theta_of;
use crate::tensor::{Backward, Float, Tape, Tensor, Var};

/// `(a, b) → (c·a − s·b, s·a + c·b)` on each channel pair of each row,
/// with a per-row `(cos, sin)`.
fn rotate_pairs<T: Float>(x: &Tensor<T>, cos: &[T], sin: &[T], inverse: bool) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let (c, s) = (cos[r], if inverse { -sin[r] } else { sin[r] });
        if s == T::zero() && c == T::one() {
            continue;
        }
        for pair in row.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
    }
    out
}

struct RotateBackward<T> {
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Float> Backward<T> for RotateBackward<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(rotate_pairs(grad, &self.cos, &self.sin, true))]
    }
}

/// Per-row angles on the tape; rows with `(1, 0)` pass through.
pub(crate) fn rotate_rows<T: Float>(tape: &mut Tape<T>, x: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var, ModelError> {
    let v = tape.value(x);
    if v.shape().len() != 2 || !v.last_dim().is_multiple_of(2) || cos.len() != v.rows() || sin.len() != v.rows() {
        return Err(ModelError::Config(format!("rotation needs an even hidden size and one angle per row, got {:?}", v.shape())));
    }
    let out = rotate_pairs(v, &cos, &sin, false);
    Ok(tape.custom(vec![x], out, Box::new(RotateBackward { cos, sin })))
}

/// Rotates the hidden states `[L × hidden]` of every noisy token of `layout`
/// by `θ(t)`; clean tokens use `θ = 0`.
pub fn rotate_condition<T: Float>(h: &Tensor<T>, t: f64, layout: &FrameLayout) -> Result<Tensor<T>, ModelError> {
    if h.shape().len() != 2 || !h.last_dim().is_multiple_of(2) {
        return Err(ModelError::Config(format!("rotation needs an even hidden size, got {:?}", h.shape())));
    }
    if h.rows() != layout.len() {
        return Err(ModelError::Geometry { what: "layout rows", expected: layout.len(), got: h.rows() });
    }
    let a = theta_of(t)?;
    let (mut cos, mut sin) = (vec![T::one(); h.rows()], vec![T::zero(); h.rows()]);
    for r in 0..h.rows() {
        if layout.token(r).map(|i| i.kind) == Some(TokenKind::Noisy) {
            cos[r] = T::from_f64_lossy(a.cos);
            sin[r] = T::from_f64_lossy(a.sin);
        }
    }
    Ok(rotate_pairs(h, &cos, &sin, false))
}
