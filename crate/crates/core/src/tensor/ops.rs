//! Forward kernels shared by the eager API and the tape.

use super::{Float, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Boolean admissibility array. Its shape must equal a trailing suffix of
/// the logits it is applied to; leading axes broadcast.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn all(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![true; n]).expect("Mask::all: extents must be >= 1")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Expands the mask to the full shape of `logits`.
    pub(crate) fn broadcast_to(&self, logits_shape: &[usize]) -> Result<Vec<bool>> {
        let k = logits_shape.len().checked_sub(self.shape.len());
        let fits = k.is_some_and(|k| logits_shape[k..] == self.shape[..]);
        if !fits {
            return Err(TensorError::Shape { op: "masked_softmax", left: logits_shape.to_vec(), right: self.shape.clone() });
        }
        let total: usize = logits_shape.iter().product();
        Ok(self.data.iter().copied().cycle().take(total).collect())
    }
}

/// Softmax over the last axis restricted to admissible entries. Disallowed
/// entries get exactly zero probability.
pub fn masked_softmax<T: Float>(logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let full = mask.broadcast_to(logits.shape())?;
    let out = masked_softmax_flat(logits.data(), &full, logits.last_dim())?;
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn masked_softmax_flat<T: Float>(x: &[T], mask: &[bool], len: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    for (row, (xs, ms)) in x.chunks(len).zip(mask.chunks(len)).enumerate() {
        let max = xs
            .iter()
            .zip(ms)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(TensorError::FullyMasked { op: "masked_softmax", row })?;
        let o = &mut out[row * len..(row + 1) * len];
        let mut total = T::zero();
        for ((dst, &v), &m) in o.iter_mut().zip(xs).zip(ms) {
            if m {
                *dst = (v - max).exp();
                total += *dst;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization over the last axis followed by `gain`/`bias`.
pub fn layer_norm<T: Float>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(layer_norm_saved(x, gain, bias)?.0)
}

/// Returns the output plus the normalized rows and per-row reciprocal
/// standard deviations needed for the backward pass.
pub(crate) fn layer_norm_saved<T: Float>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::Shape { op: "layer_norm", left: x.shape().to_vec(), right: gain.shape().to_vec() });
    }
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let inv_d = T::one() / T::from_f64_lossy(d as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(x.rows());
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, rstd))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

// `0.5·(1 + tanh u) = σ(2u)`; one `exp` is much cheaper than `tanh`.
#[inline]
fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let two = T::from_f64_lossy(2.0);
    let u = c * (x + a * x * x * x);
    (T::one() / (T::one() + (-two * u).exp()), c * (T::one() + T::from_f64_lossy(3.0) * a * x * x))
}

pub(crate) fn gelu_scalar<T: Float>(x: T) -> T {
    x * gelu_parts(x).0
}

pub(crate) fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let (s, du) = gelu_parts(x);
    s + x * s * (T::one() - s) * T::from_f64_lossy(2.0) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry_and_single_entry() {
        let l = Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap();
        let p = masked_softmax(&l, &Mask::all([2])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let l = Tensor::<f64>::new([2], vec![5.0, -5.0]).unwrap();
        let p = masked_softmax(&l, &Mask::new([2], vec![true, false]).unwrap()).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let l = Tensor::<f64>::zeros([2, 3]);
        let m = Mask::new([2, 3], vec![true, false, false, false, false, false]).unwrap();
        assert_eq!(masked_softmax(&l, &m), Err(TensorError::FullyMasked { op: "masked_softmax", row: 1 }));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle_on_admissible_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = Tensor::<f64>::from_fn([4, 6], |_| rng.random_range(-4.0..4.0));
        let bits: Vec<bool> = (0..24).map(|i| i % 6 == i / 6 || rng.random_bool(0.6)).collect();
        let m = Mask::new([4, 6], bits.clone()).unwrap();
        let p = masked_softmax(&l, &m).unwrap();
        for r in 0..4 {
            let kept: Vec<(usize, f64)> = (0..6).filter(|&j| bits[r * 6 + j]).map(|j| (j, l.data()[r * 6 + j])).collect();
            let z: f64 = kept.iter().map(|(_, v)| v.exp()).sum();
            let mut row_sum = 0.0;
            for j in 0..6 {
                let got = p.data()[r * 6 + j];
                match kept.iter().find(|(k, _)| *k == j) {
                    Some((_, v)) => assert!((got - v.exp() / z).abs() <= 1e-12),
                    None => assert_eq!(got, 0.0),
                }
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_mask_broadcasts_over_leading_axes() {
        let l = Tensor::<f64>::zeros([3, 2, 2]);
        let m = Mask::new([2, 2], vec![true, false, true, true]).unwrap();
        let p = masked_softmax(&l, &m).unwrap();
        assert_eq!(&p.data()[8..], &[1.0, 0.0, 0.5, 0.5]);
        assert!(masked_softmax(&l, &Mask::all([3])).is_err());
    }

    #[test]
    fn layer_norm_constant_row_and_normalized_row() {
        let g = Tensor::<f64>::new([2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros([2]);
        let x = Tensor::<f64>::new([1, 2], vec![3.0, 3.0]).unwrap();
        assert_eq!(layer_norm(&x, &g, &b).unwrap().data(), &[0.0, 0.0]);

        let x = Tensor::<f64>::new([1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!((gelu_scalar(-3.0f64) + 0.003_637).abs() < 1e-5);
        assert_eq!(gelu_scalar(-200.0f32), 0.0);
        assert_eq!(gelu_scalar(200.0f32), 200.0);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 / 40.0;
            let u = GELU_C * (x + GELU_A * x * x * x);
            let th = u.tanh();
            let reference = 0.5 * x * (1.0 + th);
            let dref = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            assert!((gelu_scalar(x) - reference).abs() < 1e-14);
            assert!((gelu_grad_scalar(x) - dref).abs() < 1e-13);
        }
    }
}
