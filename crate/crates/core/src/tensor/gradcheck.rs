use super::{Float, Result, Tape, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Float,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over
/// every coordinate of every input.
pub fn grad_check_many<T, F>(f: F, xs: &[Tensor<T>], step: T) -> Result<T>
where
    T: Float,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::Invalid { op: "grad_check", msg: "function must be scalar-valued".into() });
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let two = T::one() + T::one();
    let mut worst = T::zero();
    let mut probe = xs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(xs[i].shape().to_vec());
                &zeros
            }
        };
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (two * step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let err = (a - numeric).abs() / a.abs().max(T::one());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_at_one_two_three() {
        let x = Tensor::<f64>::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::<f64>::new([1], vec![f64::NAN]).unwrap();
        assert!(matches!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn matmul_gradient_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random(&[3, 3], &mut rng);
            let b = random(&[3, 3], &mut rng);
            let err = grad_check_many(
                |t, v| {
                    let c = t.matmul(v[0], v[1])?;
                    Ok(t.sum(c))
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    // Each differentiable op, composed with a fixed random readout so the
    // output gradient is not uniform.
    fn readout(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(t.value(v).shape(), &mut rng);
        let w = t.constant(w);
        let p = t.mul(v, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn every_op_passes_grad_check_at_five_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = Mask::new([2, 4], vec![true, false, true, true, false, true, false, false]).unwrap();
        for trial in 0..5 {
            let x = random(&[2, 4], &mut rng);
            let w = random(&[4, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let g = random(&[4], &mut rng);
            let y = random(&[2, 4], &mut rng);

            type Case<'a> = (&'a str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>, Vec<Tensor<f64>>);
            let cases: Vec<Case> = vec![
                (
                    "linear",
                    Box::new(|t, v| {
                        let o = t.linear(v[0], v[1], Some(v[2]))?;
                        readout(t, o, 1)
                    }),
                    vec![x.clone(), w.clone(), b.clone()],
                ),
                (
                    "layer_norm",
                    Box::new(|t, v| {
                        let o = t.layer_norm(v[0], v[1], v[2])?;
                        readout(t, o, 2)
                    }),
                    vec![x.clone(), g.clone(), g.map(|v| v * 0.5)],
                ),
                (
                    "gelu",
                    Box::new(|t, v| {
                        let o = t.gelu(v[0]);
                        readout(t, o, 3)
                    }),
                    vec![x.clone()],
                ),
                (
                    "masked_softmax",
                    Box::new(|t, v| {
                        let o = t.masked_softmax(v[0], &mask)?;
                        readout(t, o, 4)
                    }),
                    vec![x.clone()],
                ),
                (
                    "add_sub_mul",
                    Box::new(|t, v| {
                        let a = t.add(v[0], v[1])?;
                        let s = t.sub(a, v[1])?;
                        let m = t.mul(s, v[1])?;
                        let k = t.scale(m, 0.7);
                        readout(t, k, 5)
                    }),
                    vec![x.clone(), y.clone()],
                ),
                ("mse", Box::new(|t, v| t.mse(v[0], v[1])), vec![x.clone(), y.clone()]),
                (
                    "concat_gather",
                    Box::new(|t, v| {
                        let c = t.concat_rows(v[0], v[1])?;
                        let g = t.gather_rows(c, &[3, 0, 3])?;
                        readout(t, g, 6)
                    }),
                    vec![x.clone(), y.clone()],
                ),
            ];
            for (name, f, inputs) in cases {
                let err = grad_check_many(f, &inputs, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: {err}");
            }
        }
    }
}
