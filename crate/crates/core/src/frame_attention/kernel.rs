//! Block-sparse masked multi-head attention.
//!
//! Work is organised per (query block, head): only admissible key blocks are
//! gathered, so inadmissible tokens never enter the arithmetic. That makes
//! causality bit-exact and lets the cost counter track exactly what was
//! computed.

use std::ops::AddAssign;
use std::sync::Arc;

use serde::Serialize;

use super::{AttentionError, AttentionMask};
use crate::tensor::{Backward, Float, Tape, Tensor, TensorError, Var};

/// Work done by attention calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AttentionStats {
    pub calls: u64,
    /// Admissible (query block, key block) pairs visited, counted once per
    /// call regardless of the number of heads.
    pub frame_pairs: u64,
    /// Multiply-adds: `2·P²·d_h` per admissible pair per head (`QKᵀ` + `AV`).
    pub macs: u64,
}

impl AddAssign for AttentionStats {
    fn add_assign(&mut self, rhs: Self) {
        self.calls += rhs.calls;
        self.frame_pairs += rhs.frame_pairs;
        self.macs += rhs.macs;
    }
}

/// One sequence of a row-stacked batch: its queries start at row `q_start`
/// of `q` and its keys at row `k_start` of `k`/`v`.
#[derive(Clone, Debug)]
pub struct SeqAttention {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: Arc<AttentionMask>,
}

struct BlockRecord {
    head: usize,
    q_row0: usize,
    rows: usize,
    keys: usize,
    prob_offset: usize,
}

struct Saved<T> {
    records: Vec<BlockRecord>,
    key_lists: Vec<Vec<usize>>,
    probs: Vec<T>,
}

struct Geometry {
    hidden: usize,
    heads: usize,
    head_dim: usize,
}

fn geometry<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Geometry, AttentionError> {
    let two_d = |t: &Tensor<T>| t.shape().len() == 2;
    if !two_d(q) || !two_d(k) || k.shape() != v.shape() || q.shape()[1] != k.shape()[1] {
        return Err(TensorError::Shape { op: "attention", left: q.shape().to_vec(), right: k.shape().to_vec() }.into());
    }
    let hidden = q.shape()[1];
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(AttentionError::Geometry { what: "hidden divisible by heads", expected: heads, got: hidden });
    }
    Ok(Geometry { hidden, heads, head_dim: hidden / heads })
}

fn gather_head<T: Float>(src: &[T], rows: &[usize], g: &Geometry, head: usize, dst: &mut Vec<T>) {
    dst.clear();
    let c0 = head * g.head_dim;
    for &r in rows {
        dst.extend_from_slice(&src[r * g.hidden + c0..r * g.hidden + c0 + g.head_dim]);
    }
}

fn scatter_add_head<T: Float>(dst: &mut [T], rows: &[usize], g: &Geometry, head: usize, src: &[T]) {
    let c0 = head * g.head_dim;
    for (i, &r) in rows.iter().enumerate() {
        let d = &mut dst[r * g.hidden + c0..r * g.hidden + c0 + g.head_dim];
        for (a, &b) in d.iter_mut().zip(&src[i * g.head_dim..(i + 1) * g.head_dim]) {
            *a += b;
        }
    }
}

fn forward_kernel<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: &Geometry,
    seqs: &[SeqAttention],
) -> Result<(Tensor<T>, Saved<T>, AttentionStats), AttentionError> {
    let (q_rows, k_rows) = (q.shape()[0], k.shape()[0]);
    let scale = T::one() / T::from_f64_lossy(g.head_dim as f64).sqrt();
    let mut out = vec![T::zero(); q.numel()];
    let mut saved = Saved { records: Vec::new(), key_lists: Vec::new(), probs: Vec::new() };
    let mut stats = AttentionStats { calls: 1, ..Default::default() };
    let (mut ksel, mut vsel, mut scores) = (Vec::new(), Vec::new(), Vec::new());

    for seq in seqs {
        let mask = &seq.mask;
        let p = mask.tokens_per_frame();
        if seq.q_start + mask.query_len() > q_rows {
            return Err(AttentionError::Geometry { what: "query rows", expected: seq.q_start + mask.query_len(), got: q_rows });
        }
        if seq.k_start + mask.key_len() > k_rows {
            return Err(AttentionError::Geometry { what: "key rows", expected: seq.k_start + mask.key_len(), got: k_rows });
        }
        mask.check_rows()?;
        for qb in 0..mask.query_segments().len() {
            let blocks: Vec<usize> = mask.admissible_keys(qb).collect();
            stats.frame_pairs += blocks.len() as u64;
            stats.macs += (blocks.len() * 2 * p * p * g.head_dim * g.heads) as u64;
            let keys: Vec<usize> = blocks.iter().flat_map(|&kb| seq.k_start + kb * p..seq.k_start + (kb + 1) * p).collect();
            let nk = keys.len();
            let q_row0 = seq.q_start + qb * p;
            for head in 0..g.heads {
                gather_head(k.data(), &keys, g, head, &mut ksel);
                gather_head(v.data(), &keys, g, head, &mut vsel);
                scores.clear();
                scores.resize(p * nk, T::zero());
                let qoff = q_row0 * g.hidden + head * g.head_dim;
                T::gemm(
                    p,
                    g.head_dim,
                    nk,
                    scale,
                    &q.data()[qoff..],
                    g.hidden as isize,
                    1,
                    &ksel,
                    1,
                    g.head_dim as isize,
                    T::zero(),
                    &mut scores,
                    nk as isize,
                    1,
                );
                for row in scores.chunks_mut(nk) {
                    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    let mut total = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                T::gemm(p, nk, g.head_dim, T::one(), &scores, nk as isize, 1, &vsel, g.head_dim as isize, 1, T::zero(), &mut out[qoff..], g.hidden as isize, 1);
                saved.records.push(BlockRecord { head, q_row0, rows: p, keys: saved.key_lists.len(), prob_offset: saved.probs.len() });
                saved.probs.extend_from_slice(&scores);
            }
            saved.key_lists.push(keys);
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, saved, stats))
}

struct AttentionBackward<T> {
    geometry: Geometry,
    saved: Saved<T>,
}

impl<T: Float> Backward<T> for AttentionBackward<T> {
    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let g = &self.geometry;
        let scale = T::one() / T::from_f64_lossy(g.head_dim as f64).sqrt();
        let dh = g.head_dim;
        let mut dq = vec![T::zero(); q.numel()];
        let mut dk = vec![T::zero(); k.numel()];
        let mut dv = vec![T::zero(); v.numel()];
        let (mut ksel, mut vsel, mut dsel, mut dp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in &self.saved.records {
            let keys = &self.saved.key_lists[rec.keys];
            let (p, nk) = (rec.rows, keys.len());
            let probs = &self.saved.probs[rec.prob_offset..rec.prob_offset + p * nk];
            let off = rec.q_row0 * g.hidden + rec.head * dh;
            gather_head(k.data(), keys, g, rec.head, &mut ksel);
            gather_head(v.data(), keys, g, rec.head, &mut vsel);

            // dV = Pᵀ·dO
            dsel.clear();
            dsel.resize(nk * dh, T::zero());
            T::gemm(nk, p, dh, T::one(), probs, 1, nk as isize, &grad.data()[off..], g.hidden as isize, 1, T::zero(), &mut dsel, dh as isize, 1);
            scatter_add_head(&mut dv, keys, g, rec.head, &dsel);

            // dP = dO·Vᵀ, then the softmax Jacobian.
            dp.clear();
            dp.resize(p * nk, T::zero());
            T::gemm(p, dh, nk, T::one(), &grad.data()[off..], g.hidden as isize, 1, &vsel, 1, dh as isize, T::zero(), &mut dp, nk as isize, 1);
            for (dr, pr) in dp.chunks_mut(nk).zip(probs.chunks(nk)) {
                let dot = dr.iter().zip(pr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }

            // dQ += dS·K, dK = dSᵀ·Q
            T::gemm(p, nk, dh, T::one(), &dp, nk as isize, 1, &ksel, dh as isize, 1, T::one(), &mut dq[off..], g.hidden as isize, 1);
            dsel.clear();
            dsel.resize(nk * dh, T::zero());
            T::gemm(nk, p, dh, T::one(), &dp, 1, nk as isize, &q.data()[off..], g.hidden as isize, 1, T::zero(), &mut dsel, dh as isize, 1);
            scatter_add_head(&mut dk, keys, g, rec.head, &dsel);
        }
        let wrap = |shape: &[usize], d: Vec<T>| Some(Tensor::new(shape.to_vec(), d).expect("gradient shape"));
        vec![wrap(q.shape(), dq), wrap(k.shape(), dk), wrap(v.shape(), dv)]
    }
}

/// Records masked multi-head attention on a tape.
///
/// `q` is `[query rows × hidden]`, `k`/`v` are `[key rows × hidden]`; heads
/// are contiguous column slices. Each [`SeqAttention`] maps a masked
/// sub-problem onto row ranges; rows outside every sequence produce zeros.
pub fn attend<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seqs: &[SeqAttention],
    stats: &mut AttentionStats,
) -> Result<Var, AttentionError> {
    let geometry = geometry(tape.value(q), tape.value(k), tape.value(v), heads)?;
    let (out, saved, s) = forward_kernel(tape.value(q), tape.value(k), tape.value(v), &geometry, seqs)?;
    *stats += s;
    Ok(tape.custom(vec![q, k, v], out, Box::new(AttentionBackward { geometry, saved })))
}

fn heads_to_rows<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>, AttentionError> {
    let [h, l, d] = t.shape()[..] else {
        return Err(TensorError::Invalid { op: "attention", msg: format!("expected [heads, len, head_dim], got {:?}", t.shape()) }.into());
    };
    let mut data = vec![T::zero(); h * l * d];
    for hi in 0..h {
        for li in 0..l {
            data[li * h * d + hi * d..li * h * d + (hi + 1) * d].copy_from_slice(&t.data()[(hi * l + li) * d..(hi * l + li + 1) * d]);
        }
    }
    Ok(Tensor::new([l, h * d], data)?)
}

/// Eager masked attention on `[heads × L × d_h]` tensors:
/// `softmax(q·kᵀ/√d_h)·v` over admissible keys only.
pub fn attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &AttentionMask) -> Result<(Tensor<T>, AttentionStats), AttentionError> {
    let heads = q.shape().first().copied().unwrap_or(0);
    if k.shape().first() != Some(&heads) || v.shape() != k.shape() {
        return Err(TensorError::Shape { op: "attention", left: q.shape().to_vec(), right: k.shape().to_vec() }.into());
    }
    let (qr, kr, vr) = (heads_to_rows(q)?, heads_to_rows(k)?, heads_to_rows(v)?);
    if qr.shape()[0] != mask.query_len() || kr.shape()[0] != mask.key_len() {
        return Err(AttentionError::Geometry { what: "mask length", expected: mask.query_len(), got: qr.shape()[0] });
    }
    let g = geometry(&qr, &kr, &vr, heads)?;
    let seq = SeqAttention { q_start: 0, k_start: 0, mask: Arc::new(mask.clone()) };
    let (out, _, stats) = forward_kernel(&qr, &kr, &vr, &g, std::slice::from_ref(&seq))?;
    let (l, d) = (mask.query_len(), g.head_dim);
    let mut data = vec![T::zero(); out.numel()];
    for hi in 0..heads {
        for li in 0..l {
            data[(hi * l + li) * d..(hi * l + li + 1) * d].copy_from_slice(&out.data()[li * g.hidden + hi * d..li * g.hidden + (hi + 1) * d]);
        }
    }
    Ok((Tensor::new([heads, l, d], data)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_attention::{build_mask, frame_pair_count, FrameLayout, MaskVariant, Segment, TokenKind};
    use crate::tensor::{grad_check_many, masked_softmax};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Dense reference: full logits, masked softmax, per head.
    fn dense_reference(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &AttentionMask) -> Tensor<f64> {
        let (h, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let lk = k.shape()[1];
        let mut out = Vec::new();
        for hi in 0..h {
            let qh = Tensor::new([lq, d], q.data()[hi * lq * d..(hi + 1) * lq * d].to_vec()).unwrap();
            let kh = Tensor::new([lk, d], k.data()[hi * lk * d..(hi + 1) * lk * d].to_vec()).unwrap();
            let vh = Tensor::new([lk, d], v.data()[hi * lk * d..(hi + 1) * lk * d].to_vec()).unwrap();
            let mut kt = vec![0.0; lk * d];
            for i in 0..lk {
                for j in 0..d {
                    kt[j * lk + i] = kh.data()[i * d + j];
                }
            }
            let logits = qh.matmul(&Tensor::new([d, lk], kt).unwrap()).unwrap().scale(1.0 / (d as f64).sqrt());
            let p = masked_softmax(&logits, &mask.to_dense()).unwrap();
            out.extend(p.matmul(&vh).unwrap().into_data());
        }
        Tensor::new([h, lq, d], out).unwrap()
    }

    #[test]
    fn matches_dense_masked_softmax_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in MaskVariant::ALL {
            let mask = build_mask(&FrameLayout::training(3, 2).unwrap(), v);
            let (q, k, vv) = (rand_t(&[2, 12, 4], &mut rng), rand_t(&[2, 12, 4], &mut rng), rand_t(&[2, 12, 4], &mut rng));
            let (out, stats) = attention(&q, &k, &vv, &mask).unwrap();
            assert!(out.max_abs_diff(&dense_reference(&q, &k, &vv, &mask)) < 1e-12);
            assert_eq!(stats.frame_pairs, frame_pair_count(v, 3).total);
            assert_eq!(stats.macs, frame_pair_count(v, 3).total * 2 * 4 * 4 * 2);
        }
    }

    #[test]
    fn single_admissible_key_returns_its_value() {
        // F=1, P=1: c0 only sees itself.
        let mask = build_mask(&FrameLayout::training(1, 1).unwrap(), MaskVariant::Vanilla);
        let q = Tensor::new([1, 2, 2], vec![0.3, -0.2, 1.0, 2.0]).unwrap();
        let v = Tensor::new([1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let (out, _) = attention(&q, &q, &v, &mask).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn equal_logits_average_values() {
        // c0 and c1 under Vanilla: c1 reads both with equal logits (k = 0).
        let mask = build_mask(&FrameLayout::context(2, 1).unwrap(), MaskVariant::Vanilla);
        let q = Tensor::new([1, 2, 1], vec![1.0, 1.0]).unwrap();
        let k = Tensor::new([1, 2, 1], vec![0.0, 0.0]).unwrap();
        let v = Tensor::new([1, 2, 1], vec![2.0, 4.0]).unwrap();
        let (out, _) = attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn lightweight_clean_outputs_equal_per_frame_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, p, h, d) = (4, 3, 2, 3);
        let layout = FrameLayout::training(f, p).unwrap();
        let mask = build_mask(&layout, MaskVariant::Lightweight);
        let l = layout.len();
        let (q, k, v) = (rand_t(&[h, l, d], &mut rng), rand_t(&[h, l, d], &mut rng), rand_t(&[h, l, d], &mut rng));
        let (out, _) = attention(&q, &k, &v, &mask).unwrap();
        let frame_mask = build_mask(&FrameLayout::context(1, p).unwrap(), MaskVariant::Lightweight);
        for frame in 0..f {
            let rows: Vec<usize> = (0..p).map(|o| layout.index_of(frame, TokenKind::Clean, o).unwrap()).collect();
            let pick = |t: &Tensor<f64>| {
                let data = (0..h).flat_map(|hi| rows.iter().flat_map(move |&r| (0..d).map(move |j| (hi * l + r) * d + j))).map(|i| t.data()[i]).collect();
                Tensor::new([h, p, d], data).unwrap()
            };
            let (local, _) = attention(&pick(&q), &pick(&k), &pick(&v), &frame_mask).unwrap();
            assert!(local.max_abs_diff(&pick(&out)) <= 1e-12);
        }
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for variant in MaskVariant::ALL {
            let mask = Arc::new(build_mask(&FrameLayout::training(2, 2).unwrap(), variant));
            let l = mask.query_len();
            let readout = rand_t(&[l, 4], &mut rng);
            let inputs = vec![rand_t(&[l, 4], &mut rng), rand_t(&[l, 4], &mut rng), rand_t(&[l, 4], &mut rng)];
            let err = grad_check_many(
                |tape, vars| {
                    let seqs = [SeqAttention { q_start: 0, k_start: 0, mask: mask.clone() }];
                    let o = attend(tape, vars[0], vars[1], vars[2], 2, &seqs, &mut AttentionStats::default())
                        .map_err(|e| TensorError::Invalid { op: "attend", msg: e.to_string() })?;
                    let r = tape.constant(readout.clone());
                    let m = tape.mul(o, r)?;
                    Ok(tape.sum(m))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{variant}: {err}");
        }
    }

    #[test]
    fn stacked_sequences_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mask = Arc::new(build_mask(&FrameLayout::training(2, 2).unwrap(), MaskVariant::Vanilla));
        let l = mask.query_len();
        let (q, k, v) = (rand_t(&[2 * l, 4], &mut rng), rand_t(&[2 * l, 4], &mut rng), rand_t(&[2 * l, 4], &mut rng));
        let seqs = [SeqAttention { q_start: 0, k_start: 0, mask: mask.clone() }, SeqAttention { q_start: l, k_start: l, mask: mask.clone() }];
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = attend(&mut tape, qv, kv, vv, 2, &seqs, &mut AttentionStats::default()).unwrap();
        let second = tape.value(out).gather_rows(&(l..2 * l).collect::<Vec<_>>()).unwrap();

        let rows: Vec<usize> = (l..2 * l).collect();
        let mut tape2 = Tape::new();
        let (q2, k2, v2) =
            (tape2.constant(q.gather_rows(&rows).unwrap()), tape2.constant(k.gather_rows(&rows).unwrap()), tape2.constant(v.gather_rows(&rows).unwrap()));
        let alone = attend(&mut tape2, q2, k2, v2, 2, &seqs[..1], &mut AttentionStats::default()).unwrap();
        assert_eq!(tape2.value(alone), &second);
    }

    #[test]
    fn out_of_range_sequence_and_bad_heads_are_errors() {
        let mask = Arc::new(build_mask(&FrameLayout::training(2, 2).unwrap(), MaskVariant::Vanilla));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([4, 4]));
        let seqs = [SeqAttention { q_start: 0, k_start: 0, mask }];
        assert!(attend(&mut tape, x, x, x, 2, &seqs, &mut AttentionStats::default()).is_err());
        let small = Arc::new(build_mask(&FrameLayout::context(1, 4).unwrap(), MaskVariant::Vanilla));
        let seqs = [SeqAttention { q_start: 0, k_start: 0, mask: small }];
        assert!(attend(&mut tape, x, x, x, 3, &seqs, &mut AttentionStats::default()).is_err());
    }

    #[test]
    fn corrupted_mask_with_empty_row_is_rejected() {
        let mut mask = build_mask(&FrameLayout::training(1, 1).unwrap(), MaskVariant::Vanilla);
        mask.set_block(0, 0, false);
        let q = Tensor::<f64>::zeros([1, 2, 1]);
        assert!(matches!(attention(&q, &q, &q, &mask), Err(AttentionError::EmptyRow { query }) if query == Segment::clean(0)));
    }
}
