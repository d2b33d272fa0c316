//! Wengert-list autodiff.
//!
//! Operations append nodes in execution order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use super::ops::{gelu_grad_scalar, gelu_scalar, layer_norm_saved, masked_softmax_flat};
use super::{Float, Mask, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// Receives the upstream gradient, the input values in declaration order and
/// the forward output; returns one optional gradient per input.
pub trait Backward<T: Float>: Send + Sync {
    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], output: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Float> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gain: Var, xhat: Vec<T>, rstd: Vec<T>, bias: Var },
    Gelu(Var),
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mse { pred: Var, target: Var },
    ConcatRows(Var, Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Custom { inputs: Vec<Var>, rule: Box<dyn Backward<T>> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[N×in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(w))?;
        if let Some(b) = b {
            let bias = self.value(b);
            let n = out.last_dim();
            if bias.shape() != [n] {
                return Err(TensorError::Shape { op: "linear", left: out.shape().to_vec(), right: bias.shape().to_vec() });
            }
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, rstd) = layer_norm_saved(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let xv = self.value(x);
        let full = mask.broadcast_to(xv.shape())?;
        let out = Tensor::new(xv.shape().to_vec(), masked_softmax_flat(xv.data(), &full, xv.last_dim())?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax { x, mask: full }, rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.expect_same_shape(t, "mse")?;
        let n = T::from_f64_lossy(p.numel() as f64);
        let total = p.data().iter().zip(t.data()).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred, target }, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(rows)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor<T>, rule: Box<dyn Backward<T>>) -> Var {
        let rg = self.any_grad(&inputs);
        self.push(value, Op::Custom { inputs, rule }, rg)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Invalid { op: "backward", msg: "root must be a single element".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            for (input, gi) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (da, db) = matmul_grads(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw) = matmul_grads(val(*x), val(*w), g);
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let n = g.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*b, Tensor::new([n], db)?));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = g.last_dim();
                let gv = val(*gain).data();
                let inv_d = T::one() / T::from_f64_lossy(d as f64);
                let mut dx = vec![T::zero(); g.numel()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, (gr, xh)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] = rstd[r] * (gr[j] * gv[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, Tensor::new(g.shape().to_vec(), dx)?), (*gain, Tensor::new([d], dgain)?), (*bias, Tensor::new([d], dbias)?)]
            }
            Op::Gelu(x) => {
                let data = g.data().iter().zip(val(*x).data()).map(|(&gi, &xi)| gi * gelu_grad_scalar(xi)).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::MaskedSoftmax { x, mask } => {
                let p = &node.value;
                let len = p.last_dim();
                let mut dx = vec![T::zero(); p.numel()];
                for ((dr, pr), (gr, mr)) in dx.chunks_mut(len).zip(p.data().chunks(len)).zip(g.data().chunks(len).zip(mask.chunks(len))) {
                    let dot = pr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..len {
                        if mr[j] {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(p.shape().to_vec(), dx)?)]
            }
            Op::Sum(x) => {
                let xv = val(*x);
                vec![(*x, Tensor::new(xv.shape().to_vec(), vec![g.data()[0]; xv.numel()])?)]
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let t = val(*target);
                let c = g.data()[0] * T::from_f64_lossy(2.0 / p.numel() as f64);
                let dp = p.zip_map(t, "mse", |a, b| c * (a - b))?;
                let dt = dp.scale(-T::one());
                vec![(*pred, dp), (*target, dt)]
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                let da = Tensor::new(val(*a).shape().to_vec(), g.data()[..split].to_vec())?;
                let db = Tensor::new(val(*b).shape().to_vec(), g.data()[split..].to_vec())?;
                vec![(*a, da), (*b, db)]
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += g.data()[i * d + j];
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = rule.backward(g, &vals, &node.value);
                debug_assert_eq!(gs.len(), inputs.len());
                inputs.iter().zip(gs).filter_map(|(&v, gi)| gi.map(|gi| (v, gi))).collect()
            }
        };
        Ok(out)
    }
}

/// `d a = g·bᵀ`, `d b = aᵀ·g` for `c = a·b`.
fn matmul_grads<T: Float>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
    let mut db = vec![T::zero(); k * n];
    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
    (Tensor::new([m, k], da).expect("matmul grad shape"), Tensor::new([k, n], db).expect("matmul grad shape"))
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
