//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and backward is a single reverse sweep.

use super::ops::{self, gemm};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var, usize),
    Mean(Var, usize),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Gelu(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf; it takes part in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let k = self.value(a).shape()[1];
        self.macs += (out.numel() * k) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.macs += (out.numel() * self.value(w).shape()[1]) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), trans_b)?;
        let k = *self.value(a).shape().last().unwrap();
        self.macs += (out.numel() * k) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::reshape(self.value(a), shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(a), axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: self.value(a).shape().to_vec(),
                reason: "transpose expects a matrix".into(),
            });
        }
        self.permute(a, &[1, 0])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::sum_axis(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::mean_axis(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let (out, inv_std) = ops::layer_norm_with_stats(self.value(x), axis, eps)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LayerNorm { x, axis, inv_std }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = ops::gelu(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow(self.value(x), axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_with_probs(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// `None` when `v` does not require grad or no backward pass has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`], but a leaf that requires grad and was not
    /// reached by the loss yields zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            self.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]),
        )
    }

    /// Copies the gradient of `v` into `target`'s grad buffer.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .grad_or_zeros(v)
            .ok_or_else(|| Error::MissingGradient(format!("{v:?}")))?;
        target.set_grad(g)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // accumulate `f(i)` into the grad slot of `v`, element by element
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|s| {
                        let n = s.len();
                        for (i, gi) in g.iter().enumerate() {
                            s[i % n] += gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|s| {
                    let (n, m) = (s.len(), bv.len());
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * bv[i % m];
                    }
                });
                acc(*b, &|s| {
                    let (n, m) = (s.len(), av.len());
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * av[i % m];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| {
                for (d, gi) in s.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &|s| gemm(m, n, k, g, false, bv.data(), true, s, 1.0));
                acc(*b, &|s| gemm(k, m, n, av.data(), true, g, false, s, 1.0));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / in_dim;
                acc(*x, &|s| gemm(rows, out_dim, in_dim, g, false, wv.data(), false, s, 1.0));
                acc(*w, &|s| gemm(out_dim, rows, in_dim, g, true, xv.data(), false, s, 1.0));
                if let Some(b) = b {
                    acc(*b, &|s| {
                        for row in g.chunks(out_dim) {
                            for (d, gi) in s.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.ndim();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = out.shape()[r - 1];
                let batch = av.numel() / (m * k);
                let trans_b = *trans_b;
                acc(*a, &|s| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        // da = g·bᵀ, or g·b when b is stored transposed
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut s[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &|s| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, si, 1.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, si, 1.0);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|s| {
                for (d, gi) in s.iter_mut().zip(g) {
                    *d += gi;
                }
            }),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let back = ops::permute(&gt, &inverse).expect("inverse permutation");
                acc(*a, &|s| {
                    for (d, gi) in s.iter_mut().zip(back.data()) {
                        *d += gi;
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
                let c = if matches!(nodes[idx].op, Op::Mean(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                acc(*a, &|s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc(*a, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc(*x, &|s| {
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let sum_g: f64 = (0..n).map(|j| g[at(j)]).sum();
                            let sum_gy: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            let r = inv_std[o * inner + i];
                            for j in 0..n {
                                s[at(j)] += r / nf * (nf * g[at(j)] - sum_g - y[at(j)] * sum_gy);
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = val(*a).data();
                acc(*a, &|s| {
                    for ((d, gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += gi * ops::gelu_grad_scalar(xi);
                    }
                });
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = val(v).shape()[*axis];
                    let off = offset;
                    acc(v, &|s| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + n) * inner];
                            for (d, gi) in s[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += gi;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, total, inner) = axis_split(val(*x).shape(), *axis);
                let n = out.shape()[*axis];
                acc(*x, &|s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * total + start) * inner..(o * total + start + n) * inner];
                        for (d, gi) in dst.iter_mut().zip(&g[o * n * inner..(o + 1) * n * inner]) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.shape()[1];
                let c = g[0] / labels.len() as f64;
                acc(*logits, &|s| {
                    for (d, p) in s.iter_mut().zip(probs.data()) {
                        *d += c * p;
                    }
                    for (row, &y) in labels.iter().enumerate() {
                        s[row * classes + y] -= c;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn disconnected_parameter_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let p = g.param(Tensor::from_fn(&[3], |i| i as f64));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(p), None);
        assert_eq!(g.grad_or_zeros(p), Some(vec![0.0; 3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn macs_counted_at_matrix_products() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 30);
        let w = g.constant(Tensor::zeros(&[4, 3]));
        g.linear(a, w, None).unwrap();
        assert_eq!(g.macs(), 30 + 24);
    }

    #[test]
    fn write_grad_fills_tensor_buffer() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2], |i| i as f64 + 1.0));
        let s = g.sum(x, 0).unwrap();
        g.backward(s).unwrap();
        let mut target = Tensor::zeros(&[2]);
        g.write_grad(x, &mut target).unwrap();
        assert_eq!(target.grad(), Some(&[1.0, 1.0][..]));
    }
}
