//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value and a backward closure. Nodes are appended after their inputs,
//! so walking the node list backwards is a reverse topological order and each
//! node is visited exactly once.
//!
//! Components with bespoke kernels (convolution, splat compositing, plane
//! sampling, spatial propagation) register themselves through
//! [`Tape::record`].

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{axpy, matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: input values, the forward output, the
/// upstream gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    params: Vec<(ParamId, Var)>,
    trainable: Box<dyn Fn(&str) -> bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_trainable(|_| true)
    }

    /// Only parameters whose name satisfies `pred` are bound as trainable
    /// leaves; all others enter the tape as constants.
    pub fn with_trainable(pred: impl Fn(&str) -> bool + 'static) -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), params: Vec::new(), trainable: Box::new(pred) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, inputs: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Binds a parameter (once per tape) as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = (self.trainable)(store.name(id));
        let v = self.push(store.get(id).clone(), Vec::new(), None, trainable);
        self.bound.insert(id, v);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    /// Records a custom operation. The closure receives the upstream gradient
    /// and must return one entry per input (`None` where not needed).
    pub fn record(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ins = inputs.iter().map(|v| v.0).collect();
        if requires_grad {
            self.push(value, ins, Some(backward), true)
        } else {
            self.push(value, ins, None, false)
        }
    }

    /// Propagates gradients from a scalar output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &g, needs: &needs };
            let out = bw(&ctx);
            debug_assert_eq!(out.len(), node.inputs.len());
            for (&j, gi) in node.inputs.iter().zip(out) {
                let Some(gi) = gi else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(gi.numel(), self.nodes[j].value.numel(), "gradient size mismatch");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi.reshape(self.nodes[j].value.shape().to_vec())),
                }
            }
        }
        let params = self.params.clone();
        let shapes = params.iter().map(|(_, v)| self.nodes[v.0].value.shape().to_vec()).collect();
        Grads { grads, params, shapes }
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(a).map(f);
        self.record(
            &[a],
            value,
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let y = c.output.data();
                let g = c.grad.data();
                let d = (0..x.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), d))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.record(&[a, b], value, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.record(&[a, b], value, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y));
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.record(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g / y));
                let gb = c.needs[1].then(|| {
                    let t = c.grad.zip_map(c.output, |g, q| g * q);
                    t.zip_map(c.inputs[1], |t, y| -t / y)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, move |x| x * s, move |_, _| s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, move |x| x + s, |_, _| 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape.to_vec());
        self.record(&[a], value, Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape().to_vec()))]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(&[a], value, Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[rows, cols] -> [cols]` column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, cols) = (t.rows(), t.cols());
        let mut acc = vec![0.0; cols];
        for i in 0..r {
            for (s, x) in acc.iter_mut().zip(t.row(i)) {
                *s += x;
            }
        }
        self.record(
            &[a],
            Tensor::new([cols], acc),
            Box::new(move |c| {
                let g = c.grad.data();
                let mut out = Vec::with_capacity(r * cols);
                for _ in 0..r {
                    out.extend_from_slice(g);
                }
                vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), out))]
            }),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    // ---- broadcasting -----------------------------------------------------

    /// `a[rows, cols] + b[cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        assert_eq!(tb.numel(), cols, "add_row width mismatch");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        self.record(
            &[a, b],
            out,
            Box::new(move |c| {
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![0.0; cols];
                    for row in c.grad.data().chunks(cols) {
                        for (s, x) in acc.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    Tensor::new(c.inputs[1].shape().to_vec(), acc)
                });
                vec![Some(c.grad.clone()), gb]
            }),
        )
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add_row(a, nb)
    }

    /// `a[rows, cols] * b[cols]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        assert_eq!(tb.numel(), cols, "mul_row width mismatch");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        self.record(
            &[a, b],
            out,
            Box::new(move |c| {
                let (ta, tb) = (c.inputs[0], c.inputs[1]);
                let ga = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    for row in g.data_mut().chunks_mut(cols) {
                        for (x, y) in row.iter_mut().zip(tb.data()) {
                            *x *= y;
                        }
                    }
                    g
                });
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![0.0; cols];
                    for (grow, arow) in c.grad.data().chunks(cols).zip(ta.data().chunks(cols)) {
                        for j in 0..cols {
                            acc[j] += grow[j] * arow[j];
                        }
                    }
                    Tensor::new(tb.shape().to_vec(), acc)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `a[rows, cols] * b[rows]`: scales each row by the matching entry of `b`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        assert_eq!(tb.numel(), ta.rows(), "mul_col height mismatch");
        let mut out = ta.clone();
        for (row, s) in out.data_mut().chunks_mut(cols).zip(tb.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        self.record(
            &[a, b],
            out,
            Box::new(move |c| {
                let (ta, tb) = (c.inputs[0], c.inputs[1]);
                let ga = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    for (row, s) in g.data_mut().chunks_mut(cols).zip(tb.data()) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    g
                });
                let gb = c.needs[1].then(|| {
                    let d = c
                        .grad
                        .data()
                        .chunks(cols)
                        .zip(ta.data().chunks(cols))
                        .map(|(g, a)| g.iter().zip(a).map(|(x, y)| x * y).sum())
                        .collect();
                    Tensor::new(tb.shape().to_vec(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a[m, k] x b[k, n]` (leading dims of `a` are flattened into rows).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.record(
            &[a, b],
            value,
            Box::new(|c| {
                let (ta, tb) = (c.inputs[0], c.inputs[1]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = c.needs[0].then(|| {
                    let bt = tb.transpose();
                    let mut out = vec![0.0; m * k];
                    matmul_into(c.grad.data(), bt.data(), &mut out, m, n, k);
                    Tensor::new(ta.shape().to_vec(), out)
                });
                let gb = c.needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    let g = c.grad.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut out[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    Tensor::new(tb.shape().to_vec(), out)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.record(&[a], value, Box::new(|c| vec![Some(c.grad.transpose())]))
    }

    /// Batched matrix product `[B, p, q] x [B, q, r] -> [B, p, r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm shapes {sa:?} {sb:?}");
        let (nb, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * p * r];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for n in 0..nb {
                matmul_into(
                    &da[n * p * q..],
                    &db[n * q * r..(n + 1) * q * r],
                    &mut out[n * p * r..(n + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        self.record(
            &[a, b],
            Tensor::new([nb, p, r], out),
            Box::new(move |c| {
                let (da, db, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let ga = c.needs[0].then(|| {
                    let mut out = vec![0.0; nb * p * q];
                    for n in 0..nb {
                        for i in 0..p {
                            for k in 0..q {
                                let mut s = 0.0;
                                for j in 0..r {
                                    s += g[n * p * r + i * r + j] * db[n * q * r + k * r + j];
                                }
                                out[n * p * q + i * q + k] = s;
                            }
                        }
                    }
                    Tensor::new([nb, p, q], out)
                });
                let gb = c.needs[1].then(|| {
                    let mut out = vec![0.0; nb * q * r];
                    for n in 0..nb {
                        for k in 0..q {
                            for j in 0..r {
                                let mut s = 0.0;
                                for i in 0..p {
                                    s += da[n * p * q + i * q + k] * g[n * p * r + i * r + j];
                                }
                                out[n * q * r + k * r + j] = s;
                            }
                        }
                    }
                    Tensor::new([nb, q, r], out)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `[B, p, q] -> [B, q, p]`.
    pub fn btranspose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (nb, p, q) = (s[0], s[1], s[2]);
        let tr = move |d: &[f64], p: usize, q: usize| {
            let mut out = vec![0.0; nb * p * q];
            for n in 0..nb {
                for i in 0..p {
                    for j in 0..q {
                        out[n * p * q + j * p + i] = d[n * p * q + i * q + j];
                    }
                }
            }
            out
        };
        let value = Tensor::new([nb, q, p], tr(self.value(a).data(), p, q));
        self.record(&[a], value, Box::new(move |c| vec![Some(Tensor::new([nb, p, q], tr(c.grad.data(), q, p)))]))
    }

    // ---- column manipulation ---------------------------------------------

    /// Columns `[start, end)` of a `[rows, cols]` view.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (r, cols) = (t.rows(), t.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        self.record(
            &[a],
            Tensor::new(shape, out),
            Box::new(move |c| {
                let mut g = vec![0.0; r * cols];
                for (i, grow) in c.grad.data().chunks(w).enumerate() {
                    g[i * cols + start..i * cols + end].copy_from_slice(grow);
                }
                vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).cols()).collect();
        let rows = self.value(parts[0]).rows();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in parts.iter().zip(&widths) {
            let t = self.value(v);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        self.record(
            parts,
            Tensor::new(shape, out),
            Box::new(move |c| {
                let g = c.grad.data();
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    if c.needs[k] {
                        let mut gi = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gi.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        res.push(Some(Tensor::new(c.inputs[k].shape().to_vec(), gi)));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            }),
        )
    }

    /// Stacks `[n]` vectors into an `[n, k]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Var {
        let n = self.value(cols[0]).numel();
        let reshaped: Vec<Var> = cols.iter().map(|&v| self.reshape(v, &[n, 1])).collect();
        self.concat_cols(&reshaped)
    }

    /// Column `j` of a `[rows, cols]` view as an `[rows]` vector.
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let s = self.slice_cols(a, j, j + 1);
        let r = self.value(s).numel();
        self.reshape(s, &[r])
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        assert_eq!(perm.len(), cols);
        let mut out = t.clone();
        for (orow, irow) in out.data_mut().chunks_mut(cols).zip(t.data().chunks(cols)) {
            for (j, &p) in perm.iter().enumerate() {
                orow[j] = irow[p];
            }
        }
        let perm = perm.to_vec();
        self.record(
            &[a],
            out,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape().to_vec());
                for (irow, grow) in g.data_mut().chunks_mut(cols).zip(c.grad.data().chunks(cols)) {
                    for (j, &p) in perm.iter().enumerate() {
                        irow[p] += grow[j];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    // ---- row-wise normalizations -----------------------------------------

    /// Row-wise softmax of a `[rows, cols]` view.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.record(
            &[a],
            out,
            Box::new(move |c| {
                let mut g = c.grad.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(cols).zip(c.output.data().chunks(cols)) {
                    let d: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gj, yj) in grow.iter_mut().zip(yrow) {
                        *gj = yj * (*gj - d);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Scales each row of a `[rows, cols]` view to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.record(
            &[a],
            out,
            Box::new(move |c| {
                let mut g = c.grad.clone();
                let rows = c.inputs[0].data().chunks(cols).zip(c.output.data().chunks(cols));
                for (grow, (xrow, yrow)) in g.data_mut().chunks_mut(cols).zip(rows) {
                    let n = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let d: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gj, yj) in grow.iter_mut().zip(yrow) {
                        *gj = (*gj - d * yj) / n;
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every trainable parameter bound on the tape, zero-filled
    /// where no gradient reached it.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .zip(&self.shapes)
            .map(|(&(id, v), shape)| {
                let g = self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.clone()));
                (id, g)
            })
            .collect()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor> {
        self.params
            .iter()
            .zip(&self.shapes)
            .find(|((pid, _), _)| *pid == id)
            .map(|(&(_, v), shape)| self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![3.0, -1.0]));
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_on_constant_gives_zero_param_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full([3], 2.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let c = tape.constant(Tensor::scalar(4.0));
        let _ = tape.mul_row(w, w);
        let g = tape.backward(c);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert!(grads[0].1.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_input_accumulates_once_per_use() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let a = tape.add(x, x);
        let b = tape.mul(a, x);
        let g = tape.backward(b);
        // b = 2x^2
        assert_eq!(g.get(x).unwrap().item(), 8.0);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::new();
        let a = store.add("net.w", Tensor::scalar(1.0));
        let b = store.add("gauss.w", Tensor::scalar(1.0));
        let mut tape = Tape::with_trainable(|n| n.starts_with("net."));
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        assert!(tape.requires_grad(va));
        assert!(!tape.requires_grad(vb));
    }
}
