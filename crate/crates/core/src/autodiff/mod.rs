//! A small reverse-mode automatic differentiation engine over f64 arrays.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! record in reverse. Parameters live outside the graph in a [`ParamStore`] so a
//! fresh graph can be built for every step.

mod gemm;
mod params;
mod tensor;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use gemm::{batched_gemm, gemm, Layout};

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    MeanAxis { x: usize, axis: usize },
    Expand { x: usize, axis: usize, n: usize },
    SumAll(usize),
    GatherRows { x: usize, index: Vec<Option<usize>> },
    Custom { inputs: Vec<usize>, grads: Vec<Rc<Tensor>> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// A value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn of(&self, v: Var<'_>) -> Option<&[f64]> {
        self.by_node.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|&node| self.by_node[node].as_deref())
    }

    /// Gradients of every parameter that took part in the pass, in id order.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &node)| self.by_node[node].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn suffix_broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into the axis order `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let nd = out_shape.len();
    // Trailing axes that stay in place are copied as contiguous runs.
    let mut kept = 0;
    while kept < nd && perm[nd - 1 - kept] == nd - 1 - kept {
        kept += 1;
    }
    let run: usize = shape[nd - kept..].iter().product();
    let outer = nd - kept;
    let src_strides: Vec<usize> = perm[..outer].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; outer];
    let mut offset = 0usize;
    for _ in 0..src.len() / run.max(1) {
        out.extend_from_slice(&src[offset..offset + run]);
        for d in (0..outer).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A constant input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked but which is not a stored parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter into the graph; repeated calls share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.push_rc(store.shared(id), Op::Param, true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Splices an externally differentiated scalar into the graph.
    ///
    /// `grads[i]` is the derivative of `value` with respect to `inputs[i]`.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g>], value: f64, grads: Vec<Tensor>) -> Var<'g> {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(v.shape(), g.shape(), "custom gradient shape mismatch");
        }
        let needs = inputs.iter().any(|v| self.needs(v.id));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                grads: grads.into_iter().map(Rc::new).collect(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
            if !nodes[id].needs_grad {
                return;
            }
            let n = nodes[id].value.numel();
            let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        }

        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| add_into(g, &gy));
                    acc(&mut grads, &nodes, *b, |g| add_into(g, &gy));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| add_into(g, &gy));
                    acc(&mut grads, &nodes, *b, |g| {
                        g.iter_mut().zip(&gy).for_each(|(g, d)| *g -= d)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gy).zip(vb.data()) {
                            *g += d * x;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&gy).zip(va.data()) {
                            *g += d * x;
                        }
                    });
                }
                Op::AddBcast(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| add_into(g, &gy));
                    acc(&mut grads, &nodes, *b, |g| {
                        let r = g.len();
                        for chunk in gy.chunks_exact(r) {
                            add_into(g, chunk);
                        }
                    });
                }
                Op::MulBcast(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let r = vb.numel();
                    acc(&mut grads, &nodes, *a, |g| {
                        for (gc, dc) in g.chunks_exact_mut(r).zip(gy.chunks_exact(r)) {
                            for ((g, d), x) in gc.iter_mut().zip(dc).zip(vb.data()) {
                                *g += d * x;
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for (dc, xc) in gy.chunks_exact(r).zip(va.data().chunks_exact(r)) {
                            for ((g, d), x) in g.iter_mut().zip(dc).zip(xc) {
                                *g += d * x;
                            }
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, &nodes, *a, |g| {
                        g.iter_mut().zip(&gy).for_each(|(g, d)| *g += d * s)
                    });
                }
                Op::MulScalar(a, s) => {
                    let (va, vs) = (&nodes[*a].value, nodes[*s].value.item());
                    acc(&mut grads, &nodes, *a, |g| {
                        g.iter_mut().zip(&gy).for_each(|(g, d)| *g += d * vs)
                    });
                    acc(&mut grads, &nodes, *s, |g| {
                        g[0] += gy.iter().zip(va.data()).map(|(d, x)| d * x).sum::<f64>()
                    });
                }
                Op::MatMul(x, w) => {
                    let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
                    let (kk, n) = (vw.shape()[0], vw.shape()[1]);
                    let rows = vx.numel() / kk;
                    acc(&mut grads, &nodes, *x, |g| {
                        gemm(rows, n, kk, &gy, Layout::Normal, vw.data(), Layout::Transposed, 1.0, g)
                    });
                    acc(&mut grads, &nodes, *w, |g| {
                        gemm(kk, rows, n, vx.data(), Layout::Transposed, &gy, Layout::Normal, 1.0, g)
                    });
                }
                Op::Bmm { a, b, trans_b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (batch, m, kk) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let n = y.shape()[2];
                    acc(&mut grads, &nodes, *a, |g| {
                        let lb = if *trans_b { Layout::Normal } else { Layout::Transposed };
                        batched_gemm(batch, m, n, kk, &gy, Layout::Normal, vb.data(), lb, 1.0, g)
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        if *trans_b {
                            batched_gemm(batch, n, m, kk, &gy, Layout::Transposed, va.data(), Layout::Normal, 1.0, g)
                        } else {
                            batched_gemm(batch, kk, m, n, va.data(), Layout::Transposed, &gy, Layout::Normal, 1.0, g)
                        }
                    });
                }
                Op::Relu(a) => {
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((g, d), yv) in g.iter_mut().zip(&gy).zip(y.data()) {
                            if *yv > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let n = *y.shape().last().unwrap();
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((gc, dc), yc) in g
                            .chunks_exact_mut(n)
                            .zip(gy.chunks_exact(n))
                            .zip(y.data().chunks_exact(n))
                        {
                            let dot: f64 = dc.iter().zip(yc).map(|(d, y)| d * y).sum();
                            for ((g, d), yv) in gc.iter_mut().zip(dc).zip(yc) {
                                *g += yv * (d - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = *y.shape().last().unwrap();
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, ((gc, dc), hc)) in g
                            .chunks_exact_mut(n)
                            .zip(gy.chunks_exact(n))
                            .zip(xhat.chunks_exact(n))
                            .enumerate()
                        {
                            let mean_d = dc.iter().sum::<f64>() / n as f64;
                            let mean_dh = dc.iter().zip(hc).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                            for ((g, d), h) in gc.iter_mut().zip(dc).zip(hc) {
                                *g += inv_std[r] * (d - mean_d - h * mean_dh);
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, &nodes, *a, |g| add_into(g, &gy));
                }
                Op::Permute(a, perm) => {
                    let inv = inverse_perm(perm);
                    let (_, back) = permute_data(&gy, y.shape(), &inv);
                    acc(&mut grads, &nodes, *a, |g| add_into(g, &back));
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, n, inner) = split_axis(nodes[*x].value.shape(), *axis);
                    acc(&mut grads, &nodes, *x, |g| {
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    g[(o * n + j) * inner + i] += gy[o * inner + i] / n as f64;
                                }
                            }
                        }
                    });
                }
                Op::Expand { x, axis, n } => {
                    let (outer, _, inner) = split_axis(y.shape(), *axis);
                    acc(&mut grads, &nodes, *x, |g| {
                        for o in 0..outer {
                            for j in 0..*n {
                                let src = &gy[(o * n + j) * inner..(o * n + j + 1) * inner];
                                add_into(&mut g[o * inner..(o + 1) * inner], src);
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().for_each(|g| *g += gy[0]));
                }
                Op::GatherRows { x, index } => {
                    let row = y.numel() / index.len().max(1);
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, src) in index.iter().enumerate() {
                            if let Some(s) = src {
                                add_into(&mut g[s * row..(s + 1) * row], &gy[r * row..(r + 1) * row]);
                            }
                        }
                    });
                }
                Op::Custom { inputs, grads: local } => {
                    for (inp, lg) in inputs.iter().zip(local) {
                        acc(&mut grads, &nodes, *inp, |g| {
                            g.iter_mut().zip(lg.data()).for_each(|(g, l)| *g += gy[0] * l)
                        });
                    }
                }
            }
        }
        Gradients {
            by_node: grads,
            params: self.params.borrow().clone(),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn needs(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn binary(self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let needs = self.needs() || other.needs();
        self.graph.push(Tensor::new(a.shape(), data), op, needs)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn bcast(self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(
            suffix_broadcast_ok(a.shape(), b.shape()),
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        );
        let r = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(r) {
            data.extend(chunk.iter().zip(b.data()).map(|(x, y)| f(*x, *y)));
        }
        let needs = self.needs() || other.needs();
        self.graph.push(Tensor::new(a.shape(), data), op, needs)
    }

    /// Adds `other`, whose shape is a suffix of `self`'s, to every matching block.
    pub fn add_bcast(self, other: Var<'g>) -> Var<'g> {
        self.bcast(other, |x, y| x + y, Op::AddBcast(self.id, other.id))
    }

    pub fn mul_bcast(self, other: Var<'g>) -> Var<'g> {
        self.bcast(other, |x, y| x * y, Op::MulBcast(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        self.graph
            .push(Tensor::new(a.shape(), data), Op::Scale(self.id, s), self.needs())
    }

    /// Multiplies by a one-element variable.
    pub fn mul_scalar(self, s: Var<'g>) -> Var<'g> {
        let (a, sv) = (self.value(), s.value());
        let k = sv.item();
        let data = a.data().iter().map(|x| x * k).collect();
        let needs = self.needs() || s.needs();
        self.graph
            .push(Tensor::new(a.shape(), data), Op::MulScalar(self.id, s.id), needs)
    }

    /// `(..., k) x (k, n) -> (..., n)`.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        let (kk, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(*x.shape().last().unwrap(), kk, "matmul inner dimension mismatch");
        let rows = x.numel() / kk;
        let mut out = vec![0.0; rows * n];
        gemm(rows, kk, n, x.data(), Layout::Normal, wv.data(), Layout::Normal, 0.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs() || w.needs();
        self.graph
            .push(Tensor::new(&shape, out), Op::MatMul(self.id, w.id), needs)
    }

    /// Batched product of `(b, m, k)` with `(b, k, n)`, or with `(b, n, k)` transposed.
    pub fn bmm(self, other: Var<'g>, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(a.shape().len() == 3 && b.shape().len() == 3, "bmm needs 3-D operands");
        let (batch, m, kk) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], batch, "bmm batch mismatch");
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        assert_eq!(bk, kk, "bmm inner dimension mismatch");
        let mut out = vec![0.0; batch * m * n];
        let lb = if trans_b { Layout::Transposed } else { Layout::Normal };
        batched_gemm(batch, m, kk, n, a.data(), Layout::Normal, b.data(), lb, 0.0, &mut out);
        let needs = self.needs() || other.needs();
        self.graph.push(
            Tensor::new(&[batch, m, n], out),
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
            needs,
        )
    }

    pub fn relu(self) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.graph
            .push(Tensor::new(a.shape(), data), Op::Relu(self.id), self.needs())
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut data = Vec::with_capacity(a.numel());
        for row in a.data().chunks_exact(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|x| (x - max).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|e| *e /= z);
        }
        self.graph
            .push(Tensor::new(a.shape(), data), Op::Softmax(self.id), self.needs())
    }

    /// Normalises the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self) -> Var<'g> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let rows = a.numel() / n;
        let mut xhat = Vec::with_capacity(a.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in a.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|x| (x - mean) * is));
        }
        let value = Tensor::new(a.shape(), xhat.clone());
        self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                xhat,
                inv_std,
            },
            self.needs(),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            a.numel(),
            "cannot reshape {:?} to {shape:?}",
            a.shape()
        );
        let value = Tensor::new(shape, a.data().to_vec());
        self.graph.push(value, Op::Reshape(self.id), self.needs())
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let a = self.value();
        assert_eq!(perm.len(), a.shape().len(), "permutation rank mismatch");
        let (shape, data) = permute_data(a.data(), a.shape(), perm);
        self.graph.push(
            Tensor::new(&shape, data),
            Op::Permute(self.id, perm.to_vec()),
            self.needs(),
        )
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let a = self.value();
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.graph.push(
            Tensor::new(&shape, out),
            Op::MeanAxis { x: self.id, axis },
            self.needs(),
        )
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the data.
    pub fn expand(self, axis: usize, n: usize) -> Var<'g> {
        let a = self.value();
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(a.numel() * n);
        for o in 0..outer {
            let block = &a.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(block);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.insert(axis, n);
        self.graph.push(
            Tensor::new(&shape, out),
            Op::Expand { x: self.id, axis, n },
            self.needs(),
        )
    }

    pub fn sum_all(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.graph
            .push(Tensor::scalar(s), Op::SumAll(self.id), self.needs())
    }

    /// Selects rows along axis 0; `None` produces a zero row.
    pub fn gather_rows(self, index: &[Option<usize>]) -> Var<'g> {
        let a = self.value();
        let rows = a.shape()[0];
        let row: usize = a.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * row);
        for src in index {
            match src {
                Some(s) => {
                    assert!(*s < rows, "gather index {s} out of {rows}");
                    out.extend_from_slice(&a.data()[s * row..(s + 1) * row]);
                }
                None => out.extend(std::iter::repeat_n(0.0, row)),
            }
        }
        let mut shape = a.shape().to_vec();
        shape[0] = index.len();
        self.graph.push(
            Tensor::new(&shape, out),
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            self.needs(),
        )
    }

    /// Same value, no gradient.
    pub fn detach(self) -> Var<'g> {
        let v = self.value();
        self.graph.push_rc(v, Op::Leaf, false)
    }
}
