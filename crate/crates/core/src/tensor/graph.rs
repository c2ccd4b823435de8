use std::cell::RefCell;
use std::fmt;

use super::kernels::{self, binary, reduce_to};
use super::{check_axis, split_at_axis, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MatMul { a: usize, b: usize, batched: bool },
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Transpose { x: usize, perm: Vec<usize> },
    Reshape(usize),
    BroadcastTo(usize),
    Gather { x: usize, axis: usize, indices: Vec<usize> },
    Rope { x: usize, base: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Node ids are assigned in creation order,
/// which is a topological order of the computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Adjoint of `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// One-hot encoding of `indices` with shape `prefix ++ [depth]`; constant.
    pub fn one_hot(&self, indices: &[usize], prefix: &[usize], depth: usize) -> Result<Var<'_>> {
        let n: usize = prefix.iter().product();
        if n != indices.len() {
            return Err(Error::shape(format!("{} indices for prefix shape {prefix:?}", indices.len())));
        }
        let mut data = vec![0.0; n * depth];
        for (i, &k) in indices.iter().enumerate() {
            if k >= depth {
                return Err(Error::shape(format!("one_hot index {k} >= depth {depth}")));
            }
            data[i * depth + k] = 1.0;
        }
        let mut shape = prefix.to_vec();
        shape.push(depth);
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Concatenation along `axis`; all parts must agree on the other axes.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let nodes = self.nodes.borrow();
        let values: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
        let out = kernels::concat_axis(&values, axis)?;
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg))
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.graph) || v.id >= self.len() {
            return Err(Error::invalid("variable does not belong to this graph"));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`, accumulating adjoints of every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in backward_op(&nodes, id, &g)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(nodes.len(), None);
        Ok(Grads { grads, shapes })
    }

    /// Adjoints of `loss` with respect to each of `leaves`.
    pub fn grad(&self, loss: Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<Tensor>> {
        for &l in leaves {
            self.check_owner(l)?;
        }
        let g = self.backward(loss)?;
        Ok(leaves.iter().map(|&l| g.get(l)).collect())
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    let shape_of = |i: usize| nodes[i].value.shape().to_vec();
    Ok(match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, reduce_to(g, &shape_of(*a))), (*b, reduce_to(g, &shape_of(*b)))],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, &shape_of(*a))),
            (*b, reduce_to(&g.map(|x| -x), &shape_of(*b))),
        ],
        Op::Mul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, reduce_to(&binary(g, val(*b), |x, y| x * y)?, &shape_of(*a))));
            }
            if nodes[*b].requires_grad {
                v.push((*b, reduce_to(&binary(g, val(*a), |x, y| x * y)?, &shape_of(*b))));
            }
            v
        }
        Op::Div(a, b) => {
            let ga = binary(g, val(*b), |x, y| x / y)?;
            let gb = binary(&binary(g, out, |x, y| -x * y)?, val(*b), |x, y| x / y)?;
            vec![(*a, reduce_to(&ga, &shape_of(*a))), (*b, reduce_to(&gb, &shape_of(*b)))]
        }
        Op::Neg(a) => vec![(*a, g.map(|x| -x))],
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, binary(g, out, |x, y| x * y)?)],
        Op::Log(a) => vec![(*a, binary(g, val(*a), |x, y| x / y)?)],
        Op::Tanh(a) => vec![(*a, binary(g, out, |x, y| x * (1.0 - y * y))?)],
        Op::Sigmoid(a) => vec![(*a, binary(g, out, |x, y| x * y * (1.0 - y))?)],
        Op::Gelu(a) => vec![(*a, binary(g, val(*a), |gx, x| gx * gelu_grad(x))?)],
        Op::Clamp(a, lo, hi) => {
            vec![(*a, binary(g, val(*a), |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 })?)]
        }
        Op::Softmax(a, axis) => {
            let gy = binary(g, out, |x, y| x * y)?;
            let s = kernels::sum_axis(&gy, *axis);
            let n = out.shape()[*axis];
            let s = kernels::expand_axis(&s, *axis, n, 1.0);
            let gx = binary(&binary(g, &s, |x, y| x - y)?, out, |x, y| x * y)?;
            vec![(*a, gx)]
        }
        Op::LogSoftmax(a, axis) => {
            let s = kernels::sum_axis(g, *axis);
            let n = out.shape()[*axis];
            let s = kernels::expand_axis(&s, *axis, n, 1.0);
            let p = out.map(f64::exp);
            let gx = binary(g, &binary(&p, &s, |x, y| x * y)?, |x, y| x - y)?;
            vec![(*a, gx)]
        }
        Op::LayerNorm { x, gamma, beta, axis, xhat, inv_std } => {
            layer_norm_backward(g, val(*gamma), *x, *gamma, *beta, *axis, xhat, inv_std)
        }
        Op::MatMul { a, b, batched } => matmul_backward(g, val(*a), val(*b), *a, *b, *batched),
        Op::Sum(a, axis) => vec![(*a, kernels::expand_axis(g, *axis, val(*a).shape()[*axis], 1.0))],
        Op::Mean(a, axis) => {
            let n = val(*a).shape()[*axis];
            vec![(*a, kernels::expand_axis(g, *axis, n, 1.0 / n as f64))]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).shape()[*axis];
                v.push((p, kernels::slice_axis(g, *axis, start, len)?));
                start += len;
            }
            v
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = split_at_axis(xs, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; xs.iter().product()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, Tensor::new(xs.to_vec(), data)?)]
        }
        Op::Transpose { x, perm } => vec![(*x, kernels::permute(g, &kernels::inverse_perm(perm))?)],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::BroadcastTo(a) => vec![(*a, reduce_to(g, val(*a).shape()))],
        Op::Gather { x, axis, indices } => {
            vec![(*x, kernels::scatter_add_axis(g, val(*x).shape(), *axis, indices))]
        }
        Op::Rope { x, base } => vec![(*x, kernels::rope_rotate(g, *base, -1.0)?)],
    })
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    g: &Tensor,
    gamma_v: &Tensor,
    x: usize,
    gamma: usize,
    beta: usize,
    axis: usize,
    xhat: &[f64],
    inv_std: &[f64],
) -> Vec<(usize, Tensor)> {
    let shape = g.shape();
    let (outer, n, inner) = split_at_axis(shape, axis);
    let gm = gamma_v.data();
    let mut gx = vec![0.0; g.numel()];
    let mut gg = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..n {
                let k = base + j * inner;
                let gv = g.data()[k];
                gg[j] += gv * xhat[k];
                gb[j] += gv;
                let d = gv * gm[j];
                mean_d += d;
                mean_dx += d * xhat[k];
            }
            mean_d /= n as f64;
            mean_dx /= n as f64;
            let s = inv_std[o * inner + i];
            for j in 0..n {
                let k = base + j * inner;
                let d = g.data()[k] * gm[j];
                gx[k] = s * (d - mean_d - xhat[k] * mean_dx);
            }
        }
    }
    vec![
        (x, Tensor { shape: shape.to_vec(), data: gx }),
        (gamma, Tensor::from_vec(gg).reshape(gamma_v.shape()).expect("gamma shape")),
        (beta, Tensor::from_vec(gb).reshape(gamma_v.shape()).expect("beta shape")),
    ]
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2 operands, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dimensions differ: {a:?} · {b:?}")));
    }
    if b.len() == 2 {
        let batch: usize = a[..a.len() - 2].iter().product();
        return Ok((batch, m, k, n, false));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape(format!("matmul batch dimensions differ: {a:?} · {b:?}")));
    }
    Ok((a[..a.len() - 2].iter().product(), m, k, n, true))
}

fn matmul_backward(g: &Tensor, av: &Tensor, bv: &Tensor, a: usize, b: usize, batched: bool) -> Vec<(usize, Tensor)> {
    let (batch, m, k, n, _) = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
    let mut ga = vec![0.0; av.numel()];
    let mut gb = vec![0.0; bv.numel()];
    if batched {
        for i in 0..batch {
            let gs = &g.data()[i * m * n..(i + 1) * m * n];
            let a_s = &av.data()[i * m * k..(i + 1) * m * k];
            let b_s = &bv.data()[i * k * n..(i + 1) * k * n];
            kernels::gemm(m, n, k, gs, false, b_s, true, &mut ga[i * m * k..(i + 1) * m * k], false);
            kernels::gemm(k, m, n, a_s, true, gs, false, &mut gb[i * k * n..(i + 1) * k * n], false);
        }
    } else {
        let rows = batch * m;
        kernels::gemm(rows, n, k, g.data(), false, bv.data(), true, &mut ga, false);
        kernels::gemm(k, rows, n, av.data(), true, g.data(), false, &mut gb, false);
    }
    vec![
        (a, Tensor::new(av.shape().to_vec(), ga).expect("shape")),
        (b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
    ]
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn rank(&self) -> usize {
        self.with_value(|t| t.rank())
    }

    /// Index of the last axis.
    pub fn last(&self) -> usize {
        self.rank().saturating_sub(1)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: Var<'g>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::invalid("operands recorded on different graphs"));
        }
        Ok(())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'g>> {
        let (out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (f(&n.value)?, n.requires_grad)
        };
        Ok(self.graph.push(out, op, rg))
    }

    fn binary_op(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let (out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (binary(&a.value, &b.value, f)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(out, op, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.unary(Op::Neg(self.id), |t| Ok(t.map(|x| -x)))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(self.id, c), |t| Ok(t.map(|x| x * c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::AddScalar(self.id), |t| Ok(t.map(|x| x + c)))
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.mul(*self)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Op::Exp(self.id), |t| Ok(t.map(f64::exp)))
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary(Op::Log(self.id), |t| Ok(t.map(f64::ln)))
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(Op::Tanh(self.id), |t| Ok(t.map(f64::tanh)))
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(Op::Sigmoid(self.id), |t| Ok(t.map(|x| 1.0 / (1.0 + (-x).exp()))))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary(Op::Gelu(self.id), |t| {
            Ok(t.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())))
        })
    }

    /// Elementwise clamp to `[lo, hi]`; the adjoint is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary(Op::Clamp(self.id, lo, hi), |t| Ok(t.map(|x| x.clamp(lo, hi))))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.unary(Op::Softmax(self.id, axis), |t| {
            check_axis(axis, t.rank())?;
            Ok(kernels::softmax_axis(t, axis))
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.unary(Op::LogSoftmax(self.id, axis), |t| {
            check_axis(axis, t.rank())?;
            Ok(kernels::log_softmax_axis(t, axis))
        })
    }

    /// Normalizes over `axis` (eps 1e-5) then applies `gamma`/`beta`, both of
    /// shape `[shape[axis]]`.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, axis: usize) -> Result<Var<'g>> {
        self.same_graph(gamma)?;
        self.same_graph(beta)?;
        let (out, xhat, inv_std, rg) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            check_axis(axis, x.rank())?;
            let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let n = x.shape()[axis];
            if gv.shape() != [n] || bv.shape() != [n] {
                return Err(Error::shape(format!(
                    "layer_norm over axis of size {n} with scale {:?} and offset {:?}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            let (outer, _, inner) = split_at_axis(x.shape(), axis);
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mean = (0..n).map(|j| x.data()[base + j * inner]).sum::<f64>() / n as f64;
                    let var = (0..n).map(|j| (x.data()[base + j * inner] - mean).powi(2)).sum::<f64>() / n as f64;
                    let s = 1.0 / (var + LN_EPS).sqrt();
                    inv_std[o * inner + i] = s;
                    for j in 0..n {
                        let k = base + j * inner;
                        xhat[k] = (x.data()[k] - mean) * s;
                        out[k] = xhat[k] * gv.data()[j] + bv.data()[j];
                    }
                }
            }
            let rg = nodes[self.id].requires_grad || nodes[gamma.id].requires_grad || nodes[beta.id].requires_grad;
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std, rg)
        };
        Ok(self.graph.push(
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, axis, xhat, inv_std },
            rg,
        ))
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or
    /// `[B.., m, k] · [B.., k, n]` (identical batch dimensions).
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let (out, batched, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (batch, m, k, n, batched) = matmul_dims(a.shape(), b.shape())?;
            let mut data = vec![0.0; batch * m * n];
            if batched {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        false,
                        &mut data[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            } else {
                kernels::gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut data, false);
            }
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(n);
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Tensor::new(shape, data)?, batched, rg)
        };
        Ok(self.graph.push(out, Op::MatMul { a: self.id, b: other.id, batched }, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'g>> {
        self.unary(Op::Sum(self.id, axis), |t| {
            check_axis(axis, t.rank())?;
            Ok(kernels::sum_axis(t, axis))
        })
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'g>> {
        self.unary(Op::Mean(self.id, axis), |t| {
            check_axis(axis, t.rank())?;
            let n = t.shape()[axis] as f64;
            Ok(kernels::sum_axis(t, axis).map(|x| x / n))
        })
    }

    pub fn sum_all(&self) -> Result<Var<'g>> {
        self.unary(Op::SumAll(self.id), |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean_all(&self) -> Result<Var<'g>> {
        let n = self.with_value(|t| t.numel()) as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        self.unary(Op::Slice { x: self.id, axis, start }, |t| {
            check_axis(axis, t.rank())?;
            kernels::slice_axis(t, axis, start, len)
        })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::Transpose { x: self.id, perm: perm.to_vec() }, |t| kernels::permute(t, perm))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::BroadcastTo(self.id), |t| {
            let out = kernels::broadcast_shape(t.shape(), shape)?;
            if out != shape {
                return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
            }
            binary(t, &Tensor::zeros(shape), |x, _| x)
        })
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&self, indices: &[usize], axis: usize) -> Result<Var<'g>> {
        self.unary(Op::Gather { x: self.id, axis, indices: indices.to_vec() }, |t| {
            check_axis(axis, t.rank())?;
            kernels::gather_axis(t, axis, indices)
        })
    }

    /// Same value, cut off from the adjoint flow.
    pub fn stop_gradient(&self) -> Var<'g> {
        let v = self.value();
        self.graph.constant(v)
    }

    /// Rotary position rotation on `[.., L, d]`: position is the index
    /// along the second-to-last axis.
    pub fn rope(&self, base: f64) -> Result<Var<'g>> {
        self.unary(Op::Rope { x: self.id, base }, |t| kernels::rope_rotate(t, base, 1.0))
    }
}
