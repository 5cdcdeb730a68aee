use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels;
use super::{real, Metric, Real, Tensor};
use crate::error::{Error, Result};

const LAYERNORM_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    PairDist {
        x: usize,
        metric: Metric,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Bce {
        p: usize,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record-on-execute computation graph. One backward pass per tape.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` is not tracked
    /// or the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros for untouched tracked nodes.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contrib: &[T]) {
    match slot {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked leaf; its gradient is reported by `backward`.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            if wants(*a) {
                let mut ga = vec![T::zero(); m * k];
                kernels::matmul_nt(g, val(*b).data(), &mut ga, m, n, k);
                add_into(&mut grads[*a], &ga);
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); k * n];
                kernels::matmul_tn(val(*a).data(), g, &mut gb, m, k, n);
                add_into(&mut grads[*b], &gb);
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*b) {
                add_into(&mut grads[*b], g);
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*b) {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                add_into(&mut grads[*b], &neg);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let ga: Vec<T> = g.iter().zip(val(*b).data()).map(|(&g, &b)| g * b).collect();
                add_into(&mut grads[*a], &ga);
            }
            if wants(*b) {
                let gb: Vec<T> = g.iter().zip(val(*a).data()).map(|(&g, &a)| g * a).collect();
                add_into(&mut grads[*b], &gb);
            }
        }
        Op::AddRow(a, b) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*b) {
                let n = val(*b).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks_exact(n) {
                    for (s, &v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                add_into(&mut grads[*b], &gb);
            }
        }
        Op::Scale(a, c) => {
            let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
            add_into(&mut grads[*a], &ga);
        }
        Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[*a], g),
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2().unwrap();
            let mut ga = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            add_into(&mut grads[*a], &ga);
        }
        Op::Narrow { x, axis, start } => {
            let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
            let out_len = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); val(*x).len()];
            for o in 0..outer {
                let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
                let dst_off = o * len * inner + start * inner;
                gx[dst_off..dst_off + out_len * inner].copy_from_slice(src);
            }
            add_into(&mut grads[*x], &gx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if wants(inp) {
                    let mut gi = Vec::with_capacity(val(inp).len());
                    for o in 0..outer {
                        let s = o * total * inner + offset * inner;
                        gi.extend_from_slice(&g[s..s + len * inner]);
                    }
                    add_into(&mut grads[inp], &gi);
                }
                offset += len;
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |t: usize| o * len * inner + t * inner + i;
                    let s = (0..len).fold(T::zero(), |acc, t| acc + g[idx(t)] * y[idx(t)]);
                    for t in 0..len {
                        gx[idx(t)] = y[idx(t)] * (g[idx(t)] - s);
                    }
                }
            }
            add_into(&mut grads[*x], &gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*gain).len();
            let gamma = val(*gain).data();
            let rows = xhat.len() / d;
            if wants(*x) {
                let mut gx = vec![T::zero(); xhat.len()];
                let dn: T = real(d as f64);
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dxhat: Vec<T> = gr.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat.iter().zip(xh).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / dn;
                    for c in 0..d {
                        gx[r * d + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                add_into(&mut grads[*x], &gx);
            }
            if wants(*gain) {
                let mut gg = vec![T::zero(); d];
                for (i, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                    gg[i % d] += gv * xh;
                }
                add_into(&mut grads[*gain], &gg);
            }
            if wants(*bias) {
                let mut gb = vec![T::zero(); d];
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % d] += gv;
                }
                add_into(&mut grads[*bias], &gb);
            }
        }
        Op::Gelu(a) => {
            let ga: Vec<T> = g
                .iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect();
            add_into(&mut grads[*a], &ga);
        }
        Op::Relu(a) => {
            let ga: Vec<T> = g
                .iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            add_into(&mut grads[*a], &ga);
        }
        Op::Sigmoid(a) => {
            let ga: Vec<T> = g
                .iter()
                .zip(node.value.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            add_into(&mut grads[*a], &ga);
        }
        Op::Sum(a) => {
            let ga = vec![g[0]; val(*a).len()];
            add_into(&mut grads[*a], &ga);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            let ga = vec![g[0] / real(n as f64); n];
            add_into(&mut grads[*a], &ga);
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).dims2().unwrap();
            let rn: T = real(r as f64);
            let mut ga = Vec::with_capacity(r * c);
            for _ in 0..r {
                ga.extend(g.iter().map(|&v| v / rn));
            }
            add_into(&mut grads[*a], &ga);
        }
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let d = y.len() / norms.len();
            let mut gx = vec![T::zero(); y.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let proj = kernels::dot(yr, gr);
                for c in 0..d {
                    gx[r * d + c] = (gr[c] - yr[c] * proj) / nrm;
                }
            }
            add_into(&mut grads[*x], &gx);
        }
        Op::PairDist { x, metric } => {
            let (n, d) = val(*x).dims2().unwrap();
            let gx = kernels::pairwise_distances_backward(val(*x).data(), node.value.data(), g, n, d, *metric);
            add_into(&mut grads[*x], &gx);
        }
        Op::Gather { x, index } => {
            let mut gx = vec![T::zero(); val(*x).len()];
            for (&i, &gv) in index.iter().zip(g) {
                gx[i] += gv;
            }
            add_into(&mut grads[*x], &gx);
        }
        Op::Bce { p, targets } => {
            let lo: T = real(BCE_CLAMP);
            let hi = T::one() - lo;
            let n: T = real(targets.len() as f64);
            let gp: Vec<T> = val(*p)
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &y)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        g[0] * (-(y / p) + (T::one() - y) / (T::one() - p)) / n
                    }
                })
                .collect();
            add_into(&mut grads[*p], &gp);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c: T = real(GELU_C);
    let a: T = real(GELU_A);
    let half: T = real(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c: T = real(GELU_C);
    let a: T = real(GELU_A);
    let half: T = real(0.5);
    let three: T = real(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<()> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
        }
        Ok(())
    }

    fn elementwise(&self, other: &Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_shape(other, name)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(name, out, op, &[self.id, other.id])
    }

    fn unary(&self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = self.value().map(f);
        self.tape.push(name, out, op, &[self.id])
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().matmul(&other.value())?;
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&self, row: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let b = row.value();
            let cols = *a.shape().last().ok_or_else(|| Error::shape("add_row on scalar"))?;
            if b.len() != cols || b.rank() != 1 {
                return Err(Error::shape(format!(
                    "add_row: row shape {:?} does not match {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let data = a
                .data()
                .chunks_exact(cols)
                .flat_map(|r| r.iter().zip(b.data()).map(|(&x, &y)| x + y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            let d = a.data();
            Tensor::from_fn([c, r], |idx| d[(idx % r) * c + idx / r])
        };
        self.tape.push("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value().clone().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
                return Err(Error::shape(format!(
                    "narrow({axis}, {start}, {len}) out of range for {:?}",
                    a.shape()
                )));
            }
            let (outer, full, inner) = axis_split(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = o * full * inner + start * inner;
                data.extend_from_slice(&a.data()[s..s + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        self.tape.push("narrow", out, Op::Narrow { x: self.id, axis, start }, &[self.id])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tape = first.tape;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = values[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(format!("concat: {s:?} incompatible with {base:?}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push("concat", out, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            if axis >= a.rank() {
                return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", a.shape())));
            }
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let x = a.data();
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |t: usize| o * len * inner + t * inner + i;
                    let max = (0..len).map(|t| x[idx(t)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for t in 0..len {
                        let e = (x[idx(t)] - max).exp();
                        y[idx(t)] = e;
                        total += e;
                    }
                    for t in 0..len {
                        y[idx(t)] = y[idx(t)] / total;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), y)?
        };
        self.tape.push("softmax", out, Op::Softmax { x: self.id, axis }, &[self.id])
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layernorm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, xhat, rstd) = {
            let a = self.value();
            let d = *a.shape().last().ok_or_else(|| Error::shape("layernorm on scalar"))?;
            let (g, b) = (gain.value(), bias.value());
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape(format!(
                    "layernorm: gain {:?} / bias {:?} must be [{d}]",
                    g.shape(),
                    b.shape()
                )));
            }
            let eps: T = real(LAYERNORM_EPS);
            let dn: T = real(d as f64);
            let mut xhat = Vec::with_capacity(a.len());
            let mut rstd = Vec::with_capacity(a.len() / d);
            let mut y = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (c, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    y.push(h * g.data()[c] + b.data()[c]);
                }
            }
            (Tensor::new(a.shape().to_vec(), y)?, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        self.tape.push("layernorm", out, op, &[self.id, gain.id, bias.id])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let m = {
            let a = self.value();
            a.data().iter().copied().sum::<T>() / real(a.len() as f64)
        };
        self.tape.push("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Mean over the rows of a `[r, c]` tensor, giving `[c]`.
    pub fn mean_rows(&self) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            let mut acc = vec![T::zero(); c];
            for row in a.data().chunks_exact(c) {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s += v;
                }
            }
            let rn: T = real(r as f64);
            Tensor::new([c], acc.into_iter().map(|v| v / rn).collect())?
        };
        self.tape.push("mean_rows", out, Op::MeanRows(self.id), &[self.id])
    }

    /// Scales every slice along the last axis to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Var<'t, T>> {
        let (out, norms) = {
            let a = self.value();
            let d = *a.shape().last().ok_or_else(|| Error::shape("l2_normalize on scalar"))?;
            let mut norms = Vec::with_capacity(a.len() / d);
            let mut y = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(d) {
                let n = kernels::norm(row);
                if n == T::zero() {
                    return Err(Error::input("cannot normalize a zero vector"));
                }
                norms.push(n);
                y.extend(row.iter().map(|&v| v / n));
            }
            (Tensor::new(a.shape().to_vec(), y)?, norms)
        };
        self.tape.push("l2_normalize", out, Op::L2Normalize { x: self.id, norms }, &[self.id])
    }

    /// `[n, n]` distances between the rows of a `[n, d]` tensor.
    pub fn pairwise_distances(&self, metric: Metric) -> Result<Var<'t, T>> {
        let out = self.value().pairwise_distances(metric)?;
        self.tape.push("pairwise_distances", out, Op::PairDist { x: self.id, metric }, &[self.id])
    }

    /// Flat-index gather into a rank-1 tensor.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            if index.is_empty() {
                return Err(Error::shape("gather with no indices"));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= a.len()) {
                return Err(Error::shape(format!("gather index {bad} out of range for {}", a.len())));
            }
            Tensor::new([index.len()], index.iter().map(|&i| a.data()[i]).collect())?
        };
        let op = Op::Gather {
            x: self.id,
            index: index.to_vec(),
        };
        self.tape.push("gather", out, op, &[self.id])
    }

    /// Mean binary cross-entropy between probabilities and `{0,1}` targets.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the log.
    pub fn bce(&self, targets: &[T]) -> Result<Var<'t, T>> {
        if let Some(bad) = targets.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::input(format!("bce label {bad} is not 0 or 1")));
        }
        let loss = {
            let p = self.value();
            if p.len() != targets.len() {
                return Err(Error::shape(format!(
                    "bce: {} probabilities vs {} labels",
                    p.len(),
                    targets.len()
                )));
            }
            bce_mean(p.data(), targets)
        };
        let op = Op::Bce {
            p: self.id,
            targets: targets.to_vec(),
        };
        self.tape.push("bce", Tensor::scalar(loss), op, &[self.id])
    }
}

pub(crate) fn bce_mean<T: Real>(p: &[T], y: &[T]) -> T {
    let lo: T = real(BCE_CLAMP);
    let hi = T::one() - lo;
    let total = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum::<T>();
    total / real(p.len() as f64)
}
