//! Dynamic computation tape with reverse-mode differentiation.
//!
//! Backward rules are written in terms of [`Var`] operations. When a gradient is
//! requested with `create_graph = true` the backward pass is itself recorded on the
//! tape, so gradients of gradients (as needed by a gradient penalty) come for free.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::ops;
use std::rc::Rc;
use std::sync::Arc;

use crate::param::{Param, ParamId};
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    MatMul(usize, usize, bool, bool),
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
    Upsample2x(usize),
    PoolSum2x(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Pad { input: usize, axis: usize, before: usize },
    StraightThrough(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b, ..) => vec![*a, *b],
            Neg(a) | AddScalar(a) | MulScalar(a, _) | Square(a) | Sqrt(a) | Exp(a) | Log(a)
            | Tanh(a) | LeakyRelu(a, _) | SumTo(a) | BroadcastTo(a) | Reshape(a)
            | Permute(a, _) | Im2Col(a, _) | Col2Im(a, _) | Upsample2x(a) | PoolSum2x(a)
            | StraightThrough(a) => vec![*a],
            Slice { input, .. } | Pad { input, .. } => vec![*input],
            Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Leaky-rectifier bookkeeping: either log which side of zero each input falls on, or
/// replay a logged pattern so every unit stays on the same linear piece.
enum KinkMode {
    Off,
    Record(Vec<bool>),
    Replay(Arc<Vec<bool>>, usize),
}

struct Inner {
    nodes: RefCell<Vec<Node>>,
    record: Cell<bool>,
    params: RefCell<HashMap<ParamId, usize>>,
    frozen: RefCell<HashSet<ParamId>>,
    kinks: RefCell<KinkMode>,
}

/// A computation tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<Inner>,
}

/// A value on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    inner: Rc<Inner>,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording tape: operations on values that require gradients are tracked.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that never records; every value is a constant.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            inner: Rc::new(Inner {
                nodes: RefCell::new(Vec::new()),
                record: Cell::new(record),
                params: RefCell::new(HashMap::new()),
                frozen: RefCell::new(HashSet::new()),
                kinks: RefCell::new(KinkMode::Off),
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.record.get()
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.inner.record.get(),
        });
        Var {
            inner: self.inner.clone(),
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    /// Bind a parameter to this tape. Repeated calls return the same leaf, so a
    /// network applied twice accumulates gradients into one place.
    pub fn param(&self, p: &Param) -> Var {
        if let Some(&id) = self.inner.params.borrow().get(&p.id()) {
            return Var {
                inner: self.inner.clone(),
                id,
            };
        }
        let trainable = !self.inner.frozen.borrow().contains(&p.id());
        let v = self.push_leaf(p.shared(), trainable);
        self.inner.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Start logging which side of zero every leaky-rectifier input falls on.
    pub fn track_kinks(&self) {
        *self.inner.kinks.borrow_mut() = KinkMode::Record(Vec::new());
    }

    pub fn kink_pattern(&self) -> Option<Vec<bool>> {
        match &*self.inner.kinks.borrow() {
            KinkMode::Record(v) => Some(v.clone()),
            _ => None,
        }
    }

    /// Make leaky rectifiers follow a recorded pattern instead of their input signs,
    /// evaluating the linear piece that contained the recording point.
    pub fn replay_kinks(&self, pattern: Arc<Vec<bool>>) {
        *self.inner.kinks.borrow_mut() = KinkMode::Replay(pattern, 0);
    }

    /// Parameters bound after this call are treated as constants.
    pub fn freeze<'a>(&self, params: impl IntoIterator<Item = &'a Param>) {
        let mut frozen = self.inner.frozen.borrow_mut();
        frozen.extend(params.into_iter().map(Param::id));
    }

    /// Gradients of the scalar `y` with respect to `wrt`. With `create_graph` the
    /// returned gradients are themselves differentiable.
    pub fn grad(&self, y: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
        // only nodes downstream of some `wrt` need a gradient
        let mut relevant = vec![false; y.id + 1];
        {
            let nodes = self.inner.nodes.borrow();
            for v in wrt {
                if v.id <= y.id {
                    relevant[v.id] = true;
                }
            }
            let start = wrt.iter().map(|v| v.id).min().unwrap_or(y.id + 1);
            for i in start..=y.id {
                if !relevant[i] {
                    relevant[i] = nodes[i].op.parents().iter().any(|&p| relevant[p]);
                }
            }
        }
        let grads = self.run_backward(y, create_graph, Some(&relevant));
        wrt.iter()
            .map(|v| grads.get(v.id).cloned().flatten())
            .collect()
    }

    /// Gradients of the scalar `y` with respect to every leaf on the tape.
    pub fn backward(&self, y: &Var) -> Gradients {
        let grads = self.run_backward(y, false, None);
        Gradients {
            grads: grads.into_iter().map(|g| g.map(|v| v.value())).collect(),
            params: self.inner.params.borrow().clone(),
        }
    }

    fn run_backward(
        &self,
        y: &Var,
        create_graph: bool,
        relevant: Option<&[bool]>,
    ) -> Vec<Option<Var>> {
        assert!(Rc::ptr_eq(&self.inner, &y.inner), "variable from another graph");
        assert_eq!(y.value().numel(), 1, "backward from a non-scalar");
        let saved = self.inner.record.replace(create_graph && self.inner.record.get());
        let mut grads: Vec<Option<Var>> = vec![None; y.id + 1];
        grads[y.id] = Some(self.constant(Tensor::ones(y.value().shape())));
        for i in (0..=y.id).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let (op, requires) = {
                let nodes = self.inner.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].requires_grad)
            };
            if !requires || matches!(op, Op::Leaf) || relevant.is_some_and(|r| !r[i]) {
                continue;
            }
            let out = Var {
                inner: self.inner.clone(),
                id: i,
            };
            for (p, gp) in self.local_grads(&op, &out, &g, relevant) {
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => &acc + &gp,
                    None => gp,
                });
            }
        }
        self.inner.record.set(saved);
        grads
    }

    fn var(&self, id: usize) -> Var {
        Var {
            inner: self.inner.clone(),
            id,
        }
    }

    /// Gradient contributions for the parents of `out` that require them.
    fn local_grads(
        &self,
        op: &Op,
        out: &Var,
        g: &Var,
        relevant: Option<&[bool]>,
    ) -> Vec<(usize, Var)> {
        let need = |id: usize| {
            self.inner.nodes.borrow()[id].requires_grad && relevant.is_none_or(|r| r[id])
        };
        let mut grads = self.local_grads_unfiltered(op, out, g, &need);
        grads.retain(|(p, _)| need(*p));
        grads
    }

    fn local_grads_unfiltered(
        &self,
        op: &Op,
        out: &Var,
        g: &Var,
        need: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Var)> {
        let v = |id: usize| self.var(id);
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                vec![(*a, g.sum_to(&va.shape())), (*b, g.sum_to(&vb.shape()))]
            }
            Op::Sub(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                vec![(*a, g.sum_to(&va.shape())), (*b, g.neg().sum_to(&vb.shape()))]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let mut out = Vec::with_capacity(2);
                if need(*a) {
                    out.push((*a, (g * &vb).sum_to(&va.shape())));
                }
                if need(*b) {
                    out.push((*b, (g * &va).sum_to(&vb.shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let ga = (g / &vb).sum_to(&va.shape());
                let gb = (&(g * out) / &vb).neg().sum_to(&vb.shape());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, g.neg())],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, s) => vec![(*a, g.mul_scalar(*s))],
            Op::Square(a) => vec![(*a, (g * &v(*a)).mul_scalar(2.0))],
            Op::Sqrt(a) => vec![(*a, (g / out).mul_scalar(0.5))],
            Op::Exp(a) => vec![(*a, g * out)],
            Op::Log(a) => vec![(*a, g / &v(*a))],
            Op::Tanh(a) => vec![(*a, g * &out.square().neg().add_scalar(1.0))],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = v(*a).value().map(|x| if x > 0.0 { 1.0 } else { s });
                vec![(*a, g * &self.constant(mask))]
            }
            Op::SumTo(a) => vec![(*a, g.broadcast_to(&v(*a).shape()))],
            Op::BroadcastTo(a) => vec![(*a, g.sum_to(&v(*a).shape()))],
            Op::Reshape(a) => vec![(*a, g.reshape(&v(*a).shape()))],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permute(&inv))]
            }
            Op::MatMul(a, b, ta, tb) => {
                let (va, vb) = (v(*a), v(*b));
                let mut out = Vec::with_capacity(2);
                if need(*a) {
                    let ga = if *ta {
                        vb.matmul_t(g, *tb, true)
                    } else {
                        g.matmul_t(&vb, false, !*tb)
                    };
                    out.push((*a, ga));
                }
                if need(*b) {
                    let gb = if *tb {
                        g.matmul_t(&va, true, *ta)
                    } else {
                        va.matmul_t(g, !*ta, false)
                    };
                    out.push((*b, gb));
                }
                out
            }
            Op::Im2Col(a, geom) => vec![(*a, g.col2im(geom))],
            Op::Col2Im(a, geom) => vec![(*a, g.im2col(geom))],
            Op::Upsample2x(a) => vec![(*a, g.pool_sum2x())],
            Op::PoolSum2x(a) => vec![(*a, g.upsample2x())],
            Op::Concat(parts, axis) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = v(p).shape()[*axis];
                        let gp = g.slice_axis(*axis, start, len);
                        start += len;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Slice { input, axis, start } => {
                let full = v(*input).shape()[*axis];
                let len = out.shape()[*axis];
                vec![(*input, g.pad_axis(*axis, *start, full - start - len))]
            }
            Op::Pad {
                input,
                axis,
                before,
            } => {
                let len = v(*input).shape()[*axis];
                vec![(*input, g.slice_axis(*axis, *before, len))]
            }
            Op::StraightThrough(a) => vec![(*a, g.clone())],
        }
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Var {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|t| t.as_ref()).collect();
        let t = Tensor::concat(&refs, axis);
        parts[0].push(t, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Arc<Tensor>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn of(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn of_param(&self, p: &Param) -> Option<&Tensor> {
        let id = *self.params.get(&p.id())?;
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl Var {
    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        let requires =
            self.inner.record.get() && op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op: if requires { op } else { Op::Leaf },
            requires_grad: requires,
        });
        Var {
            inner: self.inner.clone(),
            id: nodes.len() - 1,
        }
    }

    pub fn graph(&self) -> Graph {
        Graph {
            inner: self.inner.clone(),
        }
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.inner.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value (panics on non-scalars).
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn detach(&self) -> Var {
        self.graph().push_leaf(self.value(), false)
    }

    fn binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let t = self.value().zip(&other.value(), f);
        self.push(t, op)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Var {
        self.push(self.value().map(|x| -x), Op::Neg(self.id))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.push(self.value().map(|x| x + s), Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        self.push(self.value().map(|x| x * s), Op::MulScalar(self.id, s))
    }

    pub fn square(&self) -> Var {
        self.push(self.value().map(|x| x * x), Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.push(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn exp(&self) -> Var {
        self.push(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.push(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.push(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let input = self.value();
        let replayed = match &mut *self.inner.kinks.borrow_mut() {
            KinkMode::Off => None,
            KinkMode::Record(log) => {
                log.extend(input.data().iter().map(|&x| x > 0.0));
                None
            }
            KinkMode::Replay(pattern, pos) => {
                let n = input.numel();
                assert!(*pos + n <= pattern.len(), "kink replay ran past the recording");
                let gains = pattern[*pos..*pos + n]
                    .iter()
                    .map(|&up| if up { 1.0 } else { slope })
                    .collect();
                *pos += n;
                Some(Tensor::new(input.shape(), gains))
            }
        };
        match replayed {
            // a fixed gain keeps forward and backward on the recorded piece
            Some(gains) => self.mul(&self.graph().constant(gains)),
            None => self.push(
                input.map(|x| if x > 0.0 { x } else { slope * x }),
                Op::LeakyRelu(self.id, slope),
            ),
        }
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.push(self.value().sum_to(shape), Op::SumTo(self.id))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.push(self.value().broadcast_to(shape), Op::BroadcastTo(self.id))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Mean over the axes collapsed to 1 in `shape` (keeping rank).
    pub fn mean_to(&self, shape: &[usize]) -> Var {
        let ratio = self.value().numel() as f64 / crate::tensor::numel(shape) as f64;
        self.sum_to(shape).mul_scalar(1.0 / ratio)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.push(self.value().reshape(shape), Op::Reshape(self.id))
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        self.push(self.value().permute(perm), Op::Permute(self.id, perm.to_vec()))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let t = Tensor::matmul(&self.value(), &other.value(), ta, tb);
        self.push(t, Op::MatMul(self.id, other.id, ta, tb))
    }

    pub fn im2col(&self, geom: &ConvGeom) -> Var {
        self.push(self.value().im2col(geom), Op::Im2Col(self.id, *geom))
    }

    pub fn col2im(&self, geom: &ConvGeom) -> Var {
        self.push(self.value().col2im(geom), Op::Col2Im(self.id, *geom))
    }

    pub fn upsample2x(&self) -> Var {
        self.push(self.value().upsample2x(), Op::Upsample2x(self.id))
    }

    pub fn pool_sum2x(&self) -> Var {
        self.push(self.value().pool_sum2x(), Op::PoolSum2x(self.id))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value().slice_axis(axis, start, len);
        self.push(
            t,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Var {
        let t = self.value().pad_axis(axis, before, after);
        self.push(
            t,
            Op::Pad {
                input: self.id,
                axis,
                before,
            },
        )
    }

    /// Take `value` as the forward result while passing gradients through unchanged.
    ///
    /// Equivalent to `self - (stop_grad(self) - value)`, i.e. adding a constant
    /// residual, but the forward value is exactly `value` with no rounding.
    pub fn straight_through(&self, value: Tensor) -> Var {
        assert_eq!(value.shape(), self.shape().as_slice(), "straight_through shape mismatch");
        self.push(value, Op::StraightThrough(self.id))
    }

    /// Row-wise log-softmax of a `[N, K]` matrix.
    pub fn log_softmax_rows(&self) -> Var {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert_eq!(shape.len(), 2, "log_softmax_rows needs [N, K]");
        let k = shape[1];
        let maxes = Tensor::from_fn(&[shape[0], 1], |i| {
            v.data()[i * k..(i + 1) * k]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let shifted = self - &self.graph().constant(maxes);
        let lse = shifted.exp().sum_to(&[shape[0], 1]).ln();
        &shifted - &lse
    }
}

macro_rules! bin_op {
    ($tr:ident, $f:ident, $m:ident) => {
        impl ops::$tr<&Var> for &Var {
            type Output = Var;
            fn $f(self, rhs: &Var) -> Var {
                self.$m(rhs)
            }
        }
    };
}

bin_op!(Add, add, add);
bin_op!(Sub, sub, sub);
bin_op!(Mul, mul, mul);
bin_op!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(x: Tensor, build: impl Fn(&Var) -> Var) {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = build(&xv);
        let analytic = g.backward(&y).of(&xv).cloned().unwrap();
        let numeric = numeric_grad(&x, |t| {
            let g = Graph::inference();
            build(&g.constant(t.clone())).item()
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}\n{analytic:?}\n{numeric:?}");
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_gradients() {
        check(rnd(&[3, 4], 1), |x| x.tanh().square().sum());
        check(rnd(&[3, 4], 2), |x| x.leaky_relu(0.2).mul_scalar(3.0).add_scalar(1.0).sum());
        check(rnd(&[3, 4], 3).map(|v| v.abs() + 0.5), |x| x.sqrt().ln().sum());
        check(rnd(&[3, 4], 4), |x| (&x.exp() / &x.square().add_scalar(1.0)).sum());
    }

    #[test]
    fn broadcast_gradients() {
        let b = rnd(&[1, 4], 9);
        check(rnd(&[3, 4], 5), move |x| {
            let bv = x.graph().constant(b.clone());
            (&(x * &bv) + &bv).square().sum()
        });
        check(rnd(&[1, 4], 6), |x| x.broadcast_to(&[5, 4]).tanh().sum());
        check(rnd(&[2, 3, 4], 7), |x| x.mean_to(&[2, 1, 1]).square().sum());
    }

    #[test]
    fn structural_gradients() {
        let w = rnd(&[5, 3], 11);
        check(rnd(&[4, 3], 10), move |x| {
            let wv = x.graph().constant(w.clone());
            x.matmul_t(&wv, false, true).tanh().sum()
        });
        let w2 = rnd(&[4, 5], 13);
        check(rnd(&[4, 3], 12), move |x| {
            let wv = x.graph().constant(w2.clone());
            x.matmul_t(&wv, true, false).square().sum()
        });
        let geom = ConvGeom { n: 2, c: 2, h: 4, w: 4, k: 3, stride: 2, pad: 1 };
        check(rnd(&[2, 2, 4, 4], 14), move |x| x.im2col(&geom).square().sum());
        check(rnd(&[1, 2, 2, 3], 15), |x| x.permute(&[0, 3, 1, 2]).reshape(&[6, 2]).tanh().sum());
        check(rnd(&[1, 1, 2, 2], 16), |x| x.upsample2x().square().sum());
        check(rnd(&[2, 3], 17), |x| {
            let c = x.graph().concat(&[x, &x.tanh()], 1);
            &c.slice_axis(1, 2, 3).square().sum() + &x.pad_axis(0, 1, 2).exp().sum()
        });
        check(rnd(&[3, 7], 18), |x| x.log_softmax_rows().slice_axis(1, 2, 1).sum());
    }

    #[test]
    fn second_order_gradient_through_gradient_norm() {
        // f(x, w) = sum(tanh(x * w)); penalty = (|df/dx|^2); check d penalty / dw numerically.
        let x0 = rnd(&[5], 20);
        let w0 = rnd(&[5], 21);
        let penalty = |w: &Tensor, create: bool| -> (f64, Option<Tensor>) {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let wv = g.leaf(w.clone());
            let f = (&x * &wv).tanh().sum();
            let gx = g.grad(&f, &[&x], create)[0].clone().unwrap();
            let p = gx.square().sum();
            let grad = if create { g.backward(&p).of(&wv).cloned() } else { None };
            (p.item(), grad)
        };
        let analytic = penalty(&w0, true).1.unwrap();
        let numeric = numeric_grad(&w0, |w| penalty(w, false).0);
        assert!(analytic.max_abs_diff(&numeric) < 1e-6);
    }

    #[test]
    fn straight_through_has_identity_gradient() {
        let g = Graph::new();
        let x = g.leaf(rnd(&[2, 3], 30));
        let y = x.straight_through(Tensor::full(&[2, 3], 0.25));
        assert_eq!(y.value().data(), &[0.25; 6]);
        let gx = g.backward(&y.sum()).of(&x).cloned().unwrap();
        assert_eq!(gx.data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let p = Param::new(Tensor::ones(&[2]));
        let q = Param::new(Tensor::ones(&[2]));
        let g = Graph::new();
        g.freeze([&p]);
        let y = (&g.param(&p) * &g.param(&q)).sum();
        let grads = g.backward(&y);
        assert!(grads.of_param(&p).is_none());
        assert_eq!(grads.of_param(&q).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(!x.requires_grad());
        assert!(!x.tanh().requires_grad());
    }

    #[test]
    fn kink_pattern_logs_rectifier_signs() {
        let g = Graph::inference();
        assert!(g.kink_pattern().is_none());
        g.track_kinks();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]));
        x.leaky_relu(0.2);
        x.neg().leaky_relu(0.2);
        let pattern = g.kink_pattern().unwrap();
        assert_eq!(pattern, vec![false, false, true, true, false, false]);

        let r = Graph::inference();
        r.replay_kinks(Arc::new(pattern));
        let y = r.constant(Tensor::new(&[3], vec![1.0, 1.0, 1.0])).leaky_relu(0.2);
        assert_eq!(y.value().data(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn grad_skips_branches_that_do_not_reach_wrt() {
        let build = || {
            let g = Graph::new();
            let w = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            let x = g.leaf(Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]));
            let y = w.matmul(&x).tanh().sum();
            (g, w, x, y)
        };
        let (g, w, x, y) = build();
        let before = g.node_count();
        let gx = g.grad(&y, &[&x], false);
        let targeted = g.node_count() - before;
        let (g2, w2, x2, y2) = build();
        let before = g2.node_count();
        let both = g2.grad(&y2, &[&x2, &w2], false);
        assert!(g2.node_count() - before > targeted);
        assert_eq!(gx[0].as_ref().unwrap().value(), both[0].as_ref().unwrap().value());
        assert!(g.grad(&y, &[&w], false)[0].is_some());
    }
}
