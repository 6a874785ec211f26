use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, Pad};
use super::Tensor;
use crate::error::{Error, Result};

/// Primitive recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Square,
    Sqrt,
    Exp,
    Ln,
    Silu,
    Clamp,
    Sum,
    Mean,
    Norm2,
    LogSumExp,
    Shift,
    Reshape,
    Broadcast,
    Stack,
    Select,
    UnitVector,
    Conv2d,
    AddChannelBias,
    MatVec,
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Silu(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    Norm2(usize),
    LogSumExp(usize, usize),
    Shift {
        input: usize,
        axis: usize,
        offset: isize,
        pad: Pad,
    },
    Reshape(usize),
    Broadcast(usize),
    Stack(Vec<usize>),
    Select {
        mask: Vec<bool>,
        on: usize,
        off: usize,
    },
    UnitVector {
        dx: usize,
        dy: usize,
        tau: f64,
        second: bool,
    },
    Conv2d(usize, usize),
    AddChannelBias(usize, usize),
    MatVec(usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Exp(_) => OpKind::Exp,
            Op::Ln(_) => OpKind::Ln,
            Op::Silu(_) => OpKind::Silu,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Norm2(_) => OpKind::Norm2,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Shift { .. } => OpKind::Shift,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Stack(_) => OpKind::Stack,
            Op::Select { .. } => OpKind::Select,
            Op::UnitVector { .. } => OpKind::UnitVector,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::AddChannelBias(..) => OpKind::AddChannelBias,
            Op::MatVec(..) => OpKind::MatVec,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Silu(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm2(a)
            | Op::LogSumExp(a, _)
            | Op::Reshape(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Shift { input, .. } => vec![*input],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Conv2d(a, b)
            | Op::AddChannelBias(a, b)
            | Op::MatVec(a, b) => vec![*a, *b],
            Op::Stack(parts) => parts.clone(),
            Op::Select { on, off, .. } => vec![*on, *off],
            Op::UnitVector { dx, dy, .. } => vec![*dx, *dy],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Read-only view of a recorded node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeNode {
    pub index: usize,
    pub kind: OpKind,
    pub inputs: Vec<usize>,
    pub needs_grad: bool,
}

/// Append-only record of primitive evaluations.
///
/// A tape is confined to one thread. Node inputs always have smaller indices
/// than the node itself, and backward visits nodes in reverse index order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("tracing", &self.tracing)
            .finish()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: true,
        }
    }

    /// A tape that evaluates values but records no backward information.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: false,
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let needs_grad = self.tracing;
        self.push_node(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Constant, false)
    }

    pub fn node(&self, index: usize) -> Option<TapeNode> {
        self.nodes.borrow().get(index).map(|n| TapeNode {
            index,
            kind: n.op.kind(),
            inputs: n.op.inputs(),
            needs_grad: n.needs_grad,
        })
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        self.tracing && ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records `op` when any input needs a gradient, else a constant.
    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        if self.needs(&op.inputs()) {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Constant, false)
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::TapeMismatch)
    }
}

// Shape-checked ops return Result, so they cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// The single value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.tape.value(self.id).item()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// A constant on the same tape.
    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = f(&self.tape.value(self.id));
        self.tape.push(value, op)
    }

    fn try_unary(self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let value = f(&self.tape.value(self.id))?;
        Ok(self.tape.push(value, op))
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        same_tape(&self, &other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, kernels::add, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, kernels::sub, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, kernels::mul, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, kernels::div, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| x.map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| kernels::scale(x, c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| kernels::add_scalar(x, c), Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(kernels::square, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(kernels::sqrt, Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(kernels::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(kernels::ln, Op::Ln(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(kernels::silu, Op::Silu(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|x| kernels::clamp(x, lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(kernels::sum, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.try_unary(kernels::mean, Op::Mean(self.id))
    }

    pub fn norm2(self) -> Var<'t> {
        self.unary(kernels::norm2, Op::Norm2(self.id))
    }

    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        self.try_unary(|x| kernels::logsumexp(x, axis), Op::LogSumExp(self.id, axis))
    }

    pub fn shift(self, axis: usize, offset: isize, pad: Pad) -> Result<Var<'t>> {
        self.try_unary(
            |x| kernels::shift(x, axis, offset, pad),
            Op::Shift {
                input: self.id,
                axis,
                offset,
                pad,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.try_unary(|x| kernels::reshape(x, shape), Op::Reshape(self.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.try_unary(|x| kernels::broadcast_to(x, shape), Op::Broadcast(self.id))
    }

    /// `self` is the `[H, W, Cin]` input, `weight` is `[kh, kw, Cin, Cout]`.
    pub fn conv2d(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.binary(weight, kernels::conv2d, Op::Conv2d(self.id, weight.id))
    }

    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, kernels::add_channel_bias, Op::AddChannelBias(self.id, bias.id))
    }

    /// `self` is the `[r, c]` matrix.
    pub fn matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        self.binary(v, kernels::matvec, Op::MatVec(self.id, v.id))
    }

    /// Gradient of a one-element root with respect to every leaf.
    pub fn backward(&self) -> Result<GradientMap> {
        let seed = {
            let v = self.tape.value(self.id);
            if v.numel() != 1 {
                return Err(Error::invalid(
                    "backward",
                    format!("root has shape {:?}; pass an explicit seed", v.shape()),
                ));
            }
            Tensor::full(v.shape(), 1.0)
        };
        self.backward_with(seed)
    }

    /// Vector-Jacobian product with cotangent `seed`.
    pub fn backward_with(&self, seed: Tensor) -> Result<GradientMap> {
        backward(self.tape, self.id, seed)
    }
}

/// Stacks variables along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("stack", "nothing to stack"));
    };
    for p in parts {
        same_tape(first, p)?;
    }
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
        kernels::stack(&refs)?
    };
    Ok(tape.push(value, Op::Stack(parts.iter().map(|p| p.id).collect())))
}

/// `mask[i] ? on[i] : off[i]`; the gradient flows to the selected branch.
pub fn select<'t>(mask: &[bool], on: Var<'t>, off: Var<'t>) -> Result<Var<'t>> {
    let mask = mask.to_vec();
    on.binary(
        off,
        |a, b| kernels::select(&mask, a, b),
        Op::Select {
            mask: mask.clone(),
            on: on.id,
            off: off.id,
        },
    )
}

/// Unit vectors of the field `(dx, dy)`, zero where the norm is at most `tau`.
///
/// The backward rule is the exact Jacobian of `v / |v|` away from the
/// threshold and zero inside it.
pub fn unit_vectors<'t>(dx: Var<'t>, dy: Var<'t>, tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    same_tape(&dx, &dy)?;
    let tape = dx.tape;
    let (ux, uy) = {
        let nodes = tape.nodes.borrow();
        kernels::unit_vectors(&nodes[dx.id].value, &nodes[dy.id].value, tau)?
    };
    let op = |second| Op::UnitVector {
        dx: dx.id,
        dy: dy.id,
        tau,
        second,
    };
    Ok((tape.push(ux, op(false)), tape.push(uy, op(true))))
}

/// Per-leaf cotangents produced by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.get_index(leaf.id)
    }

    pub fn get_index(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(index).and_then(Option::as_ref)
    }

    /// Leaf indices with a gradient, in tape order.
    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|_| i))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Reduces a broadcast cotangent back to the operand's shape.
fn reduce_to(operand: &Tensor, g: Tensor) -> Tensor {
    if operand.shape() == g.shape() {
        g
    } else {
        Tensor::from_parts(operand.shape().to_vec(), vec![g.sum(); operand.numel()])
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Broadcast-aware product `g * d` where `d` has the shape of the output.
fn times(g: &Tensor, d: Tensor) -> Tensor {
    let data = g.data().iter().zip(d.data()).map(|(a, b)| a * b).collect();
    Tensor::from_parts(d.shape().to_vec(), data)
}

fn from_fn_like(g: &Tensor, value: impl Fn(usize) -> f64) -> Tensor {
    Tensor::from_parts(g.shape().to_vec(), (0..g.numel()).map(value).collect())
}

/// Reads `t[i]`, treating a one-element tensor as broadcast.
fn at(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

fn backward(tape: &Tape, root: usize, seed: Tensor) -> Result<GradientMap> {
    let nodes = tape.nodes.borrow();
    let root_node = nodes
        .get(root)
        .ok_or_else(|| Error::invalid("backward", "root not on tape"))?;
    if !tape.tracing || !root_node.needs_grad {
        return Err(Error::NotTraced);
    }
    if seed.shape() != root_node.value.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward seed",
            left: root_node.value.shape().to_vec(),
            right: seed.shape().to_vec(),
        });
    }

    let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
    let mut out: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
    grads[root] = Some(seed);

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if matches!(node.op, Op::Leaf) && node.needs_grad {
            let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            out[id] = Some(g);
            continue;
        }
        let Some(g) = grads[id].take() else {
            continue;
        };
        let val = |i: usize| &nodes[i].value;
        let mut send = |i: usize, contribution: Tensor| {
            if nodes[i].needs_grad {
                accumulate(&mut grads[i], contribution);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, reduce_to(val(*a), g.clone()));
                send(*b, reduce_to(val(*b), g));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(val(*a), g.clone()));
                send(*b, reduce_to(val(*b), g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = from_fn_like(&g, |i| g.data()[i] * at(y, i));
                let gb = from_fn_like(&g, |i| g.data()[i] * at(x, i));
                send(*a, reduce_to(x, ga));
                send(*b, reduce_to(y, gb));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = from_fn_like(&g, |i| g.data()[i] / at(y, i));
                let gb = from_fn_like(&g, |i| {
                    let yi = at(y, i);
                    -g.data()[i] * at(x, i) / (yi * yi)
                });
                send(*a, reduce_to(x, ga));
                send(*b, reduce_to(y, gb));
            }
            Op::Neg(a) => send(*a, g.map(|v| -v)),
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => send(*a, g),
            Op::Square(a) => send(*a, elementwise(&g, val(*a), |gv, x| 2.0 * x * gv)),
            Op::Sqrt(a) => send(*a, times(&g, node.value.map(|y| 0.5 / y))),
            Op::Exp(a) => send(*a, times(&g, node.value.clone())),
            Op::Ln(a) => send(*a, elementwise(&g, val(*a), |gv, x| gv / x)),
            Op::Silu(a) => send(
                *a,
                elementwise(&g, val(*a), |gv, x| {
                    let s = kernels::sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Clamp(a, lo, hi) => send(
                *a,
                elementwise(&g, val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / x.numel() as f64;
                send(*a, Tensor::full(x.shape(), gv));
            }
            Op::Norm2(a) => {
                let n = node.value.data()[0];
                let gv = g.data()[0];
                let gx = if n > 0.0 {
                    val(*a).map(|x| gv * x / n)
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                send(*a, gx);
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let (outer, n, inner) = kernels::axis_split(x.shape(), *axis);
                let (xd, yd, gd) = (x.data(), node.value.data(), g.data());
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for k in 0..n {
                            let idx = (o * n + k) * inner + i;
                            gx[idx] = gd[r] * (xd[idx] - yd[r]).exp();
                        }
                    }
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), gx));
            }
            Op::Shift {
                input,
                axis,
                offset,
                pad,
            } => {
                let x = val(*input);
                let (outer, n, inner) = kernels::axis_split(x.shape(), *axis);
                let gd = g.data();
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for k in 0..n {
                        if let Some(src) = kernels::shift_source(k, n, *offset, *pad) {
                            let dst = (o * n + k) * inner;
                            let from = (o * n + src) * inner;
                            for c in 0..inner {
                                gx[from + c] += gd[dst + c];
                            }
                        }
                    }
                }
                send(*input, Tensor::from_parts(x.shape().to_vec(), gx));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Broadcast(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, Tensor::from_parts(shape, vec![g.sum()]));
            }
            Op::Stack(parts) => {
                let chunk = g.numel() / parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    let shape = val(p).shape().to_vec();
                    let slice = g.data()[k * chunk..(k + 1) * chunk].to_vec();
                    send(p, Tensor::from_parts(shape, slice));
                }
            }
            Op::Select { mask, on, off } => {
                let shape = g.shape().to_vec();
                let (mut gon, mut goff) = (vec![0.0; g.numel()], vec![0.0; g.numel()]);
                for (i, (&m, &gv)) in mask.iter().zip(g.data()).enumerate() {
                    if m {
                        gon[i] = gv;
                    } else {
                        goff[i] = gv;
                    }
                }
                send(*on, Tensor::from_parts(shape.clone(), gon));
                send(*off, Tensor::from_parts(shape, goff));
            }
            Op::UnitVector { dx, dy, tau, second } => {
                let (xd, yd, gd) = (val(*dx).data(), val(*dy).data(), g.data());
                let shape = g.shape().to_vec();
                let (mut gx, mut gy) = (vec![0.0; g.numel()], vec![0.0; g.numel()]);
                for i in 0..g.numel() {
                    let (a, b) = (xd[i], yd[i]);
                    let n = (a * a + b * b).sqrt();
                    if n <= *tau {
                        continue;
                    }
                    let n3 = n * n * n;
                    let cross = -a * b / n3;
                    if *second {
                        gx[i] = gd[i] * cross;
                        gy[i] = gd[i] * a * a / n3;
                    } else {
                        gx[i] = gd[i] * b * b / n3;
                        gy[i] = gd[i] * cross;
                    }
                }
                send(*dx, Tensor::from_parts(shape.clone(), gx));
                send(*dy, Tensor::from_parts(shape, gy));
            }
            Op::Conv2d(xi, wi) => {
                let (gx, gw) = conv2d_backward(val(*xi), val(*wi), &g)?;
                send(*xi, gx);
                send(*wi, gw);
            }
            Op::AddChannelBias(xi, bi) => {
                let c = val(*bi).numel();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks_exact(c.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(*bi, Tensor::from_parts(vec![c], gb));
                send(*xi, g);
            }
            Op::MatVec(mi, vi) => {
                let (m, v) = (val(*mi), val(*vi));
                let cols = v.numel();
                let gd = g.data();
                let mut gm = vec![0.0; m.numel()];
                let mut gv = vec![0.0; cols];
                for (r, row) in m.data().chunks_exact(cols.max(1)).enumerate() {
                    for c in 0..cols {
                        gm[r * cols + c] = gd[r] * v.data()[c];
                        gv[c] += row[c] * gd[r];
                    }
                }
                send(*mi, Tensor::from_parts(m.shape().to_vec(), gm));
                send(*vi, Tensor::from_parts(v.shape().to_vec(), gv));
            }
        }
    }

    Ok(GradientMap { grads: out })
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let geo = kernels::ConvGeometry::new(x, w)?;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let (ph, pw) = (geo.kh / 2, geo.kw / 2);
    for i in 0..geo.h {
        for j in 0..geo.w {
            let go = &gd[(i * geo.w + j) * geo.co..][..geo.co];
            for a in 0..geo.kh {
                let Some(ii) = (i + a).checked_sub(ph).filter(|&v| v < geo.h) else {
                    continue;
                };
                for b in 0..geo.kw {
                    let Some(jj) = (j + b).checked_sub(pw).filter(|&v| v < geo.w) else {
                        continue;
                    };
                    let xoff = (ii * geo.w + jj) * geo.ci;
                    let woff = (a * geo.kw + b) * geo.ci * geo.co;
                    for c in 0..geo.ci {
                        let xv = xd[xoff + c];
                        let wrow = &wd[woff + c * geo.co..][..geo.co];
                        let gwrow = &mut gw[woff + c * geo.co..][..geo.co];
                        let mut acc = 0.0;
                        for o in 0..geo.co {
                            acc += go[o] * wrow[o];
                            gwrow[o] += xv * go[o];
                        }
                        gx[xoff + c] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
    ))
}
