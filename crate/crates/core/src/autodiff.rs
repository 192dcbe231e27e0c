//! Reverse-mode automatic differentiation over an eagerly recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! cheap copyable handle into it. Operations append nodes in execution order,
//! so the node list is always topologically sorted and [`Tape::backward`] only
//! has to walk it once in reverse.
//!
//! Kernels outside this module (convolution, pooling, ...) register themselves
//! through [`Tape::record`] with a hand-written backward closure.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_row, sum_to_shape, Real,
    Tensor,
};

/// What a backward closure sees: the upstream gradient, the forward inputs and
/// output, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input, aligned with the input list.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
    leaf: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the tracked leaves, keyed by their [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.map.get(&v.id)
    }

    pub fn remove(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.map.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A gradient-tracked input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            tracked: true,
            leaf: true,
        })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "constant",
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            tracked: false,
            leaf: true,
        })
    }

    /// Appends an operation node. The backward closure is kept only when at
    /// least one input is tracked.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)), "foreign Var");
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].tracked)
        };
        self.push(Node {
            op,
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: if tracked { Some(Box::new(backward)) } else { None },
            tracked,
            leaf: false,
        })
    }

    /// Runs reverse accumulation from a scalar `loss`. Backward closures are
    /// released as they run, so a tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("backward", "loss recorded on a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract("backward", "tape already consumed"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_value = nodes[loss.id].value.clone();
        if loss_value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_value.shape().to_vec()));
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            if !node.tracked {
                continue;
            }
            if node.leaf {
                out.insert(id, grad);
                continue;
            }
            let Some(backward) = node.backward.take() else { continue };
            let input_ids = node.inputs.clone();
            let output = node.value.clone();
            let inputs: Vec<Rc<Tensor<T>>> =
                input_ids.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = input_ids.iter().map(|&i| nodes[i].tracked).collect();
            let ctx = BackwardCtx { grad: &grad, inputs: &inputs, output: &output, needs: &needs };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), input_ids.len(), "{}", nodes[id].op);
            for ((&pid, g), &need) in input_ids.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[pid].value.shape(), "grad shape from {}", nodes[id].op);
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // Tracked leaves never reached by the loss get zero gradients.
        for (id, node) in nodes.iter().enumerate() {
            if node.leaf && node.tracked && !out.contains_key(&id) {
                out.insert(id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { map: out })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Log,
    Exp,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div | Self::Max)
    }
}

/// Dispatches on `kind`. Binary kinds require `b`; unary kinds reject it.
pub fn elementwise<'t, T: Real>(
    kind: Elementwise,
    a: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    match (kind.is_binary(), b) {
        (true, Some(b)) => a.binary(kind, b),
        (false, None) => Ok(match kind {
            Elementwise::LeakyRelu(slope) => a.leaky_relu(slope),
            Elementwise::Relu => a.relu(),
            Elementwise::Sigmoid => a.sigmoid(),
            Elementwise::Log => a.log()?,
            Elementwise::Exp => a.exp(),
            _ => unreachable!(),
        }),
        (true, None) => Err(Error::contract("elementwise", format!("{kind:?} needs two operands"))),
        (false, Some(_)) => Err(Error::contract("elementwise", format!("{kind:?} is unary"))),
    }
}

fn bmap2<T: Real>(shape: &[usize], a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == shape && b.shape() == shape {
        return a.zip_map(b, f);
    }
    let sa = broadcast_strides(a.shape(), shape);
    let sb = broadcast_strides(b.shape(), shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(shape.iter().product());
    for_each_row(shape, [&sa, &sb], |[oa, ob], len, [ia, ib]| {
        for i in 0..len {
            out.push(f(ad[oa + i * ia], bd[ob + i * ib]));
        }
    });
    Tensor::new(shape.to_vec(), out).expect("broadcast shape")
}

fn bmap3<T: Real>(
    shape: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    let sa = broadcast_strides(a.shape(), shape);
    let sb = broadcast_strides(b.shape(), shape);
    let sc = broadcast_strides(c.shape(), shape);
    let (ad, bd, cd) = (a.data(), b.data(), c.data());
    let mut out = Vec::with_capacity(shape.iter().product());
    for_each_row(shape, [&sa, &sb, &sc], |[oa, ob, oc], len, [ia, ib, ic]| {
        for i in 0..len {
            out.push(f(ad[oa + i * ia], bd[ob + i * ib], cd[oc + i * ic]));
        }
    });
    Tensor::new(shape.to_vec(), out).expect("broadcast shape")
}

/// Reduction kinds for [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

fn normalize_axes(rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::contract("reduce", "empty axis set"));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
        return Err(Error::contract("reduce", format!("invalid axes {axes:?} for rank {rank}")));
    }
    Ok(sorted)
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(op, &[self], out, move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = Tensor::from_fn(ctx.grad.shape().to_vec(), |i| ctx.grad.data()[i] * df(x[i], y[i]));
            vec![Some(g)]
        })
    }

    pub fn relu(self) -> Self {
        self.unary("relu", |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::lit(slope);
        self.unary(
            "leaky_relu",
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(self) -> Self {
        self.unary(
            "sigmoid",
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(self) -> Self {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(self) -> Result<Self> {
        if let Some(bad) = self.value().data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::contract("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary("log", |v| v.ln(), |x, _| T::one() / x))
    }

    pub fn neg(self) -> Self {
        self.unary("neg", |v| -v, |_, _| -T::one())
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary("scale", move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary("add_scalar", move |v| v + c, |_, _| T::one())
    }

    pub fn binary(self, kind: Elementwise, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(
                "elementwise",
                format!("{kind:?}: {:?} and {:?} do not broadcast", a.shape(), b.shape()),
            )
        })?;
        let out = match kind {
            Elementwise::Add => bmap2(&shape, &a, &b, |x, y| x + y),
            Elementwise::Sub => bmap2(&shape, &a, &b, |x, y| x - y),
            Elementwise::Mul => bmap2(&shape, &a, &b, |x, y| x * y),
            Elementwise::Div => bmap2(&shape, &a, &b, |x, y| x / y),
            Elementwise::Max => bmap2(&shape, &a, &b, |x, y| if x >= y { x } else { y }),
            _ => return Err(Error::contract("elementwise", format!("{kind:?} is unary"))),
        };
        let op = match kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
            _ => "max",
        };
        Ok(self.tape.record(op, &[self, other], out, move |ctx| {
            let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
            let (sa, sb) = (a.shape(), b.shape());
            let shape = g.shape();
            let zero = T::zero();
            let (ga, gb) = match kind {
                Elementwise::Add => (g.clone(), g.clone()),
                Elementwise::Sub => (g.clone(), g.map(|v| -v)),
                Elementwise::Mul => (
                    bmap2(shape, g, b, |g, y| g * y),
                    bmap2(shape, g, a, |g, x| g * x),
                ),
                Elementwise::Div => (
                    bmap2(shape, g, b, |g, y| g / y),
                    bmap3(shape, g, a, b, |g, x, y| -g * x / (y * y)),
                ),
                // ties route to the first operand
                _ => (
                    bmap3(shape, g, a, b, move |g, x, y| if x >= y { g } else { zero }),
                    bmap3(shape, g, a, b, move |g, x, y| if x >= y { zero } else { g }),
                ),
            };
            vec![
                ctx.needs[0].then(|| sum_to_shape(&ga, sa)),
                ctx.needs[1].then(|| sum_to_shape(&gb, sb)),
            ]
        }))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(Elementwise::Add, other)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(Elementwise::Sub, other)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(Elementwise::Mul, other)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.binary(Elementwise::Div, other)
    }

    pub fn maximum(self, other: Self) -> Result<Self> {
        self.binary(Elementwise::Max, other)
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), false, b.data(), false, T::zero(), &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.tape.record("matmul", &[self, other], out, move |ctx| {
            let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad.data());
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, false, b.data(), true, T::zero(), &mut ga);
                Tensor::new(vec![m, k], ga).unwrap()
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), a.data(), true, g, false, T::zero(), &mut gb);
                Tensor::new(vec![k, n], gb).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// Reduces over `axes`. For `Max` the gradient goes entirely to the first
    /// maximal element (lowest flat index) of each reduced group.
    pub fn reduce(self, kind: Reduce, axes: &[usize], keepdims: bool) -> Result<Self> {
        let x = self.value();
        let axes = normalize_axes(x.rank(), axes)?;
        let in_shape = x.shape().to_vec();
        let mut keep_shape = in_shape.clone();
        for &a in &axes {
            keep_shape[a] = 1;
        }
        let out_shape: Vec<usize> = if keepdims {
            keep_shape.clone()
        } else {
            in_shape.iter().enumerate().filter(|(d, _)| !axes.contains(d)).map(|(_, &e)| e).collect()
        };
        let out_n: usize = keep_shape.iter().product();
        let count: usize = axes.iter().map(|&a| in_shape[a]).product();
        let src = contiguous_strides(&in_shape);
        let dst = broadcast_strides(&keep_shape, &in_shape);
        let xd = x.data();
        let mut acc = vec![T::neg_infinity(); out_n];
        // Sums accumulate in f64 so that binary32 reductions stay accurate.
        let mut wide = vec![0f64; if kind == Reduce::Max { 0 } else { out_n }];
        let mut argmax = if kind == Reduce::Max { vec![usize::MAX; out_n] } else { Vec::new() };
        for_each_row(&in_shape, [&src, &dst], |[so, dof], len, [si, di]| {
            for i in 0..len {
                let (s, o) = (so + i * si, dof + i * di);
                match kind {
                    Reduce::Max => {
                        if argmax[o] == usize::MAX || xd[s] > acc[o] {
                            acc[o] = xd[s];
                            argmax[o] = s;
                        }
                    }
                    _ => wide[o] += xd[s].to_f64().unwrap(),
                }
            }
        });
        if kind != Reduce::Max {
            let c = if kind == Reduce::Mean { count as f64 } else { 1.0 };
            acc = wide.iter().map(|&v| T::lit(v / c)).collect();
        }
        let out = Tensor::new(out_shape, acc)?;
        let op = match kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "reduce_max",
        };
        Ok(self.tape.record(op, &[self], out, move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![T::zero(); in_shape.iter().product()];
            match kind {
                Reduce::Max => {
                    for (o, &s) in argmax.iter().enumerate() {
                        gx[s] = gx[s] + g[o];
                    }
                }
                _ => {
                    let scale = if kind == Reduce::Mean {
                        T::one() / T::from_usize(count).unwrap()
                    } else {
                        T::one()
                    };
                    for_each_row(&in_shape, [&src, &dst], |[so, dof], len, [si, di]| {
                        for i in 0..len {
                            gx[so + i * si] = g[dof + i * di] * scale;
                        }
                    });
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
        }))
    }

    pub fn sum(self, axes: &[usize], keepdims: bool) -> Result<Self> {
        self.reduce(Reduce::Sum, axes, keepdims)
    }

    pub fn mean(self, axes: &[usize], keepdims: bool) -> Result<Self> {
        self.reduce(Reduce::Mean, axes, keepdims)
    }

    pub fn max(self, axes: &[usize], keepdims: bool) -> Result<Self> {
        self.reduce(Reduce::Max, axes, keepdims)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(self) -> Self {
        let rank = self.shape().len();
        if rank == 0 {
            return self;
        }
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(Reduce::Sum, &axes, false).expect("valid axes")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let out = x.reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record("reshape", &[self], out, move |ctx| {
            vec![Some(ctx.grad.reshape(in_shape.clone()).unwrap())]
        }))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape.record("concat", parts, out, move |ctx| {
            let mut start = 0;
            extents
                .iter()
                .zip(ctx.needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| ctx.grad.narrow(axis, start, len).unwrap());
                    start += len;
                    g
                })
                .collect()
        }))
    }
}
