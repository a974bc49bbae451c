//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] walks the tape once in reverse and returns the
//! adjoint of every node; parameter adjoints can then be accumulated into a
//! [`ParamStore`]. The tape is rebuilt for every forward pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_binary, broadcast_shapes, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

/// Additive mask value for excluded attention logits.
pub const MASK_SENTINEL: f64 = -1e9;

/// Whether an additive-mask entry excludes its position.
pub fn is_masked(mask_value: f64) -> bool {
    mask_value <= 0.5 * MASK_SENTINEL
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed outside the graph and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` marks a
    /// zero gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh` through a single `exp`; absolute error stays at rounding level.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_K * (x + GELU_C * x * x * x))),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// `(f(x), f'(x))` sharing intermediate work.
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let t = fast_tanh(GELU_K * (x + GELU_C * x * x * x));
                let y = 0.5 * x * (1.0 + t);
                let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                (y, d)
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            _ => (self.apply(x), self.derivative(x)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = fast_tanh(GELU_K * (x + GELU_C * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    /// Holds the elementwise derivative evaluated during the forward pass.
    Act(Var, Tensor),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Adjoint of an input or parameter variable; intermediate adjoints are
    /// released during the reverse pass.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }

    /// Adds each parameter adjoint into the store's accumulated gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.adjoints[var.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let rg = self.rg(&[a]);
        let x = self.value(a);
        if !rg {
            let out = x.map(|x| act.apply(x));
            return self.push(out, Op::Act(a, Tensor::scalar(0.0)), rg);
        }
        let (out, der): (Vec<f64>, Vec<f64>) = x.data().iter().map(|&x| act.apply_with_derivative(x)).unzip();
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        self.push(out, Op::Act(a, Tensor::from_parts(shape, der)), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x: a, axis, start },
            rg,
        ))
    }

    /// Matrix product over the trailing two axes with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Softmax over the last axis after adding an optional additive mask.
    ///
    /// Positions whose mask entry is at or below half of [`MASK_SENTINEL`]
    /// receive exactly zero weight; a slice with every position masked
    /// produces all zeros.
    pub fn softmax_lastaxis(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        let logits = match mask {
            Some(m) => {
                if broadcast_shapes(xv.shape(), m.shape()).as_deref() != Some(xv.shape()) {
                    return Err(Error::dim("softmax mask", xv.shape(), m.shape()));
                }
                broadcast_binary("softmax mask", xv, m, |a, b| {
                    if is_masked(b) {
                        f64::NEG_INFINITY
                    } else {
                        a + b
                    }
                })?
            }
            None => xv.clone(),
        };
        let width = *xv.shape().last().unwrap_or(&1);
        let mut out = logits.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_row(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::dim("layer_norm", xv.shape(), &[]))?;
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.shape() != [c] {
            return Err(Error::dim("layer_norm gain", xv.shape(), gv.shape()));
        }
        if bv.shape() != [c] {
            return Err(Error::dim("layer_norm bias", xv.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let (mean, rstd) = row_stats(row);
            for j in 0..c {
                out.push((row[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, rg))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(&inputs);
        self.push(output, Op::Custom(inputs, op), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            if matches!(node.op, Op::Leaf | Op::Param) {
                adj[i] = Some(g);
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    /// Reverse pass followed by accumulation of parameter gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut send = |v: Var, grad: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot => *slot = Some(grad),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect(),
            )
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                send(*a, reduce_to_shape(g, val(*a).shape()));
                send(*b, reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to_shape(g, val(*a).shape()));
                send(*b, reduce_to_shape(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let full = broadcast_binary("mul", g, bv, |x, y| x * y).expect("shapes checked");
                    send(*a, reduce_to_shape(&full, av.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let full = broadcast_binary("mul", g, av, |x, y| x * y).expect("shapes checked");
                    send(*b, reduce_to_shape(&full, bv.shape()));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Exp(a) => send(*a, zip(&node.value, &|y, gy| y * gy)),
            Op::Abs(a) => send(*a, zip(val(*a), &|x, gy| if x > 0.0 { gy } else if x < 0.0 { -gy } else { 0.0 })),
            Op::Square(a) => send(*a, zip(val(*a), &|x, gy| 2.0 * x * gy)),
            Op::Act(a, der) => send(*a, zip(der, &|d, gy| d * gy)),
            Op::Clamp(a, lo, hi) => send(*a, zip(val(*a), &|x, gy| if x > *lo && x < *hi { gy } else { 0.0 })),
            Op::Softmax(a) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let c = gv.len();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (row, grow) in xv.data().chunks(c).zip(g.data().chunks(c)) {
                    let (mean, rstd) = row_stats(row);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend((0..c).map(|j| rstd * (dxhat[j] - m1 - xhat[j] * m2)));
                }
                send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                send(*gain, Tensor::from_parts(vec![c], dgain));
                send(*bias, Tensor::from_parts(vec![c], dbias));
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Reshape(a) => send(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec())),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                send(*a, g.permute(&inv).expect("valid inverse permutation"));
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let chunk = ps[*axis] * inner;
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        send(p, Tensor::from_parts(ps.to_vec(), d));
                    }
                    offset += ps[*axis];
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut d = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    d.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                send(*x, d);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(
                    val(*a),
                    val(*b),
                    g,
                    self.nodes[a.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(ga) = ga {
                    send(*a, ga);
                }
                if let Some(gb) = gb {
                    send(*b, gb);
                }
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, &node.value, g);
                debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.shape(), val(v).shape(), "{} gradient shape", op.name());
                        send(v, gi);
                    }
                }
            }
        }
    }
}

/// In-place stabilized softmax; `-inf` entries get exactly zero weight and an
/// all-`-inf` row becomes all zeros.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `c = a · b + beta · c` for strided row/column layouts; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a matrix index, b matrix index) for each output matrix.
    pairs: Vec<(usize, usize)>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let sa = super::tensor::broadcast_strides(ba, &batch);
    let sb = super::tensor::broadcast_strides(bb, &batch);
    let mut ia = Vec::new();
    super::tensor::for_each_offset(&batch, &sa, |o| ia.push(o));
    let mut pairs = Vec::with_capacity(ia.len());
    let mut i = 0;
    super::tensor::for_each_offset(&batch, &sb, |o| {
        pairs.push((ia[i], o));
        i += 1;
    });
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.out_shape.iter().product()];
    if b.rank() == 2 {
        // Weight broadcast over every leading axis: one flat product.
        let rows = a.len() / k;
        gemm(rows, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    } else {
        for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                (k, 1),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                (n, 1),
                0.0,
                &mut out[o * m * n..(o + 1) * m * n],
            );
        }
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, need_a: bool, need_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("checked in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    if b.rank() == 2 {
        let rows = a.len() / k;
        let ga = need_a.then(|| {
            let mut d = vec![0.0; a.len()];
            gemm(rows, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut d);
            Tensor::from_parts(a.shape().to_vec(), d)
        });
        let gb = need_b.then(|| {
            let mut d = vec![0.0; b.len()];
            gemm(k, rows, n, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut d);
            Tensor::from_parts(b.shape().to_vec(), d)
        });
        return (ga, gb);
    }
    let mut da = need_a.then(|| vec![0.0; a.len()]);
    let mut db = need_b.then(|| vec![0.0; b.len()]);
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let gs = &g.data()[o * m * n..(o + 1) * m * n];
        let asl = &a.data()[ia * m * k..(ia + 1) * m * k];
        let bsl = &b.data()[ib * k * n..(ib + 1) * k * n];
        if let Some(da) = da.as_mut() {
            gemm(m, n, k, gs, (n, 1), bsl, (1, n), 1.0, &mut da[ia * m * k..(ia + 1) * m * k]);
        }
        if let Some(db) = db.as_mut() {
            gemm(k, m, n, asl, (1, k), gs, (n, 1), 1.0, &mut db[ib * k * n..(ib + 1) * k * n]);
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}
