//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every differentiable operation used by the samplers, the renderer and the
//! models is registered here as an [`Op`] variant with its vector-Jacobian
//! product. Composite operations implemented outside this module plug in
//! through [`CustomOp`].

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};

/// A differentiable operation implemented outside the tape.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for every input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Silu(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AvgPool2(usize),
    Upsample2(usize),
    Reshape(usize),
    BroadcastTo(usize),
    Select(usize, usize),
    Stack(Vec<usize>),
    Gather(usize, Vec<usize>),
    LogSoftmax(usize),
    Softmax(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
    Opaque(&'static str),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients are taken with respect to.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(&[x]);
        self.push(value, op, rg)
    }

    /// Records a custom differentiable operation whose forward value has
    /// already been computed.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(output, Op::Custom(ids, op), rg)
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
        let value = Tensor::stack(&values)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::Stack(ids), rg))
    }

    /// Records a value derived by a non-differentiable operation. Reaching it
    /// during backward with a live gradient is an error.
    pub fn opaque<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, name: &'static str) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(output, Op::Opaque(name), rg)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    pub fn backward(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let needs = |i: usize| nodes[i].requires_grad;
            let mut send = |i: usize, contribution: Vec<f64>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (ga, gb) = binary_grads(&g, val(*a), val(*b), out, |_, _| (1.0, 1.0));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Sub(a, b) => {
                    let (ga, gb) = binary_grads(&g, val(*a), val(*b), out, |_, _| (1.0, -1.0));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = binary_grads(&g, val(*a), val(*b), out, |x, y| (y, x));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Div(a, b) => {
                    let (ga, gb) =
                        binary_grads(&g, val(*a), val(*b), out, |x, y| (1.0 / y, -x / (y * y)));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::AddScalar(x) => send(*x, g),
                Op::MulScalar(x, k) => send(*x, g.iter().map(|v| v * k).collect()),
                Op::Neg(x) => send(*x, g.iter().map(|v| -v).collect()),
                Op::Square(x) => send(*x, elementwise(&g, val(*x), |x| 2.0 * x)),
                Op::Sqrt(x) => send(*x, zip_out(&g, out, |y| 0.5 / y)),
                Op::Exp(x) => send(*x, zip_out(&g, out, |y| y)),
                Op::Log(x) => send(*x, elementwise(&g, val(*x), |x| 1.0 / x)),
                Op::Sin(x) => send(*x, elementwise(&g, val(*x), f64::cos)),
                Op::Cos(x) => send(*x, elementwise(&g, val(*x), |x| -x.sin())),
                Op::Tanh(x) => send(*x, zip_out(&g, out, |y| 1.0 - y * y)),
                Op::Sigmoid(x) => send(*x, zip_out(&g, out, |y| y * (1.0 - y))),
                Op::Relu(x) => send(*x, elementwise(&g, val(*x), |x| if x > 0.0 { 1.0 } else { 0.0 })),
                Op::Silu(x) => send(
                    *x,
                    elementwise(&g, val(*x), |x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Clamp(x, lo, hi) => send(
                    *x,
                    elementwise(&g, val(*x), |x| if x > *lo && x < *hi { 1.0 } else { 0.0 }),
                ),
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::SumLast(x) => {
                    let cols = *val(*x).shape().last().unwrap_or(&1);
                    let mut gx = Vec::with_capacity(val(*x).len());
                    for gv in &g {
                        gx.extend(std::iter::repeat_n(*gv, cols));
                    }
                    send(*x, gx);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        let bt = kernels::transpose(bv.data(), k, n);
                        send(*a, kernels::matmul(&g, &bt, m, n, k));
                    }
                    if needs(*b) {
                        let at = kernels::transpose(av.data(), m, k);
                        send(*b, kernels::matmul(&at, &g, k, m, n));
                    }
                }
                Op::Conv2d { x, w, geom } => {
                    let (gx, gw) = kernels::conv2d_backward(
                        val(*x).data(),
                        val(*w).data(),
                        &g,
                        *geom,
                        needs(*x),
                        needs(*w),
                    );
                    if needs(*x) {
                        send(*x, gx);
                    }
                    if needs(*w) {
                        send(*w, gw);
                    }
                }
                Op::AvgPool2(x) => {
                    let (planes, h, w) = planes_hw(val(*x).shape());
                    send(*x, kernels::avg_pool2_backward(&g, planes, h, w));
                }
                Op::Upsample2(x) => {
                    let (planes, h, w) = planes_hw(val(*x).shape());
                    send(*x, kernels::upsample2_backward(&g, planes, h, w));
                }
                Op::Reshape(x) => send(*x, g),
                Op::BroadcastTo(x) => {
                    let xv = val(*x);
                    let map = kernels::broadcast_index_map(xv.shape(), out.shape());
                    send(*x, kernels::reduce_broadcast(&g, Some(&map), xv.len()));
                }
                Op::Select(x, index) => {
                    let xv = val(*x);
                    let size = out.len();
                    let mut gx = vec![0.0; xv.len()];
                    gx[index * size..(index + 1) * size].copy_from_slice(&g);
                    send(*x, gx);
                }
                Op::Stack(parts) => {
                    let size = g.len() / parts.len();
                    for (k, &p) in parts.iter().enumerate() {
                        send(p, g[k * size..(k + 1) * size].to_vec());
                    }
                }
                Op::Gather(x, indices) => {
                    let mut gx = vec![0.0; val(*x).len()];
                    for (gv, &i) in g.iter().zip(indices) {
                        gx[i] += gv;
                    }
                    send(*x, gx);
                }
                Op::LogSoftmax(x) => {
                    let cols = *out.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = gv - y.exp() * total;
                        }
                    }
                    send(*x, gx);
                }
                Op::Softmax(x) => {
                    let cols = *out.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gv - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                    let gout = Tensor::from_parts(out.shape().to_vec(), g);
                    let gins = op.backward(&ins, out, &gout);
                    for (&i, gi) in inputs.iter().zip(gins) {
                        send(i, gi.to_vec());
                    }
                }
                Op::Opaque(name) => {
                    if g.iter().any(|v| *v != 0.0) {
                        return Err(Error::NonDifferentiable(name));
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape().to_vec();
                let data = grads
                    .get(v.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; numel(&shape)]);
                Ok(Tensor::from_parts(shape, data))
            })
            .collect()
    }
}

fn planes_hw(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    (numel(&shape[..r - 2]), h, w)
}

fn elementwise(g: &[f64], x: &Tensor, d: impl Fn(f64) -> f64) -> Vec<f64> {
    g.iter().zip(x.data()).map(|(g, &x)| g * d(x)).collect()
}

fn zip_out(g: &[f64], y: &Tensor, d: impl Fn(f64) -> f64) -> Vec<f64> {
    g.iter().zip(y.data()).map(|(g, &y)| g * d(y)).collect()
}

/// Gradients of a broadcasting binary op; `partials(a, b)` returns
/// `(d out/d a, d out/d b)` at a pair of operand values.
fn binary_grads(
    g: &[f64],
    a: &Tensor,
    b: &Tensor,
    out: &Tensor,
    partials: impl Fn(f64, f64) -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let map_a = (a.shape() != out.shape()).then(|| kernels::broadcast_index_map(a.shape(), out.shape()));
    let map_b = (b.shape() != out.shape()).then(|| kernels::broadcast_index_map(b.shape(), out.shape()));
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd) = (a.data(), b.data());
    for (k, gv) in g.iter().enumerate() {
        let ia = map_a.as_ref().map_or(k, |m| m[k]);
        let ib = map_b.as_ref().map_or(k, |m| m[k]);
        let (da, db) = partials(ad[ia], bd[ib]);
        ga[ia] += gv * da;
        gb[ib] += gv * db;
    }
    (ga, gb)
}

fn binary_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = kernels::broadcast_shape(a.shape(), b.shape())?;
    let ma = kernels::broadcast_index_map(a.shape(), &shape);
    let mb = kernels::broadcast_index_map(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Snapshot of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let value = binary_forward(&self.value(), &other.value(), f)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.unary(self.id, value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.map(|v| v + k, Op::AddScalar(self.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map(|v| v * k, Op::MulScalar(self.id, k))
    }

    pub fn neg(self) -> Var<'t> {
        self.map(|v| -v, Op::Neg(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.map(|v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.map(f64::sin, Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.map(f64::cos, Op::Cos(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.map(|v| v / (1.0 + (-v).exp()), Op::Silu(self.id))
    }

    /// Clips into `[lo, hi]`; the subgradient is 1 strictly inside and 0 on
    /// or beyond the bounds.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|v| v.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().mean());
        self.tape.unary(self.id, value, Op::Mean(self.id))
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let Some((&cols, lead)) = x.shape().split_last() else {
            return Err(Error::shape("sum_last on a scalar"));
        };
        let data = x.data().chunks(cols.max(1)).map(|c| c.iter().sum()).collect();
        let value = Tensor::from_parts(lead.to_vec(), data);
        Ok(self.tape.unary(self.id, value, Op::SumLast(self.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let value = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Stride-1 convolution of `[N,Ci,H,W]` with `[Co,Ci,k,k]` and zero padding.
    pub fn conv2d(self, weight: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d of {xs:?} with kernel {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k: ws[2],
            pad,
        };
        let data = kernels::conv2d_forward(x.data(), w.data(), geom);
        let value = Tensor::from_parts(vec![geom.n, geom.co, geom.out_h(), geom.out_w()], data);
        let rg = self.tape.requires(&[self.id, weight.id]);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 mean pooling over the trailing two axes.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape("avg_pool2 needs at least two axes"));
        }
        let (planes, h, w) = planes_hw(x.shape());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even extents, got {:?}", x.shape())));
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::from_parts(shape, kernels::avg_pool2(x.data(), planes, h, w));
        Ok(self.tape.unary(self.id, value, Op::AvgPool2(self.id)))
    }

    /// Nearest-neighbour 2x upsampling over the trailing two axes.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape("upsample2 needs at least two axes"));
        }
        let (planes, h, w) = planes_hw(x.shape());
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let value = Tensor::from_parts(shape, kernels::upsample2(x.data(), planes, h, w));
        Ok(self.tape.unary(self.id, value, Op::Upsample2(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.unary(self.id, value, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let target = kernels::broadcast_shape(x.shape(), shape)?;
        if target != shape {
            return Err(Error::shape(format!("cannot broadcast {:?} to {:?}", x.shape(), shape)));
        }
        let map = kernels::broadcast_index_map(x.shape(), shape);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.tape.unary(self.id, value, Op::BroadcastTo(self.id)))
    }

    /// The `index`-th slab along the leading axis.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let value = self.value().select(index)?;
        Ok(self.tape.unary(self.id, value, Op::Select(self.id, index)))
    }

    /// Elements at the given flat indices, as a 1-D tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(format!("gather index {bad} out of range {}", x.len())));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(vec![indices.len()], data);
        Ok(self.tape.unary(self.id, value, Op::Gather(self.id, indices.to_vec())))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&1);
        let value = Tensor::from_parts(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), cols.max(1)));
        self.tape.unary(self.id, value, Op::LogSoftmax(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&1);
        let data = kernels::log_softmax_rows(x.data(), cols.max(1))
            .into_iter()
            .map(f64::exp)
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.unary(self.id, value, Op::Softmax(self.id))
    }

    /// Elementwise sign; recorded as non-differentiable.
    pub fn sign(self) -> Var<'t> {
        let value = self.value().map(f64::signum);
        self.tape.opaque(&[self], value, "sign")
    }
}
