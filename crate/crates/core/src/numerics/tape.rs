//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] lives for one forward pass. Every op appends a node holding its
//! output value and enough saved state to run its vector-Jacobian product.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because nodes only reference earlier ids.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{broadcast_index_map, broadcast_shape, strides, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Storage precision of forward values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every forward value is rounded to the nearest `f32`.
    F32,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Gather {
        src: usize,
        index: Rc<[usize]>,
    },
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Dropout {
        src: usize,
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sum(a) => vec![*a],
            Op::Gather { src, .. } | Op::Dropout { src, .. } => vec![*src],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    training: Cell<bool>,
    rng: RefCell<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            precision,
            training: Cell::new(false),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Enables train-mode ops (dropout) and seeds their random stream.
    pub fn set_training(&self, training: bool, seed: u64) {
        self.training.set(training);
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), true)
    }

    /// A leaf sharing storage with the caller.
    pub fn leaf_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), false)
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::clone(&value),
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self, id, value }
    }

    fn push(&self, mut value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let id = nodes.len();
        let value = Rc::new(value);
        nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id, value })
    }

    /// Gradients of the scalar `loss` with respect to every node that reaches it.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(NumericsError::Contract("loss belongs to another tape".into()));
        }
        if loss.value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                let contributions = vjp(&nodes, node, &g);
                for (input, contrib) in contributions {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not reach the loss.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn binary(&self, other: &Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            NumericsError::Shape(format!(
                "{name}: cannot broadcast {:?} with {:?}",
                self.shape(),
                other.shape()
            ))
        })?;
        let a = self.value.data();
        let b = other.value.data();
        let data = if self.shape() == other.shape() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(self.shape(), &out_shape);
            let mb = broadcast_index_map(other.shape(), &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect()
        };
        self.tape.push(Tensor::new(&out_shape, data)?, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.tape
            .push(self.value.map(|v| v * factor), Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.tape.push(self.value.map(|v| v + c), Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.tape.push(self.value.map(|v| v * v), Op::Square(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.tape.push(self.value.map(sigmoid), Op::Sigmoid(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.tape.push(self.value.map(gelu), Op::Gelu(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.tape.push(Tensor::scalar(self.value.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast leading extents.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let plan = MatMulPlan::new(self.shape(), other.shape())?;
        let a = self.value.data();
        let b = other.value.data();
        let mut out = vec![0.0; plan.out_len()];
        for (batch, (&ia, &ib)) in plan.map_a.iter().zip(&plan.map_b).enumerate() {
            mm(
                &a[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &b[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                &mut out[batch * plan.m * plan.n..(batch + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        self.tape
            .push(Tensor::new(&plan.out_shape, out)?, Op::MatMul(self.id, other.id))
    }

    /// `out[i] = self[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&self, shape: &[usize], index: Rc<[usize]>) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if index.len() != n {
            return Err(NumericsError::Shape(format!(
                "gather: {} indices for shape {:?}",
                index.len(),
                shape
            )));
        }
        let src = self.value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(NumericsError::Shape(format!(
                "gather: index {bad} out of range for {:?}",
                self.shape()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        self.tape
            .push(Tensor::new(shape, data)?, Op::Gather { src: self.id, index })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self
            .value
            .reshape(shape)
            .map_err(|_| NumericsError::Shape(format!("reshape: {:?} into {:?}", self.shape(), shape)))?;
        self.tape.push(t, Op::Reshape(self.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::Shape(format!(
                "permute: axes {axes:?} invalid for {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides = strides(shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let n: usize = out_shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n {
            index.push(pos);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= perm_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        self.gather(&out_shape, index.into())
    }

    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(NumericsError::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(NumericsError::Shape(format!(
                    "broadcast_to: {:?} into {:?}",
                    self.shape(),
                    shape
                )))
            }
        }
        let map = broadcast_index_map(self.shape(), shape);
        self.gather(shape, map.into())
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let last = *shape.last().expect("tensor has rank >= 1");
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.tape.push(Tensor::new(shape, out)?, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layernorm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let width = *shape.last().expect("tensor has rank >= 1");
        if gain.shape() != [width] || bias.shape() != [width] {
            return Err(NumericsError::Shape(format!(
                "layernorm: gain {:?} / bias {:?} must be [{width}]",
                gain.shape(),
                bias.shape()
            )));
        }
        let x = self.value.data();
        let g = gain.value.data();
        let b = bias.value.data();
        let rows = x.len() / width;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..width {
                let h = (row[j] - mean) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout; identity outside train mode or at rate 0.
    pub fn dropout(&self, rate: f64) -> Result<Var<'t>> {
        if !self.tape.is_training() || rate <= 0.0 {
            return Ok(self.clone());
        }
        if rate >= 1.0 {
            return Err(NumericsError::Contract(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = {
            let mut rng = self.tape.rng.borrow_mut();
            (0..self.value.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let data = self.value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.tape
            .push(Tensor::new(self.shape(), data)?, Op::Dropout { src: self.id, mask })
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    map_a: Vec<usize>,
    map_b: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || NumericsError::Shape(format!("matmul: cannot multiply {a:?} by {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &a[..a.len() - 2];
        let lead_b = &b[..b.len() - 2];
        if lead_b.is_empty() {
            // fold a's leading extents into rows: one large product
            let rows: usize = lead_a.iter().product::<usize>() * m;
            let mut out_shape = lead_a.to_vec();
            out_shape.extend([m, n]);
            return Ok(Self {
                m: rows,
                k,
                n,
                out_shape,
                map_a: vec![0],
                map_b: vec![0],
            });
        }
        let lead = broadcast_shape(lead_a, lead_b).ok_or_else(err)?;
        let map_a = broadcast_index_map(lead_a, &lead);
        let map_b = broadcast_index_map(lead_b, &lead);
        let mut out_shape = lead;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            map_a,
            map_b,
        })
    }

    fn out_len(&self) -> usize {
        self.map_a.len() * self.m * self.n
    }
}

/// c[m,n] += a[m,k] @ b[k,n]
fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// da[m,k] += dc[m,n] @ b[k,n]^T
fn mm_bt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// db[k,n] += a[m,k]^T @ dc[m,n]
fn mm_at(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
}

/// Sum a gradient of shape `out` back onto the broadcast source shape `src`.
fn reduce_broadcast(grad: &[f64], src: &[usize], out: &[usize], f: impl Fn(usize, f64) -> f64) -> Tensor {
    let mut acc = Tensor::zeros(src);
    if src == out {
        for (i, (a, &g)) in acc.data_mut().iter_mut().zip(grad).enumerate() {
            *a = f(i, g);
        }
        return acc;
    }
    let map = broadcast_index_map(src, out);
    let data = acc.data_mut();
    for (i, (&j, &g)) in map.iter().zip(grad).enumerate() {
        data[j] += f(i, g);
    }
    acc
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let gd = g.data();
    let out_shape = node.value.shape();
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_broadcast(gd, val(*a).shape(), out_shape, |_, g| g)),
            (*b, reduce_broadcast(gd, val(*b).shape(), out_shape, |_, g| g)),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_broadcast(gd, val(*a).shape(), out_shape, |_, g| g)),
            (*b, reduce_broadcast(gd, val(*b).shape(), out_shape, |_, g| -g)),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ea = expand(bv, out_shape);
            let eb = expand(av, out_shape);
            vec![
                (*a, reduce_broadcast(gd, av.shape(), out_shape, |i, g| g * ea[i])),
                (*b, reduce_broadcast(gd, bv.shape(), out_shape, |i, g| g * eb[i])),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ea = expand(av, out_shape);
            let eb = expand(bv, out_shape);
            vec![
                (*a, reduce_broadcast(gd, av.shape(), out_shape, |i, g| g / eb[i])),
                (
                    *b,
                    reduce_broadcast(gd, bv.shape(), out_shape, |i, g| -g * ea[i] / (eb[i] * eb[i])),
                ),
            ]
        }
        Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
        Op::AddScalar(a) | Op::Reshape(a) => {
            vec![(*a, Tensor::new(val(*a).shape(), gd.to_vec()).expect("same size"))]
        }
        Op::Square(a) => {
            let x = val(*a).data();
            let d = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
            vec![(*a, Tensor::new(val(*a).shape(), d).expect("same size"))]
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
            vec![(*a, Tensor::new(out_shape, d).expect("same size"))]
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let d = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
            vec![(*a, Tensor::new(out_shape, d).expect("same size"))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
        Op::Dropout { src, mask } => {
            let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
            vec![(*src, Tensor::new(out_shape, d).expect("same size"))]
        }
        Op::Gather { src, index } => {
            let mut acc = Tensor::zeros(val(*src).shape());
            let data = acc.data_mut();
            for (&i, &gv) in index.iter().zip(gd) {
                data[i] += gv;
            }
            vec![(*src, acc)]
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let last = *out_shape.last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(last).zip(gd.chunks(last)).zip(d.chunks_mut(last)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..last {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, Tensor::new(out_shape, d).expect("same size"))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let width = *out_shape.last().unwrap();
            let gv = val(*gain).data();
            let mut dx = vec![0.0; gd.len()];
            let mut dgain = vec![0.0; width];
            let mut dbias = vec![0.0; width];
            for (r, &inv) in rstd.iter().enumerate() {
                let off = r * width;
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..width {
                    let go = gd[off + j];
                    let h = xhat[off + j];
                    dgain[j] += go * h;
                    dbias[j] += go;
                    let dh = go * gv[j];
                    sum_dh += dh;
                    sum_dh_h += dh * h;
                }
                let w = width as f64;
                for j in 0..width {
                    let dh = gd[off + j] * gv[j];
                    dx[off + j] = inv * (dh - sum_dh / w - xhat[off + j] * sum_dh_h / w);
                }
            }
            vec![
                (*x, Tensor::new(out_shape, dx).expect("same size")),
                (*gain, Tensor::from_vec(dgain)),
                (*bias, Tensor::from_vec(dbias)),
            ]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = MatMulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
            let mut da = Tensor::zeros(av.shape());
            let mut db = Tensor::zeros(bv.shape());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            for (batch, (&ia, &ib)) in plan.map_a.iter().zip(&plan.map_b).enumerate() {
                let dc = &gd[batch * m * n..(batch + 1) * m * n];
                mm_bt(
                    dc,
                    &bv.data()[ib * k * n..(ib + 1) * k * n],
                    &mut da.data_mut()[ia * m * k..(ia + 1) * m * k],
                    m,
                    k,
                    n,
                );
                mm_at(
                    &av.data()[ia * m * k..(ia + 1) * m * k],
                    dc,
                    &mut db.data_mut()[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            vec![(*a, da), (*b, db)]
        }
    }
}

/// Values of `t` broadcast to `shape`, materialized.
fn expand(t: &Tensor, shape: &[usize]) -> Vec<f64> {
    if t.shape() == shape {
        return t.data().to_vec();
    }
    broadcast_index_map(t.shape(), shape)
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}
