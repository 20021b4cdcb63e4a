//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] is built eagerly: every op computes its output tensor at
//! insertion time and caches whatever the reverse pass needs. Node ids are
//! assigned in insertion order, so every node's inputs precede it and the
//! backward pass is a single reverse sweep that visits each node once.
//! Gradient accumulation over fan-out is summation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing constant added inside normalization denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Payload {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Elu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    ConcatCols(NodeId, NodeId),
    BroadcastRows(NodeId, usize),
    Reshape(NodeId),
    AffineConst(NodeId, f64),
    BatchNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mode: bool,
    },
    RowNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Payload {
    fn op_name(&self) -> &'static str {
        match self {
            Payload::Leaf => "leaf",
            Payload::Add(..) => "add",
            Payload::Sub(..) => "sub",
            Payload::Mul(..) => "mul",
            Payload::Div(..) => "div",
            Payload::MatMul(..) => "matmul",
            Payload::Relu(..) => "relu",
            Payload::Elu(..) => "elu",
            Payload::Tanh(..) => "tanh",
            Payload::Exp(..) => "exp",
            Payload::Log(..) => "log",
            Payload::Sqrt(..) => "sqrt",
            Payload::Square(..) => "square",
            Payload::Mean(..) => "mean",
            Payload::Sum(..) => "sum",
            Payload::SumRows(..) => "sum_rows",
            Payload::ConcatCols(..) => "concat_cols",
            Payload::BroadcastRows(..) => "broadcast_rows",
            Payload::Reshape(..) => "reshape",
            Payload::AffineConst(..) => "affine",
            Payload::BatchNorm { .. } => "batch_norm",
            Payload::RowNorm { .. } => "row_norm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    payload: Payload,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every named leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm across all gradients.
    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, k: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
}

/// Batch statistics produced by a batch-mode normalization node, for
/// running-average updates owned by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalization flavor for [`Tape::batch_norm`].
pub enum NormStats<'a> {
    /// Normalize with statistics of the current batch (training mode).
    Batch,
    /// Normalize with externally owned frozen statistics (inference mode).
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Named, gradient-tracked leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.leaf_names.contains_key(name) {
            return Err(Error::Contract {
                context: "Tape::param".to_string(),
                detail: format!("duplicate leaf name `{name}`"),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("parameter leaf `{name}`"),
            });
        }
        let id = self.push(Payload::Leaf, value, true);
        self.leaf_names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Untracked constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Payload::Leaf, value, false)
    }

    fn push(&mut self, payload: Payload, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            payload,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, payload: Payload, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        let value = Tensor::new(shape, data)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("output of node #{} ({})", self.nodes.len(), payload.op_name()),
            });
        }
        let requires_grad = self.payload_requires_grad(&payload);
        Ok(self.push(payload, value, requires_grad))
    }

    fn payload_requires_grad(&self, payload: &Payload) -> bool {
        let dep = |id: &NodeId| self.nodes[id.0].requires_grad;
        match payload {
            Payload::Leaf => false,
            Payload::Add(a, b)
            | Payload::Sub(a, b)
            | Payload::Mul(a, b)
            | Payload::Div(a, b)
            | Payload::MatMul(a, b)
            | Payload::ConcatCols(a, b) => dep(a) || dep(b),
            Payload::Relu(a)
            | Payload::Elu(a)
            | Payload::Tanh(a)
            | Payload::Exp(a)
            | Payload::Log(a)
            | Payload::Sqrt(a)
            | Payload::Square(a)
            | Payload::Mean(a)
            | Payload::Sum(a)
            | Payload::SumRows(a)
            | Payload::BroadcastRows(a, _)
            | Payload::Reshape(a)
            | Payload::AffineConst(a, _) => dep(a),
            Payload::BatchNorm { x, gain, bias, .. } | Payload::RowNorm { x, gain, bias, .. } => {
                dep(x) || dep(gain) || dep(bias)
            }
        }
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::Shape {
            context: format!("node #{} ({op})", self.nodes.len()),
            detail,
        }
    }

    // ----- elementwise binary ops (equal shapes, or scalar on either side) -----

    fn binary_data<F: Fn(f64, f64) -> f64>(
        &self,
        op: &str,
        a: NodeId,
        b: NodeId,
        f: F,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Ok((data, ta.shape().to_vec()))
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Ok((
                ta.data().iter().map(|x| f(*x, s)).collect(),
                ta.shape().to_vec(),
            ))
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Ok((
                tb.data().iter().map(|y| f(s, *y)).collect(),
                tb.shape().to_vec(),
            ))
        } else {
            Err(self.shape_err(
                op,
                format!(
                    "operands {:?} vs {:?} (need equal shapes or a scalar)",
                    ta.shape(),
                    tb.shape()
                ),
            ))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (data, shape) = self.binary_data("add", a, b, |x, y| x + y)?;
        self.push_op(Payload::Add(a, b), data, shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (data, shape) = self.binary_data("sub", a, b, |x, y| x - y)?;
        self.push_op(Payload::Sub(a, b), data, shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (data, shape) = self.binary_data("mul", a, b, |x, y| x * y)?;
        self.push_op(Payload::Mul(a, b), data, shape)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (data, shape) = self.binary_data("div", a, b, |x, y| x / y)?;
        self.push_op(Payload::Div(a, b), data, shape)
    }

    // ----- unary ops -----

    fn unary<F: Fn(f64) -> f64>(&mut self, a: NodeId, f: F, payload: Payload) -> Result<NodeId> {
        let (data, shape) = {
            let ta = self.value(a);
            (
                ta.data().iter().map(|x| f(*x)).collect::<Vec<f64>>(),
                ta.shape().to_vec(),
            )
        };
        self.push_op(payload, data, shape)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Payload::Relu(a))
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            Payload::Elu(a),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Payload::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::exp, Payload::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::ln, Payload::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::sqrt, Payload::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * x, Payload::Square(a))
    }

    /// Elementwise `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(a, |x| scale * x + shift, Payload::AffineConst(a, scale))
    }

    // ----- reductions and shape ops -----

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::Contract {
                context: "Tape::mean".to_string(),
                detail: "mean of an empty tensor".to_string(),
            });
        }
        let m = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push_op(Payload::Mean(a), vec![m], vec![1])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push_op(Payload::Sum(a), vec![s], vec![1])
    }

    /// Row sums of a 2-D tensor: `[n, f] -> [n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(self.shape_err("sum_rows", format!("need 2-D input, got {:?}", ta.shape())));
        }
        let (n, f) = (ta.shape()[0], ta.shape()[1]);
        let data = (0..n)
            .map(|i| ta.data()[i * f..(i + 1) * f].iter().sum::<f64>())
            .collect();
        self.push_op(Payload::SumRows(a), data, vec![n])
    }

    /// Column-wise concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(self.shape_err(
                "concat_cols",
                format!("operands {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        self.push_op(Payload::ConcatCols(a, b), data, vec![n, ca + cb])
    }

    /// Tile a 1-D tensor `[f]` into `n` identical rows `[n, f]`.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(self.shape_err(
                "broadcast_rows",
                format!("need 1-D input, got {:?}", ta.shape()),
            ));
        }
        let f = ta.len();
        let mut data = Vec::with_capacity(n * f);
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        self.push_op(Payload::BroadcastRows(a, n), data, vec![n, f])
    }

    /// Reinterpret the element buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(self.shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", ta.shape(), shape),
            ));
        }
        let data = ta.data().to_vec();
        self.push_op(Payload::Reshape(a), data, shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.shape_err(
                "matmul",
                format!("operands {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..n {
            let arow = &da[i * k..(i + 1) * k];
            let crow = &mut out[i * m..(i + 1) * m];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &db[l * m..(l + 1) * m];
                for j in 0..m {
                    crow[j] += av * brow[j];
                }
            }
        }
        self.push_op(Payload::MatMul(a, b), out, vec![n, m])
    }

    /// Feature-wise affine normalization of a 2-D batch `[n, f]` with gain and
    /// bias vectors `[f]`. `NormStats::Batch` uses current-batch statistics
    /// (requires n >= 2) and returns them; `NormStats::Frozen` uses the
    /// supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: NormStats<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(self.shape_err("batch_norm", format!("need 2-D input, got {:?}", tx.shape())));
        }
        let (n, f) = (tx.shape()[0], tx.shape()[1]);
        let tg = self.value(gain);
        let tb = self.value(bias);
        if tg.shape() != [f] || tb.shape() != [f] {
            return Err(self.shape_err(
                "batch_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{f}]",
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let (mean, var, batch_mode) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::Contract {
                        context: "Tape::batch_norm".to_string(),
                        detail: format!("batch statistics need n >= 2 rows, got {n}"),
                    });
                }
                let xd = tx.data();
                let mut mean = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        mean[j] += xd[i * f + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        let d = xd[i * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n as f64;
                }
                (mean, var, true)
            }
            NormStats::Frozen { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(self.shape_err(
                        "batch_norm",
                        format!("frozen stats of length {}/{} vs f={f}", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut x_hat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                let h = (xd[i * f + j] - mean[j]) * inv_std[j];
                x_hat[i * f + j] = h;
                out[i * f + j] = gd[j] * h + bd[j];
            }
        }
        let ret_stats = batch_mode.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let id = self.push_op(
            Payload::BatchNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
                batch_mode,
            },
            out,
            vec![n, f],
        )?;
        Ok((id, ret_stats))
    }

    /// Per-row normalization over the feature axis (batch-independent), with
    /// feature-wise gain and bias.
    pub fn row_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(self.shape_err("row_norm", format!("need 2-D input, got {:?}", tx.shape())));
        }
        let (n, f) = (tx.shape()[0], tx.shape()[1]);
        let tg = self.value(gain);
        let tb = self.value(bias);
        if tg.shape() != [f] || tb.shape() != [f] {
            return Err(self.shape_err(
                "row_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{f}]",
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let xd = tx.data();
        let gd = tg.data();
        let bd = tb.data();
        let mut x_hat = vec![0.0; n * f];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let row = &xd[i * f..(i + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..f {
                let h = (row[j] - mu) * is;
                x_hat[i * f + j] = h;
                out[i * f + j] = gd[j] * h + bd[j];
            }
        }
        self.push_op(
            Payload::RowNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            out,
            vec![n, f],
        )
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. Returns gradients for every named
    /// leaf that the root depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::Contract {
                context: "Tape::backward".to_string(),
                detail: format!("root must be scalar, shape is {:?}", root_val.shape()),
            });
        }
        if !root_val.is_finite() {
            return Err(Error::NonFinite {
                context: "backward root value".to_string(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.leaf_names {
            if let Some(g) = grads[id.0].take() {
                let t = Tensor::new(self.nodes[id.0].value.shape().to_vec(), g)?;
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of leaf `{name}`"),
                    });
                }
                out.insert(name.clone(), t);
            } else {
                out.insert(
                    name.clone(),
                    Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
                );
            }
        }
        Ok(Gradients { map: out })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        grads[id.0].as_mut().unwrap()
    }

    /// Distribute `g` (gradient w.r.t. node `idx`'s output) into its inputs.
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let node = &self.nodes[idx];
        match &node.payload {
            Payload::Leaf => {}
            Payload::Add(a, b) => {
                if needs(a) {
                    Self::acc_elementwise_or_scalar(self, grads, *a, g, |_, gi| gi);
                }
                if needs(b) {
                    Self::acc_elementwise_or_scalar(self, grads, *b, g, |_, gi| gi);
                }
            }
            Payload::Sub(a, b) => {
                if needs(a) {
                    Self::acc_elementwise_or_scalar(self, grads, *a, g, |_, gi| gi);
                }
                if needs(b) {
                    Self::acc_elementwise_or_scalar(self, grads, *b, g, |_, gi| -gi);
                }
            }
            Payload::Mul(a, b) => {
                if needs(a) {
                    let bv = self.broadcast_read(*b, g.len());
                    Self::acc_elementwise_or_scalar(self, grads, *a, g, |i, gi| gi * bv(i));
                }
                if needs(b) {
                    let av = self.broadcast_read(*a, g.len());
                    Self::acc_elementwise_or_scalar(self, grads, *b, g, |i, gi| gi * av(i));
                }
            }
            Payload::Div(a, b) => {
                let bv = self.broadcast_read(*b, g.len());
                if needs(a) {
                    Self::acc_elementwise_or_scalar(self, grads, *a, g, |i, gi| gi / bv(i));
                }
                if needs(b) {
                    let av = self.broadcast_read(*a, g.len());
                    Self::acc_elementwise_or_scalar(self, grads, *b, g, |i, gi| {
                        let bb = bv(i);
                        -gi * av(i) / (bb * bb)
                    });
                }
            }
            Payload::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(a) {
                    let bd = tb.data();
                    let ga = Self::add_into(grads, *a, n * k);
                    for i in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * m..(i + 1) * m];
                            let brow = &bd[l * m..(l + 1) * m];
                            for j in 0..m {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + l] += s;
                        }
                    }
                }
                if needs(b) {
                    let ad = ta.data();
                    let gb = Self::add_into(grads, *b, k * m);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for l in 0..k {
                            let av = ad[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[l * m..(l + 1) * m];
                            for j in 0..m {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
            Payload::Relu(a) => {
                if needs(a) {
                    let xd = self.value(*a).data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Payload::Elu(a) => {
                if needs(a) {
                    let xd = self.value(*a).data();
                    let yd = node.value.data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * if xd[i] > 0.0 { 1.0 } else { yd[i] + 1.0 };
                    }
                }
            }
            Payload::Tanh(a) => {
                if needs(a) {
                    let yd = node.value.data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - yd[i] * yd[i]);
                    }
                }
            }
            Payload::Exp(a) => {
                if needs(a) {
                    let yd = node.value.data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * yd[i];
                    }
                }
            }
            Payload::Log(a) => {
                if needs(a) {
                    let xd = self.value(*a).data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / xd[i];
                    }
                }
            }
            Payload::Sqrt(a) => {
                if needs(a) {
                    let yd = node.value.data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * 0.5 / yd[i];
                    }
                }
            }
            Payload::Square(a) => {
                if needs(a) {
                    let xd = self.value(*a).data();
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * 2.0 * xd[i];
                    }
                }
            }
            Payload::Mean(a) => {
                if needs(a) {
                    let len = self.value(*a).len();
                    let ga = Self::add_into(grads, *a, len);
                    let gv = g[0] / len as f64;
                    for v in ga.iter_mut() {
                        *v += gv;
                    }
                }
            }
            Payload::Sum(a) => {
                if needs(a) {
                    let len = self.value(*a).len();
                    let ga = Self::add_into(grads, *a, len);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Payload::SumRows(a) => {
                if needs(a) {
                    let ta = self.value(*a);
                    let (n, f) = (ta.shape()[0], ta.shape()[1]);
                    let ga = Self::add_into(grads, *a, n * f);
                    for i in 0..n {
                        for j in 0..f {
                            ga[i * f + j] += g[i];
                        }
                    }
                }
            }
            Payload::ConcatCols(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let n = self.value(*a).shape()[0];
                if needs(a) {
                    let ga = Self::add_into(grads, *a, n * ca);
                    for i in 0..n {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                }
                if needs(b) {
                    let gb = Self::add_into(grads, *b, n * cb);
                    for i in 0..n {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Payload::BroadcastRows(a, n) => {
                if needs(a) {
                    let f = self.value(*a).len();
                    let ga = Self::add_into(grads, *a, f);
                    for i in 0..*n {
                        for j in 0..f {
                            ga[j] += g[i * f + j];
                        }
                    }
                }
            }
            Payload::Reshape(a) => {
                if needs(a) {
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
            }
            Payload::AffineConst(a, scale) => {
                if needs(a) {
                    let s = *scale;
                    let ga = Self::add_into(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * s;
                    }
                }
            }
            Payload::BatchNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
                batch_mode,
            } => {
                let (n, f) = {
                    let s = node.value.shape();
                    (s[0], s[1])
                };
                let gd = self.value(*gain).data();
                if needs(gain) {
                    let gg = Self::add_into(grads, *gain, f);
                    for i in 0..n {
                        for j in 0..f {
                            gg[j] += g[i * f + j] * x_hat[i * f + j];
                        }
                    }
                }
                if needs(bias) {
                    let gb = Self::add_into(grads, *bias, f);
                    for i in 0..n {
                        for j in 0..f {
                            gb[j] += g[i * f + j];
                        }
                    }
                }
                if needs(x) {
                    if *batch_mode {
                        // d_xhat = g * gain; reduce over the batch per feature.
                        let mut sum_dh = vec![0.0; f];
                        let mut sum_dh_h = vec![0.0; f];
                        for i in 0..n {
                            for j in 0..f {
                                let dh = g[i * f + j] * gd[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * x_hat[i * f + j];
                            }
                        }
                        let gx = Self::add_into(grads, *x, n * f);
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..f {
                                let dh = g[i * f + j] * gd[j];
                                gx[i * f + j] += inv_std[j] / nf
                                    * (nf * dh - sum_dh[j] - x_hat[i * f + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        let gx = Self::add_into(grads, *x, n * f);
                        for i in 0..n {
                            for j in 0..f {
                                gx[i * f + j] += g[i * f + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Payload::RowNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let (n, f) = {
                    let s = node.value.shape();
                    (s[0], s[1])
                };
                let gd = self.value(*gain).data();
                if needs(gain) {
                    let gg = Self::add_into(grads, *gain, f);
                    for i in 0..n {
                        for j in 0..f {
                            gg[j] += g[i * f + j] * x_hat[i * f + j];
                        }
                    }
                }
                if needs(bias) {
                    let gb = Self::add_into(grads, *bias, f);
                    for i in 0..n {
                        for j in 0..f {
                            gb[j] += g[i * f + j];
                        }
                    }
                }
                if needs(x) {
                    let gx = Self::add_into(grads, *x, n * f);
                    let ff = f as f64;
                    for i in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..f {
                            let dh = g[i * f + j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * x_hat[i * f + j];
                        }
                        for j in 0..f {
                            let dh = g[i * f + j] * gd[j];
                            gx[i * f + j] += inv_std[i] / ff
                                * (ff * dh - sum_dh - x_hat[i * f + j] * sum_dh_h);
                        }
                    }
                }
            }
        }
    }

    /// Reader that transparently broadcasts a scalar operand.
    fn broadcast_read(&self, id: NodeId, out_len: usize) -> impl Fn(usize) -> f64 + '_ {
        let t = self.value(id);
        let scalar = t.is_scalar() && out_len != 1;
        let data = t.data();
        move |i| if scalar { data[0] } else { data[i] }
    }

    /// Accumulate into an operand of an elementwise binary op, folding the
    /// output gradient down to a scalar when the operand was broadcast.
    fn acc_elementwise_or_scalar<F: Fn(usize, f64) -> f64>(
        &self,
        grads: &mut Vec<Option<Vec<f64>>>,
        id: NodeId,
        g: &[f64],
        partial: F,
    ) {
        let len = self.value(id).len();
        let ga = Self::add_into(grads, id, len);
        if len == g.len() {
            for i in 0..g.len() {
                ga[i] += partial(i, g[i]);
            }
        } else {
            debug_assert_eq!(len, 1);
            let mut s = 0.0;
            for i in 0..g.len() {
                s += partial(i, g[i]);
            }
            ga[0] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_leaf(t: &mut Tape, name: &str, v: f64) -> NodeId {
        t.param(name, Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn forward_add() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.constant(Tensor::scalar(3.0));
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
    }

    #[test]
    fn forward_relu() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn forward_exp_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.exp(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
    }

    #[test]
    fn backward_square_power_rule() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, "x", 3.0);
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut t = Tape::new();
        let a = scalar_leaf(&mut t, "x1", 2.0);
        let b = scalar_leaf(&mut t, "x2", 5.0);
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("x1").unwrap().data(), &[5.0]);
        assert_eq!(g.get("x2").unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_sqrt_with_smoothing_shift() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, "x", 0.0);
        let shifted = t.affine(x, 1.0, 1e-8).unwrap();
        let y = t.sqrt(shifted).unwrap();
        let g = t.backward(y).unwrap();
        let got = g.get("x").unwrap().data()[0];
        assert!((got - 5000.0).abs() / 5000.0 < 1e-12, "got {got}");
    }

    #[test]
    fn fanout_accumulates_by_summation() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, "x", 1.5);
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        // linearity of differentiation
        let build = |t: &mut Tape, xv: f64| {
            let x = t.param("x", Tensor::scalar(xv)).unwrap();
            let a = t.square(x).unwrap();
            let b = t.tanh(x).unwrap();
            (a, b)
        };
        let mut t1 = Tape::new();
        let (a, b) = build(&mut t1, 0.7);
        let s = t1.add(a, b).unwrap();
        let g_joint = t1.backward(s).unwrap().get("x").unwrap().data()[0];

        let mut t2 = Tape::new();
        let (a2, b2) = build(&mut t2, 0.7);
        let ga = t2.backward(a2).unwrap().get("x").unwrap().data()[0];
        let gb = t2.backward(b2).unwrap().get("x").unwrap().data()[0];
        assert!((g_joint - (ga + gb)).abs() < 1e-14);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(vec![0.3, -0.9, 2.4, 0.01]));
            let w = t
                .constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect()).unwrap());
            let xr = t.reshape(x, vec![1, 4]).unwrap();
            let h = t.matmul(xr, w).unwrap();
            let h = t.tanh(h).unwrap();
            let s = t.sum(h).unwrap();
            t.value(s).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        match err {
            Error::Shape { context, .. } => assert!(context.contains("add"), "{context}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let err = t.log(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut t = Tape::new();
        t.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(t.param("w", Tensor::scalar(2.0)).is_err());
    }

    /// Central-difference check used by the per-op property below.
    fn gradcheck<F>(build: F, leaves: &[(&str, Vec<f64>)], tol: f64)
    where
        F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> NodeId,
    {
        let vals: BTreeMap<String, Tensor> = leaves
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
            .collect();
        let mut tape = Tape::new();
        let root = build(&mut tape, &vals);
        let grads = tape.backward(root).unwrap();

        let h = 1e-5;
        for (name, base) in &vals {
            for k in 0..base.len() {
                let eval = |delta: f64| {
                    let mut vs = vals.clone();
                    let mut d = vs[name].data().to_vec();
                    d[k] += delta;
                    vs.insert(name.clone(), Tensor::vector(d));
                    let mut t = Tape::new();
                    let r = build(&mut t, &vs);
                    t.value(r).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = grads.get(name).unwrap().data()[k];
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (ad - fd).abs() / denom < tol,
                    "leaf {name}[{k}]: ad={ad} fd={fd}"
                );
            }
        }
    }

    fn bind(t: &mut Tape, vals: &BTreeMap<String, Tensor>, name: &str) -> NodeId {
        t.param(name, vals[name].clone()).unwrap()
    }

    #[test]
    fn relu_and_elu_gradients_away_from_the_kink() {
        // Central differences are invalid at x = 0, so probe points keep a
        // margin larger than the step size.
        gradcheck(
            |t, vals| {
                let x = bind(t, vals, "x");
                let r = t.relu(x).unwrap();
                let e = t.elu(x).unwrap();
                let s = t.add(r, e).unwrap();
                t.sum(s).unwrap()
            },
            &[("x", vec![-1.2, -0.4, 0.3, 0.9, 2.1])],
            1e-6,
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_elementwise_ops_match_finite_differences(
            a in proptest::collection::vec(0.2f64..1.8, 4),
            b in proptest::collection::vec(0.2f64..1.8, 4),
        ) {
            gradcheck(
                |t, vals| {
                    let x = bind(t, vals, "a");
                    let y = bind(t, vals, "b");
                    let s = t.add(x, y).unwrap();
                    let d = t.sub(s, y).unwrap();
                    let m = t.mul(d, y).unwrap();
                    let q = t.div(m, y).unwrap();
                    let e = t.exp(q).unwrap();
                    let l = t.log(e).unwrap();
                    let r = t.sqrt(l).unwrap();
                    let sq = t.square(r).unwrap();
                    let th = t.tanh(sq).unwrap();
                    t.mean(th).unwrap()
                },
                &[("a", a), ("b", b)],
                1e-4,
            );
        }

        #[test]
        fn prop_structural_ops_match_finite_differences(
            x in proptest::collection::vec(-1.5f64..1.5, 6),
            w in proptest::collection::vec(-1.0f64..1.0, 6),
            v in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            gradcheck(
                |t, vals| {
                    let x = bind(t, vals, "x");
                    let w = bind(t, vals, "w");
                    let v = bind(t, vals, "v");
                    let xm = t.reshape(x, vec![2, 3]).unwrap();
                    let wm = t.reshape(w, vec![3, 2]).unwrap();
                    let h = t.matmul(xm, wm).unwrap();          // [2,2]
                    let bcast = t.broadcast_rows(v, 2).unwrap(); // [2,2]
                    let hb = t.add(h, bcast).unwrap();
                    let cat = t.concat_cols(hb, h).unwrap();     // [2,4]
                    let act = t.tanh(cat).unwrap();
                    let rows = t.sum_rows(act).unwrap();         // [2]
                    let scaled = t.affine(rows, 0.7, 0.1).unwrap();
                    t.sum(scaled).unwrap()
                },
                &[("x", x), ("w", w), ("v", v)],
                1e-4,
            );
        }

        #[test]
        fn prop_normalization_ops_match_finite_differences(
            x in proptest::collection::vec(-2.0f64..2.0, 12),
            gain in proptest::collection::vec(0.5f64..1.5, 3),
            bias in proptest::collection::vec(-0.5f64..0.5, 3),
        ) {
            gradcheck(
                |t, vals| {
                    let x = bind(t, vals, "x");
                    let g = bind(t, vals, "gain");
                    let b = bind(t, vals, "bias");
                    let xm = t.reshape(x, vec![4, 3]).unwrap();
                    let (bn, _) = t.batch_norm(xm, g, b, NormStats::Batch).unwrap();
                    let rn = t.row_norm(bn, g, b).unwrap();
                    let frozen_mean = [0.1, -0.2, 0.05];
                    let frozen_var = [1.1, 0.9, 1.3];
                    let (fz, _) = t
                        .batch_norm(
                            rn,
                            g,
                            b,
                            NormStats::Frozen { mean: &frozen_mean, var: &frozen_var },
                        )
                        .unwrap();
                    let act = t.tanh(fz).unwrap();
                    let sq = t.square(act).unwrap();
                    t.mean(sq).unwrap()
                },
                &[("x", x), ("gain", gain), ("bias", bias)],
                2e-4,
            );
        }
    }
}
