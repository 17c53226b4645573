//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is a dynamic tape rebuilt on every forward pass. Leaves may be
//! bound to shared `Param` handles; `backward` accumulates gradients into
//! those handles so an optimizer can step them between passes.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A named, trainable tensor shared between the model and the tape.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamState>>,
}

pub struct ParamState {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub(crate) moment1: Option<Tensor>,
    pub(crate) moment2: Option<Tensor>,
    pub(crate) step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            inner: Rc::new(RefCell::new(ParamState {
                name: name.into(),
                value,
                grad: None,
                moment1: None,
                moment2: None,
                step: 0,
            })),
        }
    }

    pub fn state(&self) -> Ref<'_, ParamState> {
        self.inner.borrow()
    }

    pub fn state_mut(&self) -> RefMut<'_, ParamState> {
        self.inner.borrow_mut()
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor {
        self.inner.borrow().value.clone()
    }

    pub fn set_value(&self, value: Tensor) {
        self.inner.borrow_mut().value = value;
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut s = self.inner.borrow_mut();
        s.grad = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &Tensor) -> Result<()> {
        let mut s = self.inner.borrow_mut();
        match &mut s.grad {
            Some(acc) => acc.add_into(g),
            slot @ None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf(Option<Param>),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// x: m x n plus column bias b: m x 1 broadcast over columns.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNormCols { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L1(NodeId),
    SliceCols { x: NodeId, keep: Vec<usize> },
    /// Column j of x scaled by scale[j]; scale is 1 x n.
    ScaleCols { x: NodeId, scale: NodeId },
    /// x minus a scalar node, broadcast over all elements.
    BroadcastSub { x: NodeId, scalar: NodeId },
    AddConst(NodeId),
    MulConst(NodeId),
    /// Embedding: column j = token_table.row(tokens[j]) + pos_table.row(j).
    Embed { table: NodeId, pos: NodeId, tokens: Vec<usize> },
    /// Cross-entropy of a logit column vector against a class index.
    CeLoss { logits: NodeId, target: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    /// Constant payload for AddConst / MulConst.
    aux: Option<Tensor>,
}

/// Dynamic computation tape. Build ops forward, then call `backward` once.
pub struct Graph {
    nodes: Vec<Node>,
    /// Forward multiply-add FLOPs (2 per mul-add) spent in matmuls.
    pub matmul_flops: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), matmul_flops: 0 }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, requires_grad, op, aux: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf(None))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Param) -> NodeId {
        let value = p.value();
        self.push(value, true, Op::Leaf(Some(p.clone())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let n = self.value(b).cols();
        self.matmul_flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_into(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let va = self.value(a).data().to_vec();
        let out_data: Vec<f64> =
            va.iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), out_data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let va = self.value(a).data().to_vec();
        let out_data: Vec<f64> =
            va.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), out_data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xt, bt) = (self.value(x), self.value(b));
        if !xt.is_matrix() || !bt.is_matrix() || bt.cols() != 1 || bt.rows() != xt.rows() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", xt.shape(), bt.shape()),
            ));
        }
        let (m, n) = (xt.rows(), xt.cols());
        let mut out = xt.clone();
        for i in 0..m {
            let bv = bt.data()[i];
            for j in 0..n {
                *out.at_mut(i, j) += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, rg, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, k))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    /// Row-wise softmax of a matrix (max-shifted for stability).
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        if !xt.is_matrix() {
            return Err(Error::shape("softmax_rows", format!("{:?}", xt.shape())));
        }
        let (m, n) = (xt.rows(), xt.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row: Vec<f64> = (0..n).map(|j| xt.at(i, j)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("softmax_rows (all logits -inf)".into()));
            }
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                *out.at_mut(i, j) = exps[j] / sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SoftmaxRows(x)))
    }

    /// LayerNorm over the feature (row) dimension of each column, with
    /// per-feature gain/bias vectors of shape m x 1.
    pub fn layer_norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xt, gt, bt) = (self.value(x), self.value(gain), self.value(bias));
        if !xt.is_matrix() || gt.shape() != [xt.rows(), 1] || bt.shape() != [xt.rows(), 1] {
            return Err(Error::shape(
                "layer_norm_cols",
                format!("x {:?}, gain {:?}, bias {:?}", xt.shape(), gt.shape(), bt.shape()),
            ));
        }
        let (m, n) = (xt.rows(), xt.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..m {
                mean += xt.at(i, j);
            }
            mean /= m as f64;
            let mut var = 0.0;
            for i in 0..m {
                let d = xt.at(i, j) - mean;
                var += d * d;
            }
            var /= m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..m {
                let xhat = (xt.at(i, j) - mean) * inv;
                *out.at_mut(i, j) = gt.data()[i] * xhat + bt.data()[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, rg, Op::LayerNormCols { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, rg, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// L1 norm: sum of absolute values.
    pub fn l1(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::L1(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, keep: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        if !xt.is_matrix() {
            return Err(Error::shape("slice_cols", format!("{:?}", xt.shape())));
        }
        if keep.is_empty() {
            return Err(Error::invalid("slice_cols: empty keep set"));
        }
        let (m, n) = (xt.rows(), xt.cols());
        if let Some(&bad) = keep.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("slice_cols: column {} out of {}", bad, n)));
        }
        let mut out = Tensor::zeros(vec![m, keep.len()]);
        for i in 0..m {
            for (jj, &j) in keep.iter().enumerate() {
                *out.at_mut(i, jj) = xt.at(i, j);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SliceCols { x, keep: keep.to_vec() }))
    }

    pub fn scale_cols(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let (xt, st) = (self.value(x), self.value(scale));
        if !xt.is_matrix() || st.shape() != [1, xt.cols()] {
            return Err(Error::shape(
                "scale_cols",
                format!("x {:?}, scale {:?}", xt.shape(), st.shape()),
            ));
        }
        let (m, n) = (xt.rows(), xt.cols());
        let mut out = xt.clone();
        for i in 0..m {
            for j in 0..n {
                *out.at_mut(i, j) *= st.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(out, rg, Op::ScaleCols { x, scale }))
    }

    /// Subtract a scalar node from every element of x.
    pub fn broadcast_sub(&mut self, x: NodeId, scalar: NodeId) -> Result<NodeId> {
        let s = self.value(scalar).item()?;
        let out = self.value(x).map(|v| v - s);
        let rg = self.rg(x) || self.rg(scalar);
        Ok(self.push(out, rg, Op::BroadcastSub { x, scalar }))
    }

    /// Elementwise add of a non-differentiable constant tensor.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        if !self.value(x).same_shape(c) {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        out.add_into(c)?;
        let rg = self.rg(x);
        let id = self.push(out, rg, Op::AddConst(x));
        self.nodes[id.0].aux = Some(c.clone());
        Ok(id)
    }

    /// Elementwise multiply by a non-differentiable constant tensor.
    pub fn mul_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        if !self.value(x).same_shape(c) {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        let id = self.push(out, rg, Op::MulConst(x));
        self.nodes[id.0].aux = Some(c.clone());
        Ok(id)
    }

    /// Token + positional embedding lookup producing a d x n activation.
    /// `table` is vocab x d, `pos` is n_max x d.
    pub fn embed(&mut self, table: NodeId, pos: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let (tt, pt) = (self.value(table), self.value(pos));
        if !tt.is_matrix() || !pt.is_matrix() || tt.cols() != pt.cols() {
            return Err(Error::shape(
                "embed",
                format!("table {:?}, pos {:?}", tt.shape(), pt.shape()),
            ));
        }
        let d = tt.cols();
        let n = tokens.len();
        if n > pt.rows() {
            return Err(Error::invalid(format!(
                "embed: sequence length {} exceeds positional table {}",
                n,
                pt.rows()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= tt.rows()) {
            return Err(Error::invalid(format!("embed: token id {} out of vocab {}", bad, tt.rows())));
        }
        let mut out = Tensor::zeros(vec![d, n]);
        for (j, &tok) in tokens.iter().enumerate() {
            for i in 0..d {
                *out.at_mut(i, j) = tt.at(tok, i) + pt.at(j, i);
            }
        }
        let rg = self.rg(table) || self.rg(pos);
        Ok(self.push(out, rg, Op::Embed { table, pos, tokens: tokens.to_vec() }))
    }

    /// Cross-entropy loss of a C x 1 logit column against class `target`.
    pub fn ce_loss(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lt = self.value(logits);
        if !lt.is_matrix() || lt.cols() != 1 {
            return Err(Error::shape("ce_loss", format!("logits {:?}", lt.shape())));
        }
        let c = lt.rows();
        if target >= c {
            return Err(Error::invalid(format!("ce_loss: target {} out of {} classes", target, c)));
        }
        let max = lt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lt.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lt.data()[target];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CeLoss { logits, target }))
    }

    fn add_grad(&mut self, id: NodeId, g: &Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(acc) => acc.add_into(g).expect("gradient shape mismatch"),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Reverse pass from a scalar loss. Accumulates into every reachable
    /// requires-grad leaf; leaves bound to `Param`s also receive their
    /// gradient in the shared handle.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        // Deliver leaf grads to their parameter handles.
        for idx in 0..self.nodes.len() {
            if let Op::Leaf(Some(param)) = &self.nodes[idx].op {
                let param = param.clone();
                if let Some(g) = &self.nodes[idx].grad {
                    param.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Ops are matched by value to appease the borrow checker; payloads are cheap ids.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf(None));
        match &op {
            Op::Leaf(_) => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let bt = self.value(b).transpose()?;
                    let ga = g.matmul(&bt)?;
                    self.add_grad(a, &ga);
                }
                if self.rg(b) {
                    let at = self.value(a).transpose()?;
                    let gb = at.matmul(g)?;
                    self.add_grad(b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g);
                let neg = g.map(|v| -v);
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(b).data()) {
                        *x *= y;
                    }
                    self.add_grad(a, &ga);
                }
                if self.rg(b) {
                    let mut gb = g.clone();
                    for (x, y) in gb.data_mut().iter_mut().zip(self.value(a).data()) {
                        *x *= y;
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::AddBias(x, b) => {
                let (x, b) = (*x, *b);
                self.add_grad(x, g);
                if self.rg(b) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut gb = Tensor::zeros(vec![m, 1]);
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i, j);
                        }
                        gb.data_mut()[i] = s;
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::Scale(x, k) => {
                let gx = g.map(|v| v * k);
                self.add_grad(*x, &gx);
            }
            Op::Transpose(x) => {
                let gx = g.transpose()?;
                self.add_grad(*x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let y = self.nodes[idx].value.clone();
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..n {
                        *gx.at_mut(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::LayerNormCols { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let xt = self.value(x).clone();
                let gt = self.value(gain).clone();
                let (m, n) = (xt.rows(), xt.cols());
                let mut gx = Tensor::zeros(vec![m, n]);
                let mut ggain = Tensor::zeros(vec![m, 1]);
                let mut gbias = Tensor::zeros(vec![m, 1]);
                for j in 0..n {
                    let mut mean = 0.0;
                    for i in 0..m {
                        mean += xt.at(i, j);
                    }
                    mean /= m as f64;
                    let mut var = 0.0;
                    for i in 0..m {
                        let d = xt.at(i, j) - mean;
                        var += d * d;
                    }
                    var /= m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = (0..m).map(|i| (xt.at(i, j) - mean) * inv).collect();
                    let gy: Vec<f64> = (0..m).map(|i| g.at(i, j) * gt.data()[i]).collect();
                    let sum_gy: f64 = gy.iter().sum();
                    let sum_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for i in 0..m {
                        *gx.at_mut(i, j) =
                            inv / m as f64 * (m as f64 * gy[i] - sum_gy - xhat[i] * sum_gy_xhat);
                        ggain.data_mut()[i] += g.at(i, j) * xhat[i];
                        gbias.data_mut()[i] += g.at(i, j);
                    }
                }
                self.add_grad(x, &gx);
                self.add_grad(gain, &ggain);
                self.add_grad(bias, &gbias);
            }
            Op::Gelu(x) => {
                let x = *x;
                let xin = self.value(x).clone();
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(xin.data()) {
                    *gv *= gelu_deriv(*xv);
                }
                self.add_grad(x, &gx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = self.nodes[idx].value.clone();
                let mut gx = g.clone();
                for (gv, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                self.add_grad(x, &gx);
            }
            Op::Sum(x) => {
                let x = *x;
                let gs = g.item()?;
                let gx = Tensor::full(self.value(x).shape().to_vec(), gs);
                self.add_grad(x, &gx);
            }
            Op::Mean(x) => {
                let x = *x;
                let gs = g.item()? / self.value(x).numel() as f64;
                let gx = Tensor::full(self.value(x).shape().to_vec(), gs);
                self.add_grad(x, &gx);
            }
            Op::L1(x) => {
                let x = *x;
                let gs = g.item()?;
                let gx = self.value(x).map(|v| gs * v.signum() * (v != 0.0) as u8 as f64);
                self.add_grad(x, &gx);
            }
            Op::SliceCols { x, keep } => {
                let x = *x;
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut gx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for (jj, &j) in keep.iter().enumerate() {
                        *gx.at_mut(i, j) += g.at(i, jj);
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::ScaleCols { x, scale } => {
                let (x, scale) = (*x, *scale);
                let xt = self.value(x).clone();
                let st = self.value(scale).clone();
                let (m, n) = (xt.rows(), xt.cols());
                if self.rg(x) {
                    let mut gx = g.clone();
                    for i in 0..m {
                        for j in 0..n {
                            *gx.at_mut(i, j) *= st.data()[j];
                        }
                    }
                    self.add_grad(x, &gx);
                }
                if self.rg(scale) {
                    let mut gs = Tensor::zeros(vec![1, n]);
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += g.at(i, j) * xt.at(i, j);
                        }
                        gs.data_mut()[j] = s;
                    }
                    self.add_grad(scale, &gs);
                }
            }
            Op::BroadcastSub { x, scalar } => {
                let (x, scalar) = (*x, *scalar);
                self.add_grad(x, g);
                if self.rg(scalar) {
                    let s: f64 = g.data().iter().sum();
                    let gs = Tensor::full(self.value(scalar).shape().to_vec(), -s);
                    self.add_grad(scalar, &gs);
                }
            }
            Op::AddConst(x) => {
                self.add_grad(*x, g);
            }
            Op::MulConst(x) => {
                let x = *x;
                let c = self.nodes[idx].aux.clone().expect("mul_const payload");
                let mut gx = g.clone();
                for (gv, cv) in gx.data_mut().iter_mut().zip(c.data()) {
                    *gv *= cv;
                }
                self.add_grad(x, &gx);
            }
            Op::Embed { table, pos, tokens } => {
                let (table, pos) = (*table, *pos);
                let d = g.rows();
                if self.rg(table) {
                    let vocab = self.value(table).rows();
                    let mut gt = Tensor::zeros(vec![vocab, d]);
                    for (j, &tok) in tokens.iter().enumerate() {
                        for i in 0..d {
                            *gt.at_mut(tok, i) += g.at(i, j);
                        }
                    }
                    self.add_grad(table, &gt);
                }
                if self.rg(pos) {
                    let n_max = self.value(pos).rows();
                    let mut gp = Tensor::zeros(vec![n_max, d]);
                    for j in 0..tokens.len() {
                        for i in 0..d {
                            *gp.at_mut(j, i) += g.at(i, j);
                        }
                    }
                    self.add_grad(pos, &gp);
                }
            }
            Op::CeLoss { logits, target } => {
                let (logits, target) = (*logits, *target);
                let lt = self.value(logits).clone();
                let gs = g.item()?;
                let max = lt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = lt.data().iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut gl = Tensor::zeros(vec![lt.rows(), 1]);
                for i in 0..lt.rows() {
                    let p = exps[i] / sum;
                    gl.data_mut()[i] = gs * (p - (i == target) as u8 as f64);
                }
                self.add_grad(logits, &gl);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// Max relative error between the analytic gradient of `build`'s scalar
/// output at `at` and central finite differences with step `eps`.
pub fn grad_check<F>(build: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let mut graph = Graph::new();
    let leaf = graph.leaf(at.clone(), true);
    let loss = build(&mut graph, leaf)?;
    if !graph.value(loss).is_scalar() {
        return Err(Error::invalid("grad_check: build must produce a scalar"));
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(at.shape().to_vec()));

    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(point.clone(), false);
        let out = build(&mut g, leaf)?;
        g.value(out).item()
    };

    let mut max_err = 0.0f64;
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += eps;
        let mut minus = at.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite("grad_check".into()));
        }
        let err = (a - numeric).abs() / 1.0f64.max(a.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        // Beta/eps defaults follow the RoBERTa optimizer setting.
        Adam { lr, betas: (0.9, 0.98), eps: 1e-6, weight_decay: 0.01 }
    }

    pub fn step(&self, params: &[Param]) -> Result<()> {
        for p in params {
            let mut s = p.state_mut();
            let grad = match s.grad.clone() {
                Some(g) => g,
                None => return Err(Error::MissingGrad(s.name.clone())),
            };
            if s.moment1.is_none() {
                s.moment1 = Some(Tensor::zeros(s.value.shape().to_vec()));
                s.moment2 = Some(Tensor::zeros(s.value.shape().to_vec()));
            }
            s.step += 1;
            let t = s.step as i32;
            let (b1, b2) = self.betas;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let mut m = s.moment1.take().unwrap();
            let mut v = s.moment2.take().unwrap();
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                m.data_mut()[i] = b1 * m.data()[i] + (1.0 - b1) * g;
                v.data_mut()[i] = b2 * v.data()[i] + (1.0 - b2) * g * g;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                let p_old = s.value.data()[i];
                s.value.data_mut()[i] =
                    p_old - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p_old);
            }
            s.moment1 = Some(m);
            s.moment2 = Some(v);
        }
        Ok(())
    }
}
