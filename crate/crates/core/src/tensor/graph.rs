//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are stored in creation order, which is a topological order, so both
//! re-evaluation and the backward sweep are single linear passes. Layer taps
//! mark intermediate nodes whose activation and gradient are read back after
//! `backward`.

use super::kernels::{self, ResizeMode};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Conv2d { stride: usize, padding: usize },
    AddBias,
    Relu,
    MaxPool2 { argmax: Vec<usize> },
    Resize { mode: ResizeMode },
    Concat,
    Reshape,
    Linear,
    Softmax,
    CrossEntropyLogits { label: usize },
    Select { index: usize },
    WeightedSum { weights: Tensor },
    Sum,
    SelectMax { key: usize, chosen: usize },
    DiceLoss { target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Resize { .. } => "resize",
            Op::Concat => "concat",
            Op::Reshape => "reshape",
            Op::Linear => "linear",
            Op::Softmax => "softmax",
            Op::CrossEntropyLogits { .. } => "cross_entropy",
            Op::Select { .. } => "select",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum => "sum",
            Op::SelectMax { .. } => "select_max",
            Op::DiceLoss { .. } => "dice_loss",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Activation of one tapped layer together with `∂output/∂activation`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub layer: usize,
    pub activation: Tensor,
    pub activation_gradient: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose ±step perturbation changed a ReLU sign or a max selection.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    taps: Vec<(usize, NodeId)>,
    differentiated: bool,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn dice_terms(pred: &[f64], target: &[f64], classes: usize) -> Vec<(f64, f64)> {
    let mut terms = vec![(0.0, 0.0); classes];
    for (p, g) in pred.chunks(classes).zip(target.chunks(classes)) {
        for c in 0..classes {
            terms[c].0 += p[c] * g[c];
            terms[c].1 += p[c] * p[c] + g[c] * g[c];
        }
    }
    terms
}

/// Evaluates `op` on its inputs, refreshing any routing state it caches.
fn evaluate(op: &mut Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Conv2d { stride, padding } => kernels::conv2d(inputs[0], inputs[1], *stride, *padding)?,
        Op::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let c = *x.shape().last().ok_or_else(|| shape_err("add_bias on scalar"))?;
            if b.len() != c {
                return Err(shape_err(format!("bias of {} for {c} channels", b.len())));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            out
        }
        Op::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::MaxPool2 { argmax } => {
            let (out, arg) = kernels::max_pool2(inputs[0])?;
            *argmax = arg;
            out
        }
        Op::Resize { .. } => unreachable!("resize carries its target extent in the node value"),
        Op::Concat => {
            let first = inputs[0].shape();
            let lead = &first[..first.len() - 1];
            let mut widths = Vec::with_capacity(inputs.len());
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(shape_err(format!("concat of {first:?} with {s:?}")));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in inputs.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        }
        Op::Reshape => unreachable!("reshape carries its target shape in the node value"),
        Op::Linear => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (n, m) = match *w.shape() {
                [n, m] => (n, m),
                ref s => return Err(shape_err(format!("linear weight must be n×m, got {s:?}"))),
            };
            if x.len() != n || b.len() != m {
                return Err(shape_err(format!(
                    "linear: input {} / bias {} against weight {n}×{m}",
                    x.len(),
                    b.len()
                )));
            }
            let mut y = b.data().to_vec();
            for (i, &xv) in x.data().iter().enumerate() {
                let wrow = &w.data()[i * m..(i + 1) * m];
                for (yv, &wv) in y.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
            Tensor::new(vec![m], y)?
        }
        Op::Softmax => kernels::softmax_last(inputs[0])?,
        Op::CrossEntropyLogits { label } => {
            let z = inputs[0];
            if z.rank() != 1 || *label >= z.len() {
                return Err(shape_err(format!("cross entropy label {label} on {:?}", z.shape())));
            }
            let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - z.data()[*label])
        }
        Op::Select { index } => {
            let v = inputs[0]
                .data()
                .get(*index)
                .ok_or_else(|| shape_err(format!("select index {index} out of range")))?;
            Tensor::scalar(*v)
        }
        Op::WeightedSum { weights } => {
            if weights.shape() != inputs[0].shape() {
                return Err(shape_err("weighted_sum weight shape"));
            }
            Tensor::scalar(inputs[0].data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        }
        Op::Sum => Tensor::scalar(inputs[0].sum()),
        Op::SelectMax { key, chosen } => {
            let shape = inputs[0].shape();
            if inputs.iter().any(|t| t.shape() != shape) || *key >= inputs[0].len() {
                return Err(shape_err("select_max over mismatched candidates"));
            }
            // lowest index wins ties
            let mut best = 0;
            for (i, t) in inputs.iter().enumerate().skip(1) {
                if t.data()[*key] > inputs[best].data()[*key] {
                    best = i;
                }
            }
            *chosen = best;
            inputs[best].clone()
        }
        Op::DiceLoss { target } => {
            let pred = inputs[0];
            if pred.shape() != target.shape() {
                return Err(shape_err(format!(
                    "dice loss between {:?} and {:?}",
                    pred.shape(),
                    target.shape()
                )));
            }
            let classes = *pred.shape().last().ok_or_else(|| shape_err("dice on scalar"))?;
            let terms = dice_terms(pred.data(), target.data(), classes);
            let total: f64 = terms
                .iter()
                .map(|&(a, b)| if b == 0.0 { 0.0 } else { 1.0 - 2.0 * a / b })
                .sum();
            Tensor::scalar(total / classes as f64)
        }
    };
    Ok(out)
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

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.differentiated = false;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn apply(&mut self, mut op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = {
            let refs: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            evaluate(&mut op, &refs)?
        };
        self.push(op, inputs, value)
    }

    /// A constant input; gradients are not tracked unless it is tapped.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { requires_grad: false }, Vec::new(), value)
    }

    /// A leaf whose gradient is recorded by `backward`.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { requires_grad: true }, Vec::new(), value)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, padding }, vec![x, kernel])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddBias, vec![x, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, vec![x])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MaxPool2 { argmax: Vec::new() }, vec![x])
    }

    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<NodeId> {
        let value = kernels::resize(&self.nodes[x.0].value, out_h, out_w, mode)?;
        self.push(Op::Resize { mode }, vec![x], value)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        self.apply(Op::Concat, parts.to_vec())
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// `y = xᵀW + b` with `x` flattened; `W` is `n×m`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::Linear, vec![x, weight, bias])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, vec![x])
    }

    /// `−log softmax(z)[label]` evaluated directly on logits.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.apply(Op::CrossEntropyLogits { label }, vec![logits])
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.apply(Op::Select { index }, vec![x])
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        self.apply(Op::WeightedSum { weights }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, vec![x])
    }

    /// Forwards the candidate whose entry `key` is largest (lowest index on ties).
    /// The gradient is routed to that candidate only.
    pub fn select_max(&mut self, candidates: &[NodeId], key: usize) -> Result<NodeId> {
        if candidates.is_empty() {
            return Err(shape_err("select_max over no candidates"));
        }
        self.apply(Op::SelectMax { key, chosen: 0 }, candidates.to_vec())
    }

    /// Mean over classes (last axis) of `1 − 2Σpg / (Σp² + Σg²)`; a class with
    /// zero denominator contributes 0.
    pub fn dice_loss(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        self.apply(Op::DiceLoss { target }, vec![pred])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Index chosen by a `select_max` node during the latest evaluation.
    pub fn selected_index(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id.0].op {
            Op::SelectMax { chosen, .. } => Some(chosen),
            _ => None,
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Replaces a leaf's value. Call [`Graph::recompute`] to refresh downstream nodes.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::Graph("only leaves can be reassigned".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err("set_value shape change"));
        }
        node.value = value;
        self.differentiated = false;
        Ok(())
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            node.grad = None;
            let value = match &node.op {
                Op::Leaf { .. } => continue,
                Op::Resize { mode } => {
                    let s = node.value.shape();
                    kernels::resize(&done[node.inputs[0].0].value, s[0], s[1], *mode)?
                }
                Op::Reshape => done[node.inputs[0].0].value.reshape(node.value.shape())?,
                _ => {
                    let refs: Vec<&Tensor> = node.inputs.iter().map(|&j| &done[j.0].value).collect();
                    evaluate(&mut node.op, &refs)?
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(node.op.name()));
            }
            node.value = value;
        }
        self.differentiated = false;
        Ok(())
    }

    pub fn register_tap(&mut self, layer: usize, node: NodeId) -> Result<()> {
        if self.taps.iter().any(|&(l, _)| l == layer) {
            return Err(Error::Graph(format!("layer {layer} tapped twice")));
        }
        if node.0 >= self.nodes.len() {
            return Err(Error::Graph("tap on unknown node".into()));
        }
        self.taps.push((layer, node));
        Ok(())
    }

    pub fn tapped_layers(&self) -> Vec<usize> {
        self.taps.iter().map(|&(l, _)| l).collect()
    }

    pub fn tap(&self, layer: usize) -> Result<LayerTap> {
        if !self.differentiated {
            return Err(Error::Graph("taps are read after backward".into()));
        }
        let &(_, node) = self
            .taps
            .iter()
            .find(|&&(l, _)| l == layer)
            .ok_or_else(|| Error::Graph(format!("layer {layer} is not tapped")))?;
        let n = &self.nodes[node.0];
        Ok(LayerTap {
            layer,
            activation: n.value.clone(),
            activation_gradient: n.grad.clone().expect("tapped nodes receive gradients"),
        })
    }

    pub fn taps(&self) -> Result<Vec<LayerTap>> {
        self.taps.iter().map(|&(l, _)| self.tap(l)).collect()
    }

    /// Populates gradients of `output` (a one-element tensor) with respect to
    /// every trainable leaf, every tapped node, and everything between.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; self.nodes.len()];
        for &(_, t) in &self.taps {
            needs[t.0] = true;
        }
        for i in 0..n {
            let node = &self.nodes[i];
            needs[i] |= match node.op {
                Op::Leaf { requires_grad } => requires_grad,
                _ => node.inputs.iter().any(|j| needs[j.0]),
            };
        }
        for node in &mut self.nodes {
            node.grad = None;
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            let contribs = self.input_grads(node, &g, &needs)?;
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &c)?,
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if needs.get(i).copied().unwrap_or(false) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for &(_, t) in &self.taps {
            let node = &mut self.nodes[t.0];
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.differentiated = true;
        Ok(())
    }

    fn input_grads(&self, node: &Node, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let want = |k: usize| needs[node.inputs[k].0];
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::Conv2d { stride, padding } => {
                let (gx, gw) = kernels::conv2d_backward(val(0), val(1), g, *stride, *padding, want(0), want(1))?;
                vec![gx, gw]
            }
            Op::AddBias => {
                let c = val(1).len();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (b, v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(val(1).shape().to_vec(), gb)?)]
            }
            Op::Relu => {
                let x = val(0);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![Some(gx)]
            }
            Op::MaxPool2 { argmax } => {
                let mut gx = Tensor::zeros(val(0).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                vec![Some(gx)]
            }
            Op::Resize { mode } => vec![Some(kernels::resize_backward(val(0).shape(), g, *mode)?)],
            Op::Concat => {
                let rows = g.len() / g.shape().last().copied().unwrap_or(1);
                let total = *g.shape().last().unwrap();
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let t = val(k);
                    let w = *t.shape().last().unwrap();
                    let mut data = Vec::with_capacity(t.len());
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    parts.push(Some(Tensor::new(t.shape().to_vec(), data)?));
                }
                parts
            }
            Op::Reshape => vec![Some(g.reshape(val(0).shape())?)],
            Op::Linear => {
                let (x, w) = (val(0), val(1));
                let m = w.shape()[1];
                let gy = g.data();
                let gx = want(0).then(|| {
                    let data = (0..x.len())
                        .map(|i| w.data()[i * m..(i + 1) * m].iter().zip(gy).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)
                });
                let gw = want(1).then(|| {
                    let mut data = Vec::with_capacity(w.len());
                    for &xv in x.data() {
                        data.extend(gy.iter().map(|gv| xv * gv));
                    }
                    Tensor::new(w.shape().to_vec(), data)
                });
                vec![gx.transpose()?, gw.transpose()?, Some(g.clone())]
            }
            Op::Softmax => vec![Some(kernels::softmax_last_backward(&node.value, g))],
            Op::CrossEntropyLogits { label } => {
                let z = val(0);
                let p = kernels::softmax_last(z)?;
                let scale = g.data()[0];
                let rest: f64 = p.data().iter().enumerate().filter(|&(i, _)| i != *label).map(|(_, v)| v).sum();
                let data = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &pv)| scale * if i == *label { -rest } else { pv })
                    .collect();
                vec![Some(Tensor::new(z.shape().to_vec(), data)?)]
            }
            Op::Select { index } => {
                let mut gx = Tensor::zeros(val(0).shape());
                gx.data_mut()[*index] = g.data()[0];
                vec![Some(gx)]
            }
            Op::WeightedSum { weights } => vec![Some(weights.map(|w| w * g.data()[0]))],
            Op::Sum => vec![Some(Tensor::full(val(0).shape(), g.data()[0]))],
            Op::SelectMax { chosen, .. } => (0..node.inputs.len())
                .map(|k| (k == *chosen).then(|| g.clone()))
                .collect(),
            Op::DiceLoss { target } => {
                let pred = val(0);
                let classes = *pred.shape().last().unwrap();
                let terms = dice_terms(pred.data(), target.data(), classes);
                let scale = g.data()[0] / classes as f64;
                let mut gp = vec![0.0; pred.len()];
                for ((gpr, pr), gr) in gp
                    .chunks_mut(classes)
                    .zip(pred.data().chunks(classes))
                    .zip(target.data().chunks(classes))
                {
                    for c in 0..classes {
                        let (a, b) = terms[c];
                        if b > 0.0 {
                            gpr[c] = scale * (4.0 * a * pr[c] - 2.0 * gr[c] * b) / (b * b);
                        }
                    }
                }
                vec![Some(Tensor::new(pred.shape().to_vec(), gp)?)]
            }
        };
        for t in out.iter().flatten() {
            if !t.is_finite() {
                return Err(Error::NonFinite(node.op.name()));
            }
        }
        Ok(out)
    }

    /// Discrete routing state: ReLU input signs, pooling winners, max selections.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    sig.extend(x.data().iter().map(|&v| usize::from(v > 0.0)));
                }
                Op::MaxPool2 { argmax } => sig.extend_from_slice(argmax),
                Op::SelectMax { chosen, .. } => sig.push(*chosen),
                _ => {}
            }
        }
        sig
    }

    /// Compares the analytic gradient of `output` w.r.t. leaf `wrt` against central
    /// differences `(f(x+h) − f(x−h)) / 2h`, entry by entry. Entries whose
    /// perturbation crosses a non-differentiable point are skipped.
    pub fn finite_difference_check(&mut self, output: NodeId, wrt: NodeId, step: f64) -> Result<FdReport> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!("finite-difference step {step} must be > 0")));
        }
        if !matches!(self.nodes[wrt.0].op, Op::Leaf { .. }) {
            return Err(Error::Graph("finite differences perturb leaves only".into()));
        }
        let original = self.nodes[wrt.0].value.clone();
        let restore_requires = match self.nodes[wrt.0].op {
            Op::Leaf { requires_grad } => requires_grad,
            _ => unreachable!(),
        };
        self.nodes[wrt.0].op = Op::Leaf { requires_grad: true };
        self.backward(output)?;
        let analytic = self.nodes[wrt.0].grad.clone().expect("leaf marked trainable");
        let base = self.kink_signature();

        let mut report = FdReport {
            max_relative_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        let eval_at = |graph: &mut Self, i: usize, delta: f64| -> Result<(f64, bool)> {
            let mut v = original.clone();
            v.data_mut()[i] += delta;
            graph.set_value(wrt, v)?;
            graph.recompute()?;
            Ok((graph.nodes[output.0].value.data()[0], graph.kink_signature() == base))
        };
        for i in 0..original.len() {
            let (fp, same_p) = eval_at(self, i, step)?;
            let (fm, same_m) = eval_at(self, i, -step)?;
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (a.abs() + 1e-12);
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
        self.set_value(wrt, original)?;
        self.recompute()?;
        self.nodes[wrt.0].op = Op::Leaf {
            requires_grad: restore_requires,
        };
        self.backward(output)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_functional_tap_gradient_is_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(random(&[3, 3, 2], &mut rng)).unwrap();
        let w = random(&[3, 3, 2], &mut rng);
        g.register_tap(1, x).unwrap();
        let out = g.weighted_sum(x, w.clone()).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.tap(1).unwrap().activation_gradient, w);
    }

    #[test]
    fn constant_output_gives_zero_tap_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 2, 1], 3.0)).unwrap();
        let c = g.param(Tensor::scalar(1.0)).unwrap();
        g.register_tap(4, x).unwrap();
        let out = g.sum(c).unwrap();
        g.backward(out).unwrap();
        let tap = g.tap(4).unwrap();
        assert!(tap.activation_gradient.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_taps_need_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        g.register_tap(0, x).unwrap();
        assert!(g.tap(0).is_err());
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        assert!(g.register_tap(0, x).is_err());
    }

    #[test]
    fn fd_rejects_bad_step_and_is_exact_for_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.param(random(&[6], &mut rng)).unwrap();
        let w = g.param(random(&[6, 3], &mut rng)).unwrap();
        let b = g.param(random(&[3], &mut rng)).unwrap();
        let y = g.linear(x, w, b).unwrap();
        let out = g.weighted_sum(y, random(&[3], &mut rng)).unwrap();
        assert!(g.finite_difference_check(out, x, 0.0).is_err());
        assert!(g.finite_difference_check(out, x, -1.0).is_err());
        for leaf in [x, w, b] {
            let r = g.finite_difference_check(out, leaf, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn conv_relu_fc_stack_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let x = g.param(random(&[6, 6, 2], &mut rng)).unwrap();
        let k = g.param(random(&[3, 3, 2, 3], &mut rng)).unwrap();
        let kb = g.param(random(&[3], &mut rng)).unwrap();
        let h = g.conv2d(x, k, 1, 1).unwrap();
        let h = g.add_bias(h, kb).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.max_pool2(h).unwrap();
        let w = g.param(random(&[27, 2], &mut rng)).unwrap();
        let b = g.param(random(&[2], &mut rng)).unwrap();
        let z = g.linear(h, w, b).unwrap();
        let out = g.cross_entropy_logits(z, 1).unwrap();
        for leaf in [x, k, kb, w, b] {
            let r = g.finite_difference_check(out, leaf, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn resize_concat_dice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
            let mut g = Graph::new();
            let a = g.param(random(&[2, 2, 1], &mut rng)).unwrap();
            let b = g.param(random(&[4, 4, 1], &mut rng)).unwrap();
            let up = g.resize(a, 4, 4, mode).unwrap();
            let cat = g.concat(&[up, b]).unwrap();
            let p = g.softmax(cat).unwrap();
            let mut target = Tensor::zeros(&[4, 4, 2]);
            for i in 0..16 {
                target.data_mut()[2 * i + usize::from(rng.random_bool(0.3))] = 1.0;
            }
            let out = g.dice_loss(p, target).unwrap();
            for leaf in [a, b] {
                let r = g.finite_difference_check(out, leaf, 1e-5).unwrap();
                assert!(r.max_relative_error < 1e-4, "{mode:?} {r:?}");
            }
        }
    }

    #[test]
    fn select_max_routes_gradient_to_winner_only() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![0.1, 0.3]).unwrap()).unwrap();
        let b = g.param(Tensor::from_vec(vec![0.2, 0.9]).unwrap()).unwrap();
        let c = g.param(Tensor::from_vec(vec![0.0, 0.9]).unwrap()).unwrap();
        let m = g.select_max(&[a, b, c], 1).unwrap();
        assert_eq!(g.selected_index(m), Some(1));
        let out = g.cross_entropy_logits(m, 0).unwrap();
        g.backward(out).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(c).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn recompute_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.input(random(&[5, 5, 1], &mut rng)).unwrap();
        let k = g.param(random(&[3, 3, 1, 2], &mut rng)).unwrap();
        let h = g.conv2d(x, k, 2, 1).unwrap();
        let s = g.sum(h).unwrap();
        let before = g.value(s).clone();
        g.recompute().unwrap();
        assert_eq!(g.value(s), &before);
    }
}
