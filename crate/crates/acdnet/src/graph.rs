//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Operations execute eagerly; each records its inputs and keeps its forward
//! value so the backward sweep can replay the tape in reverse. Node order is
//! creation order, which is a topological order by construction, so a single
//! reverse pass visits every node exactly once. Everything is single-threaded
//! and deterministic: running forward or backward twice on the same inputs
//! produces bit-identical results.

use crate::conv;
use crate::error::{Error, Result};
use crate::loss::{self, ValidMask};
use crate::ops::{self, SeamMode};
use crate::pad::{self, PadSpec};
use crate::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: (usize, usize),
        dilation: (usize, usize),
    },
    Pad {
        input: TensorId,
        spec: PadSpec,
    },
    Relu {
        input: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    RowMean {
        input: TensorId,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    },
    SoftmaxGroups {
        input: TensorId,
        groups: usize,
    },
    MulBroadcast {
        lhs: TensorId,
        rhs: TensorId,
    },
    Upsample2x {
        input: TensorId,
        seam: SeamMode,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    SliceChannels {
        input: TensorId,
        start: usize,
        len: usize,
    },
    Reshape {
        input: TensorId,
    },
    SumAll {
        input: TensorId,
    },
    Berhu {
        pred: TensorId,
        gt: Tensor,
        mask: ValidMask,
        c: Vec<f64>,
        valid: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// The recorded computation of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor as a graph input. Gradients flow to it iff the tensor
    /// was marked with `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad();
        self.push(Op::Leaf, tensor, needs)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(Op::Leaf, tensor, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Dilated convolution; the input must already be padded.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<TensorId> {
        let value = conv::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b).data()),
            stride,
            dilation,
        )?;
        let needs = self.needs(input)
            || self.needs(kernel)
            || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(Op::Conv2d { input, kernel, bias, stride, dilation }, value, needs))
    }

    pub fn pad(&mut self, input: TensorId, spec: PadSpec) -> Result<TensorId> {
        let value = pad::pad(self.value(input), &spec)?;
        let needs = self.needs(input);
        Ok(self.push(Op::Pad { input, spec }, value, needs))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let value = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(Op::Relu { input }, value, needs)
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{}", a.shape()), format!("{}", b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, value, needs))
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let v = self.value(input);
        let data = v.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, value, needs)
    }

    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let value = ops::global_avg_pool(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(Op::GlobalAvgPool { input }, value, needs))
    }

    pub fn row_mean(&mut self, input: TensorId) -> Result<TensorId> {
        let value = ops::row_mean(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(Op::RowMean { input }, value, needs))
    }

    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let value = ops::linear(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b).data()),
        )?;
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(Op::Linear { input, weight, bias }, value, needs))
    }

    pub fn softmax_groups(&mut self, input: TensorId, groups: usize) -> Result<TensorId> {
        let value = ops::softmax_groups(self.value(input), groups)?;
        let needs = self.needs(input);
        Ok(self.push(Op::SoftmaxGroups { input, groups }, value, needs))
    }

    pub fn mul_broadcast(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let value = ops::mul_broadcast(self.value(lhs), self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::MulBroadcast { lhs, rhs }, value, needs))
    }

    pub fn upsample2x(&mut self, input: TensorId, seam: SeamMode) -> TensorId {
        let value = ops::bilinear_upsample2x(self.value(input), seam);
        let needs = self.needs(input);
        self.push(Op::Upsample2x { input, seam }, value, needs)
    }

    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_channels needs at least one input"));
        }
        let first = self.shape(inputs[0]);
        let mut channels = 0;
        for &id in inputs {
            let sh = self.shape(id);
            if (sh.batch, sh.height, sh.width) != (first.batch, first.height, first.width) {
                return Err(Error::shape("concat_channels", format!("{first}"), format!("{sh}")));
            }
            channels += sh.channels;
        }
        let osh = Shape::new(first.batch, channels, first.height, first.width);
        let mut data = vec![0.0; osh.numel()];
        let plane = first.height * first.width;
        for b in 0..first.batch {
            let mut c_off = 0;
            for &id in inputs {
                let t = self.value(id);
                let tc = t.shape().channels;
                let src = &t.data()[t.shape().index(b, 0, 0, 0)..t.shape().index(b, 0, 0, 0) + tc * plane];
                let dst_start = osh.index(b, c_off, 0, 0);
                data[dst_start..dst_start + tc * plane].copy_from_slice(src);
                c_off += tc;
            }
        }
        let value = Tensor::from_vec(osh, data)?;
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(Op::ConcatChannels { inputs: inputs.to_vec() }, value, needs))
    }

    pub fn slice_channels(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sh = self.shape(input);
        if start + len > sh.channels || len == 0 {
            return Err(Error::invalid(format!(
                "slice_channels [{start}, {}) out of {} channels",
                start + len,
                sh.channels
            )));
        }
        let osh = Shape::new(sh.batch, len, sh.height, sh.width);
        let plane = sh.height * sh.width;
        let mut data = vec![0.0; osh.numel()];
        let t = self.value(input);
        for b in 0..sh.batch {
            let src_start = sh.index(b, start, 0, 0);
            let dst_start = osh.index(b, 0, 0, 0);
            data[dst_start..dst_start + len * plane]
                .copy_from_slice(&t.data()[src_start..src_start + len * plane]);
        }
        let value = Tensor::from_vec(osh, data)?;
        let needs = self.needs(input);
        Ok(self.push(Op::SliceChannels { input, start, len }, value, needs))
    }

    pub fn reshape(&mut self, input: TensorId, shape: Shape) -> Result<TensorId> {
        let value = self.value(input).reshaped(shape)?;
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, value, needs))
    }

    /// Sum of every element; output shape (1, 1, 1, 1).
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.value(input).data().iter().sum();
        let value = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![s]).expect("scalar");
        let needs = self.needs(input);
        self.push(Op::SumAll { input }, value, needs)
    }

    /// BerHu loss of a prediction node against fixed ground truth; the
    /// per-image threshold is computed here and held constant for backward.
    pub fn berhu_loss(&mut self, pred: TensorId, gt: &Tensor, mask: &ValidMask) -> Result<TensorId> {
        let c = loss::berhu_c(self.value(pred), gt, mask)?;
        let (value, valid) = loss::berhu_loss_with_c(self.value(pred), gt, mask, &c);
        let value = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![value])?;
        let needs = self.needs(pred);
        Ok(self.push(
            Op::Berhu { pred, gt: gt.clone(), mask: mask.clone(), c, valid },
            value,
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per leaf
    /// that was inserted with `requires_grad`.
    pub fn backward(&self, loss_id: TensorId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss_id.0];
        if loss_node.value.shape() != Shape::new(1, 1, 1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_id.0] = Some(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));

        for idx in (0..=loss_id.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            let node = &self.nodes[idx];
            let mut contributions: Vec<(TensorId, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias, stride, dilation } => {
                    if self.needs(*input) {
                        let gi = conv::conv2d_grad_input(
                            &g,
                            self.value(*kernel),
                            self.shape(*input),
                            *stride,
                            *dilation,
                        );
                        contributions.push((*input, gi));
                    }
                    if self.needs(*kernel) {
                        let gk = conv::conv2d_grad_kernel(
                            &g,
                            self.value(*input),
                            self.shape(*kernel),
                            *stride,
                            *dilation,
                        );
                        contributions.push((*kernel, gk));
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            let gb = conv::conv2d_grad_bias(&g);
                            let t = Tensor::from_vec(self.shape(*b), gb)?;
                            contributions.push((*b, t));
                        }
                    }
                }
                Op::Pad { input, spec } => {
                    contributions.push((*input, pad::pad_backward(&g, spec, self.shape(*input))));
                }
                Op::Relu { input } => {
                    contributions.push((*input, ops::relu_backward(&g, self.value(*input))));
                }
                Op::Add { lhs, rhs } => {
                    if self.needs(*lhs) {
                        contributions.push((*lhs, g.clone()));
                    }
                    if self.needs(*rhs) {
                        contributions.push((*rhs, g.clone()));
                    }
                }
                Op::Scale { input, factor } => {
                    let data = g.data().iter().map(|v| v * factor).collect();
                    contributions.push((*input, Tensor::from_vec(g.shape(), data)?));
                }
                Op::GlobalAvgPool { input } => {
                    contributions
                        .push((*input, ops::global_avg_pool_backward(&g, self.shape(*input))));
                }
                Op::RowMean { input } => {
                    contributions.push((*input, ops::row_mean_backward(&g, self.shape(*input))));
                }
                Op::Linear { input, weight, bias } => {
                    let lg = ops::linear_backward(&g, self.value(*input), self.value(*weight));
                    if self.needs(*input) {
                        contributions.push((*input, lg.input));
                    }
                    if self.needs(*weight) {
                        contributions.push((*weight, lg.weight));
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            contributions.push((*b, Tensor::from_vec(self.shape(*b), lg.bias)?));
                        }
                    }
                }
                Op::SoftmaxGroups { input, groups } => {
                    let gi = ops::softmax_groups_backward(&g, &node.value, *groups);
                    contributions.push((*input, gi));
                }
                Op::MulBroadcast { lhs, rhs } => {
                    let (gl, gr) = ops::mul_broadcast_backward(&g, self.value(*lhs), self.value(*rhs));
                    if self.needs(*lhs) {
                        contributions.push((*lhs, gl));
                    }
                    if self.needs(*rhs) {
                        contributions.push((*rhs, gr));
                    }
                }
                Op::Upsample2x { input, seam } => {
                    contributions.push((
                        *input,
                        ops::bilinear_upsample2x_backward(&g, self.shape(*input), *seam),
                    ));
                }
                Op::ConcatChannels { inputs } => {
                    let gsh = g.shape();
                    let plane = gsh.height * gsh.width;
                    let mut c_off = 0;
                    for &id in inputs {
                        let ish = self.shape(id);
                        if self.needs(id) {
                            let mut part = vec![0.0; ish.numel()];
                            for b in 0..ish.batch {
                                let src = gsh.index(b, c_off, 0, 0);
                                let dst = ish.index(b, 0, 0, 0);
                                part[dst..dst + ish.channels * plane].copy_from_slice(
                                    &g.data()[src..src + ish.channels * plane],
                                );
                            }
                            contributions.push((id, Tensor::from_vec(ish, part)?));
                        }
                        c_off += ish.channels;
                    }
                }
                Op::SliceChannels { input, start, len } => {
                    let ish = self.shape(*input);
                    let plane = ish.height * ish.width;
                    let mut part = vec![0.0; ish.numel()];
                    for b in 0..ish.batch {
                        let dst = ish.index(b, *start, 0, 0);
                        let src = g.shape().index(b, 0, 0, 0);
                        part[dst..dst + len * plane]
                            .copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    contributions.push((*input, Tensor::from_vec(ish, part)?));
                }
                Op::Reshape { input } => {
                    contributions.push((*input, g.reshaped(self.shape(*input))?));
                }
                Op::SumAll { input } => {
                    let ish = self.shape(*input);
                    contributions.push((*input, Tensor::full(ish, g.data()[0])));
                }
                Op::Berhu { pred, gt, mask, c, valid } => {
                    let gp = loss::berhu_grad(self.value(*pred), gt, mask, c, *valid, g.data()[0]);
                    contributions.push((*pred, gp));
                }
            }
            for (id, contribution) in contributions {
                accumulate(&mut grads[id.0], contribution);
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            let data = existing.data_mut();
            for (d, s) in data.iter_mut().zip(contribution.data()) {
                *d += s;
            }
        }
    }
}

/// Gradients keyed by node id; present for every tracked leaf reached by the
/// backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Named leaf ids recorded while binding model parameters into a graph.
/// Binding order matches the model's parameter enumeration order, so the
/// optimizer can zip the two.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(String, TensorId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { entries: Vec::new() }
    }

    pub fn bind(&mut self, graph: &mut Graph, name: String, tensor: &Tensor) -> TensorId {
        let id = graph.leaf(tensor.clone());
        self.entries.push((name, id));
        id
    }

    pub fn entries(&self) -> &[(String, TensorId)] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng).with_grad();
        let xid = g.leaf(x);
        let loss = g.sum_all(xid);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(xid).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_identity_sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.3, -0.4, 0.5])
            .unwrap()
            .with_grad();
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let w = Tensor::from_vec(Shape::new(3, 3, 1, 1), id).unwrap();
        let xid = g.leaf(x);
        let wid = g.constant(w);
        let y = g.linear(xid, wid, None).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(xid).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2)).with_grad();
        let xid = g.leaf(x);
        assert!(g.backward(xid).is_err());
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::uniform(Shape::new(1, 2, 6, 8), -1.0, 1.0, &mut rng).with_grad();
        let k = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng).with_grad();
        let xid = g.leaf(x);
        let kid = g.leaf(k);
        let padded = g.pad(xid, PadSpec::uniform(1, 2, crate::pad::PadMode::Circular)).unwrap();
        let y = g.conv2d(padded, kid, None, (1, 1), (1, 2)).unwrap();
        let r = g.relu(y);
        let loss = g.sum_all(r);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1.get(xid).unwrap().data(), g2.get(xid).unwrap().data());
        assert_eq!(g1.get(kid).unwrap().data(), g2.get(kid).unwrap().data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 2.0).with_grad();
        let y = Tensor::full(Shape::new(1, 1, 2, 2), 3.0);
        let xid = g.leaf(x);
        let yid = g.constant(y);
        let s = g.add(xid, yid).unwrap();
        let loss = g.sum_all(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(xid).is_some());
        assert!(grads.get(yid).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::new();
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.5).with_grad();
        let xid = g.leaf(x);
        let y = g.add(xid, xid).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xid).unwrap().data(), &[2.0]);
    }

    /// Central finite differences through a composite graph touching most ops.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let run = |params: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(params[0].clone());
            let k = g.leaf(params[1].clone());
            let w = g.leaf(params[2].clone());
            let b = g.leaf(params[3].clone());
            let padded = g.pad(x, PadSpec::uniform(1, 1, crate::pad::PadMode::Circular)).unwrap();
            let conv = g.conv2d(padded, k, None, (1, 1), (1, 1)).unwrap();
            let act = g.relu(conv);
            let pooled = g.global_avg_pool(act).unwrap();
            let logits = g.linear(pooled, w, Some(b)).unwrap();
            let soft = g.softmax_groups(logits, 2).unwrap();
            let weighted = g.mul_broadcast(act, soft).unwrap();
            let up = g.upsample2x(weighted, SeamMode::Wrap);
            let loss = g.sum_all(up);
            g.value(loss).data()[0]
        };
        let grads_of = |params: &[Tensor]| -> Vec<Tensor> {
            let mut g = Graph::new();
            let ids: Vec<TensorId> = params.iter().map(|p| g.leaf(p.clone())).collect();
            let padded = g.pad(ids[0], PadSpec::uniform(1, 1, crate::pad::PadMode::Circular)).unwrap();
            let conv = g.conv2d(padded, ids[1], None, (1, 1), (1, 1)).unwrap();
            let act = g.relu(conv);
            let pooled = g.global_avg_pool(act).unwrap();
            let logits = g.linear(pooled, ids[2], Some(ids[3])).unwrap();
            let soft = g.softmax_groups(logits, 2).unwrap();
            let weighted = g.mul_broadcast(act, soft).unwrap();
            let up = g.upsample2x(weighted, SeamMode::Wrap);
            let loss = g.sum_all(up);
            let grads = g.backward(loss).unwrap();
            ids.iter().map(|&id| grads.get(id).unwrap().clone()).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = vec![
            Tensor::uniform(Shape::new(1, 2, 4, 6), 0.1, 1.0, &mut rng).with_grad(),
            Tensor::uniform(Shape::new(4, 2, 3, 3), -0.6, 0.6, &mut rng).with_grad(),
            Tensor::uniform(Shape::new(4, 4, 1, 1), -0.6, 0.6, &mut rng).with_grad(),
            Tensor::uniform(Shape::new(1, 4, 1, 1), -0.2, 0.2, &mut rng).with_grad(),
        ];
        let analytic = grads_of(&params);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let idxs: Vec<usize> = (0..p.numel()).step_by((p.numel() / 6).max(1)).collect();
            for idx in idxs {
                let mut plus = params.clone();
                let mut t = p.clone();
                t.data_mut()[idx] += h;
                plus[pi] = t;
                let mut minus = params.clone();
                let mut t = p.clone();
                t.data_mut()[idx] -= h;
                minus[pi] = t;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let a = analytic[pi].data()[idx];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                    "param {pi} idx {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn berhu_node_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let sh = Shape::new(2, 1, 4, 6);
        let pred = Tensor::uniform(sh, 0.5, 6.0, &mut rng).with_grad();
        let gt = Tensor::uniform(sh, 0.5, 6.0, &mut rng);
        let mask = ValidMask::all_valid(2, 4, 6);
        let mut g = Graph::new();
        let pid = g.leaf(pred.clone());
        let loss = g.berhu_loss(pid, &gt, &mask).unwrap();
        let want = loss::berhu_loss(&pred, &gt, &mask).unwrap();
        assert_eq!(g.value(loss).data()[0], want);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(pid).is_some());
    }
}
