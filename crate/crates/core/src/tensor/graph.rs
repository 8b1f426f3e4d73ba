//! Reverse-mode differentiation graph.
//!
//! A [`Graph`] is an append-only tape of operation records. Node ids grow
//! monotonically and every op only references earlier ids, so the graph is
//! acyclic by construction and [`Graph::backward`] is a single reverse sweep
//! that visits each node exactly once.

use super::conv::{self, Conv2dDims};
use super::stats;
use super::{Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dims: Conv2dDims,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Per-channel normalization with affine transform over [B, D, H, W].
    /// `batch_stats` distinguishes statistics computed from the input (their
    /// dependence on x enters the backward pass) from fixed running statistics.
    ChannelNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        batch_stats: bool,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Slice {
        input: NodeId,
        start: usize,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    SqDiffSum {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    /// Gradient buffer for a node, if the node participates in differentiation.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Copy a leaf's gradient back into its tensor.
    pub fn write_to(&self, id: NodeId, tensor: &mut Tensor) {
        if let Some(g) = self.get(id) {
            tensor.grad = Some(g.to_vec());
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].value.len()
    }

    /// Extract a node's value as a fresh tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(&self.nodes[id].shape, self.nodes[id].value.clone())
            .expect("node shape/value always consistent")
    }

    /// Batch-statistics saved by a `ChannelNorm` node: (mean, biased var).
    pub fn norm_saved_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].op {
            Op::ChannelNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Register a tensor as a graph leaf. `requires_grad` is taken from the
    /// tensor itself.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = Conv2dDims::resolve(
            self.shape(input),
            self.shape(weight),
            stride,
            padding,
            dilation,
        )?;
        let bias_shape = self.shape(bias);
        if bias_shape != [dims.c_out] {
            return Err(TensorError::AxisMismatch {
                op: "conv2d",
                axis: 0,
                expected: dims.c_out,
                got: bias_shape.first().copied().unwrap_or(0),
            });
        }
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &dims,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            dims.output_shape(),
            value,
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value: Vec<f64> = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(Op::Relu { input }, shape, value, needs)
    }

    pub fn maxpool2d(
        &mut self,
        input: NodeId,
        k: usize,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "maxpool2d";
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                shape,
            });
        }
        if k == 0 || stride == 0 {
            return Err(TensorError::invalid(OP, "kernel and stride must be >= 1"));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let h_out = conv::pool_out_extent(h, k, stride);
        let w_out = conv::pool_out_extent(w, k, stride);
        if h_out < 1 || w_out < 1 {
            return Err(TensorError::EmptyOutput {
                op: OP,
                h: h_out,
                w: w_out,
            });
        }
        let (h_out, w_out) = (h_out as usize, w_out as usize);
        let (value, argmax) =
            conv::maxpool2d_forward(self.value(input), b, c, h, w, k, stride, h_out, w_out);
        let needs = self.needs(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax },
            vec![b, c, h_out, w_out],
            value,
            needs,
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "global_avg_pool";
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                shape,
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = h * w;
        let x = self.value(input);
        let mut value = vec![0.0; b * c];
        for bc in 0..b * c {
            let ch = &x[bc * spatial..][..spatial];
            value[bc] = ch.iter().sum::<f64>() / spatial as f64;
        }
        let needs = self.needs(input);
        Ok(self.push(Op::GlobalAvgPool { input }, vec![b, c], value, needs))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "linear";
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if in_shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 2,
                shape: in_shape,
            });
        }
        if w_shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 2,
                shape: w_shape,
            });
        }
        let (b, f_in) = (in_shape[0], in_shape[1]);
        let (f_out, wf_in) = (w_shape[0], w_shape[1]);
        if wf_in != f_in {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 1,
                expected: f_in,
                got: wf_in,
            });
        }
        if self.shape(bias) != [f_out] {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 0,
                expected: f_out,
                got: self.shape(bias).first().copied().unwrap_or(0),
            });
        }
        let x = self.value(input);
        let w = self.value(weight);
        let bv = self.value(bias);
        let mut value = vec![0.0; b * f_out];
        for bi in 0..b {
            let xrow = &x[bi * f_in..][..f_in];
            for f in 0..f_out {
                let wrow = &w[f * f_in..][..f_in];
                let mut acc = bv[f];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                value[bi * f_out + f] = acc;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            vec![b, f_out],
            value,
            needs,
        ))
    }

    /// Normalize `[B, D, H, W]` per channel with affine parameters `gamma`,
    /// `beta` (both `[D]`). Statistics come from the input itself.
    pub fn channel_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        self.channel_norm_impl(input, gamma, beta, eps, None)
    }

    /// Normalize with fixed (running) statistics instead of batch statistics.
    pub fn channel_norm_fixed(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId, TensorError> {
        self.channel_norm_impl(input, gamma, beta, eps, Some((mean.to_vec(), var.to_vec())))
    }

    fn channel_norm_impl(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        fixed: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "channel_norm";
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                shape,
            });
        }
        if eps < 0.0 {
            return Err(TensorError::invalid(OP, "epsilon must be >= 0"));
        }
        let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for (name, node) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(node);
            if s != [d] {
                return Err(TensorError::invalid(
                    OP,
                    format!("{name} has shape {s:?}, expected [{d}] to match channel axis 1"),
                ));
            }
        }
        if let Some((m, v)) = &fixed {
            if m.len() != d || v.len() != d {
                return Err(TensorError::invalid(
                    OP,
                    "running stats length must equal channel count",
                ));
            }
        }
        let spatial = h * w;
        let batch_stats = fixed.is_none();
        let (mean, var) = match fixed {
            Some(mv) => mv,
            None => stats::channel_stats(self.value(input), b, d, spatial),
        };
        let value = stats::normalize_affine(
            self.value(input),
            b,
            d,
            spatial,
            &mean,
            &var,
            eps,
            self.value(gamma),
            self.value(beta),
        );
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                eps,
                batch_stats,
                mean,
                var,
            },
            shape,
            value,
            needs,
        ))
    }

    /// Contiguous 1-D slice `[start, start+len)` of a flat vector node.
    pub fn slice(
        &mut self,
        input: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "slice";
        let n = self.numel(input);
        if start + len > n {
            return Err(TensorError::invalid(
                OP,
                format!(
                    "range {start}..{} out of bounds for length {n}",
                    start + len
                ),
            ));
        }
        let value = self.value(input)[start..start + len].to_vec();
        let needs = self.needs(input);
        Ok(self.push(Op::Slice { input, start }, vec![len], value, needs))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(input) {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                len: self.numel(input),
                shape: shape.to_vec(),
            });
        }
        let value = self.value(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, shape.to_vec(), value, needs))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::invalid(
                "add",
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, value, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value: Vec<f64> = self.value(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, shape, value, needs)
    }

    /// Sum of all elements, yielding a `[1]` scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = vec![self.value(input).iter().sum()];
        let needs = self.needs(input);
        self.push(Op::Sum { input }, vec![1], value, needs)
    }

    /// `sum((a - b)^2)` as a `[1]` scalar node.
    pub fn sq_diff_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::invalid(
                "sq_diff_sum",
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let v: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::SqDiffSum { a, b }, vec![1], vec![v], needs))
    }

    /// Reverse sweep from a scalar loss node. Every node that requires
    /// gradients receives a buffer (zero when the loss does not depend on it);
    /// nodes are visited in strictly decreasing id order exactly once.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && id <= loss {
                grads.push(Some(vec![0.0; node.value.len()]));
            } else {
                grads.push(None);
            }
        }
        if grads[loss].is_none() {
            // Loss independent of any differentiable leaf: zero buffers stand.
            return Ok(GradMap { grads });
        }
        grads[loss].as_mut().unwrap()[0] = 1.0;
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_into_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradMap { grads })
    }

    fn accumulate_into_inputs(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Helper: true when the input wants gradient flow.
        macro_rules! wants {
            ($n:expr) => {
                grads[$n].is_some()
            };
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                if wants!(*input) {
                    let dx = conv::conv2d_input_grad(g, self.value(*weight), dims);
                    axpy(grads[*input].as_mut().unwrap(), &dx);
                }
                if wants!(*weight) {
                    let dw = conv::conv2d_weight_grad(g, self.value(*input), dims);
                    axpy(grads[*weight].as_mut().unwrap(), &dw);
                }
                if wants!(*bias) {
                    let db = conv::conv2d_bias_grad(g, dims);
                    axpy(grads[*bias].as_mut().unwrap(), &db);
                }
            }
            Op::Relu { input } => {
                if wants!(*input) {
                    let x = self.value(*input);
                    let buf = grads[*input].as_mut().unwrap();
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants!(*input) {
                    let buf = grads[*input].as_mut().unwrap();
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        buf[src] += g[out_idx];
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants!(*input) {
                    let shape = self.shape(*input);
                    let spatial = shape[2] * shape[3];
                    let inv = 1.0 / spatial as f64;
                    let buf = grads[*input].as_mut().unwrap();
                    for (bc, &gv) in g.iter().enumerate() {
                        let contrib = gv * inv;
                        for v in buf[bc * spatial..][..spatial].iter_mut() {
                            *v += contrib;
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let in_shape = self.shape(*input);
                let (b, f_in) = (in_shape[0], in_shape[1]);
                let f_out = self.shape(*weight)[0];
                if wants!(*input) {
                    let w = self.value(*weight);
                    let buf = grads[*input].as_mut().unwrap();
                    for bi in 0..b {
                        for f in 0..f_out {
                            let gv = g[bi * f_out + f];
                            if gv == 0.0 {
                                continue;
                            }
                            let wrow = &w[f * f_in..][..f_in];
                            let xg = &mut buf[bi * f_in..][..f_in];
                            for (xv, wv) in xg.iter_mut().zip(wrow) {
                                *xv += gv * wv;
                            }
                        }
                    }
                }
                if wants!(*weight) {
                    let x = self.value(*input);
                    let buf = grads[*weight].as_mut().unwrap();
                    for bi in 0..b {
                        let xrow = &x[bi * f_in..][..f_in];
                        for f in 0..f_out {
                            let gv = g[bi * f_out + f];
                            if gv == 0.0 {
                                continue;
                            }
                            let wg = &mut buf[f * f_in..][..f_in];
                            for (wv, xv) in wg.iter_mut().zip(xrow) {
                                *wv += gv * xv;
                            }
                        }
                    }
                }
                if wants!(*bias) {
                    let buf = grads[*bias].as_mut().unwrap();
                    for bi in 0..b {
                        for f in 0..f_out {
                            buf[f] += g[bi * f_out + f];
                        }
                    }
                }
            }
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                eps,
                batch_stats,
                mean,
                var,
            } => {
                let shape = self.shape(*input);
                let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let spatial = h * w;
                let n = (b * spatial) as f64;
                let x = self.value(*input);
                let gam = self.value(*gamma);
                // Per-channel reductions of g and g * xhat.
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for bi in 0..b {
                    for ch in 0..d {
                        let inv_std = 1.0 / (var[ch] + eps).sqrt();
                        let m = mean[ch];
                        let off = (bi * d + ch) * spatial;
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for idx in 0..spatial {
                            let gv = g[off + idx];
                            sg += gv;
                            sgx += gv * (x[off + idx] - m) * inv_std;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if wants!(*gamma) {
                    axpy(grads[*gamma].as_mut().unwrap(), &sum_gx);
                }
                if wants!(*beta) {
                    axpy(grads[*beta].as_mut().unwrap(), &sum_g);
                }
                if wants!(*input) {
                    let buf = grads[*input].as_mut().unwrap();
                    for bi in 0..b {
                        for ch in 0..d {
                            let inv_std = 1.0 / (var[ch] + eps).sqrt();
                            let m = mean[ch];
                            let scale = gam[ch] * inv_std;
                            let off = (bi * d + ch) * spatial;
                            if *batch_stats {
                                let mg = sum_g[ch] / n;
                                let mgx = sum_gx[ch] / n;
                                for idx in 0..spatial {
                                    let xhat = (x[off + idx] - m) * inv_std;
                                    buf[off + idx] += scale * (g[off + idx] - mg - xhat * mgx);
                                }
                            } else {
                                for idx in 0..spatial {
                                    buf[off + idx] += scale * g[off + idx];
                                }
                            }
                        }
                    }
                }
            }
            Op::Slice { input, start } => {
                if wants!(*input) {
                    let buf = grads[*input].as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        buf[start + i] += gv;
                    }
                }
            }
            Op::Reshape { input } => {
                if wants!(*input) {
                    axpy(grads[*input].as_mut().unwrap(), g);
                }
            }
            Op::Add { a, b } => {
                if wants!(*a) {
                    axpy(grads[*a].as_mut().unwrap(), g);
                }
                if wants!(*b) {
                    axpy(grads[*b].as_mut().unwrap(), g);
                }
            }
            Op::Scale { input, factor } => {
                if wants!(*input) {
                    let buf = grads[*input].as_mut().unwrap();
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += factor * gv;
                    }
                }
            }
            Op::Sum { input } => {
                if wants!(*input) {
                    let gv = g[0];
                    for bv in grads[*input].as_mut().unwrap().iter_mut() {
                        *bv += gv;
                    }
                }
            }
            Op::SqDiffSum { a, b } => {
                let gv = g[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                if wants!(*a) {
                    let buf = grads[*a].as_mut().unwrap();
                    for i in 0..av.len() {
                        buf[i] += 2.0 * gv * (av[i] - bv[i]);
                    }
                }
                if wants!(*b) {
                    let buf = grads[*b].as_mut().unwrap();
                    for i in 0..av.len() {
                        buf[i] -= 2.0 * gv * (av[i] - bv[i]);
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Global L2 norm over a set of gradient buffers.
pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; otherwise leave them untouched. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: max_norm must be > 0");
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
