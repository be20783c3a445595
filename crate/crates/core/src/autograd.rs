//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are only
//! ever appended, so parents always precede children and the tape is acyclic
//! by construction. [`Graph::backward`] walks it once in reverse.

use crate::error::{shape_err, Error, Result};
use crate::normalize::{self, AlignCache, NormState, StandardizeCache, WaConfig};
use crate::tensor::{self, ConvGeometry, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    /// `sum(x * c)` for a constant `c`.
    Project(NodeId, Tensor),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    /// `x [N, in] * w [out, in]^T`
    Linear(NodeId, NodeId),
    /// Per-channel bias on `(N, C, ...)`.
    ChannelBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        shape: Shape4,
        cache: StandardizeCache,
    },
    /// Batch norm with frozen statistics (eval mode).
    ChannelAffine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        shape: Shape4,
        cache: StandardizeCache,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        shape: Shape4,
        groups: usize,
        cache: StandardizeCache,
    },
    WeightAlign {
        w: NodeId,
        gamma: NodeId,
        cfg: WaConfig,
        cache: AlignCache,
    },
    WeightNorm {
        w: NodeId,
        g: NodeId,
        eps: f64,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Project(..) => "project",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::ChannelBias(..) => "channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::GroupNorm { .. } => "group_norm",
            Op::WeightAlign { .. } => "weight_align",
            Op::WeightNorm { .. } => "weight_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes the loss does not depend on or that were recorded as constants.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// One recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sample_stat_evaluations: u64,
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

    /// How many times an operation computed statistics over activations
    /// (batch norm in train mode, group-norm family).
    pub fn sample_stat_evaluations(&self) -> u64 {
        self.sample_stat_evaluations
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Every recorded node, in recording order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Scalar `sum(x * c)` with a constant weighting tensor `c`.
    pub fn project(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        self.value(a).expect_same_shape(&c)?;
        let v: f64 = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(v), Op::Project(a, c), &[a]))
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Dense layer `x * w^T` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, fin) = self.value(x).dims2()?;
        let (out, fin_w) = self.value(w).dims2()?;
        if fin != fin_w {
            return Err(shape_err!("dense layer expects {fin_w} inputs, got {fin}"));
        }
        let mut v = vec![0.0; n * out];
        tensor::gemm(
            n,
            fin,
            out,
            1.0,
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            0.0,
            &mut v,
            (out, 1),
        );
        let v = Tensor::new(vec![n, out], v)?;
        Ok(self.push(v, Op::Linear(x, w), &[x, w]))
    }

    /// Adds `b[c]` to every element of channel `c` of an `(N, C, ...)` tensor.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.get(1).ok_or_else(|| shape_err!("channel bias on rank-{} tensor", xs.len()))?;
        let bias = self.value(b);
        if bias.len() != c {
            return Err(shape_err!("bias of length {} for {c} channels", bias.len()));
        }
        let plane: usize = xs[2..].iter().product();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let add = bias.data()[i % c];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        Ok(self.push(v, Op::ChannelBias(x, b), &[x, b]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geo = ConvGeometry::new(self.value(x).dims4()?, self.value(w).shape(), stride, padding)?;
        let cols = tensor::im2col(self.value(x).data(), &geo);
        let out = tensor::conv_from_cols(&cols, self.value(w).data(), None, &geo);
        let v = Tensor::new(geo.output_shape(), out)?;
        let keep = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv2d { x, w, geo, cols: keep }, &[x, w]))
    }

    /// Non-overlapping max pooling with window `size`; trailing rows/columns that
    /// do not fill a window are dropped.
    pub fn max_pool(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.value(x).dims4()?;
        if size == 0 || size > s.h || size > s.w {
            return Err(shape_err!("pool window {size} does not fit {}x{}", s.h, s.w));
        }
        let (oh, ow) = (s.h / size, s.w / size);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s.n * s.c {
            let base = plane * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * s.w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * size + ky) * s.w + ox * size + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![s.n, s.c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Averages each channel plane: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).dims4()?;
        let p = s.plane() as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(s.plane())
            .map(|c| c.iter().sum::<f64>() / p)
            .collect();
        let v = Tensor::new(vec![s.n, s.c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `(N, ...) -> (N, rest)`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = *shape.first().ok_or_else(|| shape_err!("flatten of a rank-0 tensor"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Mean softmax cross-entropy, stabilized with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Precondition(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v - lse).exp();
            }
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Batch norm, train mode: standardizes with batch statistics and folds
    /// them into `state`.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, state: &mut NormState) -> Result<NodeId> {
        let shape = normalize::as_nchw(self.value(x).shape())?;
        self.check_affine(gamma, beta, shape.c)?;
        let (mean, var) = normalize::channel_stats(self.value(x).data(), shape);
        self.sample_stat_evaluations += 1;
        state.update(&mean, &var);
        let (y, cache) = normalize::channel_affine_forward(
            self.value(x).data(),
            shape,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            state.eps,
        );
        let v = Tensor::new(self.value(x).shape().to_vec(), y)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                shape,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch norm, eval mode: fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, state: &NormState) -> Result<NodeId> {
        let shape = normalize::as_nchw(self.value(x).shape())?;
        self.check_affine(gamma, beta, shape.c)?;
        let (y, cache) = normalize::channel_affine_forward(
            self.value(x).data(),
            shape,
            &state.running_mean,
            &state.running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            state.eps,
        );
        let v = Tensor::new(self.value(x).shape().to_vec(), y)?;
        Ok(self.push(
            v,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                shape,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let shape = normalize::as_nchw(self.value(x).shape())?;
        self.check_affine(gamma, beta, shape.c)?;
        if groups == 0 || shape.c % groups != 0 {
            return Err(shape_err!("{} channels not divisible into {groups} groups", shape.c));
        }
        self.sample_stat_evaluations += 1;
        let (y, cache) = normalize::group_norm_forward(
            self.value(x).data(),
            shape,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let v = Tensor::new(self.value(x).shape().to_vec(), y)?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                shape,
                groups,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_affine(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!(
                "affine parameters of length ({}, {}) for {c} channels",
                self.value(gamma).len(),
                self.value(beta).len()
            ));
        }
        Ok(())
    }

    fn check_bank(&self, w: NodeId, scale: NodeId) -> Result<usize> {
        let shape = self.value(w).shape();
        if shape.len() < 2 || shape.contains(&0) {
            return Err(shape_err!("filter bank of shape {shape:?}"));
        }
        if self.value(scale).len() != shape[0] {
            return Err(shape_err!(
                "{} per-filter scales for {} filters",
                self.value(scale).len(),
                shape[0]
            ));
        }
        Ok(self.value(w).len() / shape[0])
    }

    /// WeightAlign of every filter of `w` (leading axis = filters), one `gamma` per filter.
    pub fn weight_align(&mut self, w: NodeId, gamma: NodeId, cfg: WaConfig) -> Result<NodeId> {
        let n = self.check_bank(w, gamma)?;
        let (out, cache) = normalize::weight_align_forward(self.value(w).data(), n, self.value(gamma).data(), &cfg);
        let v = Tensor::new(self.value(w).shape().to_vec(), out)?;
        Ok(self.push(v, Op::WeightAlign { w, gamma, cfg, cache }, &[w, gamma]))
    }

    pub fn weight_norm(&mut self, w: NodeId, g: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.check_bank(w, g)?;
        let (out, norms) = normalize::weight_norm_forward(self.value(w).data(), n, self.value(g).data(), eps);
        let v = Tensor::new(self.value(w).shape().to_vec(), out)?;
        Ok(self.push(v, Op::WeightNorm { w, g, eps, norms }, &[w, g]))
    }

    /// Exact reverse-mode gradients of a scalar `loss` with respect to every
    /// recorded node that requires a gradient. Fan-out contributions add up.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |id: NodeId, t: Tensor| -> Result<()> {
            if !self.wants(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(acc) => acc.axpy(1.0, &t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let shaped = |id: NodeId, data: Vec<f64>| Tensor::new(self.value(id).shape().to_vec(), data);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.wants(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::Sum(a) => {
                let v = g.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), v))?;
            }
            Op::Project(a, c) => send(*a, c.scale(g.item()?))?,
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                send(*a, d)?;
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm(m, n, k, 1.0, g.data(), (n, 1), self.value(*b).data(), (1, n), 0.0, &mut da, (k, 1));
                    send(*a, shaped(*a, da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm(k, m, n, 1.0, self.value(*a).data(), (1, k), g.data(), (n, 1), 0.0, &mut db, (n, 1));
                    send(*b, shaped(*b, db)?)?;
                }
            }
            Op::Linear(x, w) => {
                let (n, fin) = self.value(*x).dims2()?;
                let out = self.value(*w).dims2()?.0;
                if self.wants(*x) {
                    // dx [n, fin] = g [n, out] * w [out, fin]
                    let mut dx = vec![0.0; n * fin];
                    tensor::gemm(n, out, fin, 1.0, g.data(), (out, 1), self.value(*w).data(), (fin, 1), 0.0, &mut dx, (fin, 1));
                    send(*x, shaped(*x, dx)?)?;
                }
                if self.wants(*w) {
                    // dw [out, fin] = g^T [out, n] * x [n, fin]
                    let mut dw = vec![0.0; out * fin];
                    tensor::gemm(out, n, fin, 1.0, g.data(), (1, out), self.value(*x).data(), (fin, 1), 0.0, &mut dw, (fin, 1));
                    send(*w, shaped(*w, dw)?)?;
                }
            }
            Op::ChannelBias(x, b) => {
                send(*x, g.clone())?;
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let plane: usize = g.shape()[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    send(*b, shaped(*b, db)?)?;
                }
            }
            Op::Conv2d { x, w, geo, cols } => {
                let need_x = self.wants(*x);
                if self.wants(*w) {
                    let (dw, dx) = tensor::conv_backward(g.data(), cols, self.value(*w).data(), geo, need_x);
                    send(*w, shaped(*w, dw)?)?;
                    if let Some(dx) = dx {
                        send(*x, shaped(*x, dx)?)?;
                    }
                } else if need_x {
                    let cols = tensor::im2col(self.value(*x).data(), geo);
                    let (_, dx) = tensor::conv_backward(g.data(), &cols, self.value(*w).data(), geo, true);
                    send(*x, shaped(*x, dx.expect("input gradient requested"))?)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                send(*x, shaped(*x, dx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).dims4()?;
                let p = s.plane();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (chunk, &gv) in dx.chunks_mut(p).zip(g.data()) {
                    chunk.iter_mut().for_each(|d| *d = gv / p as f64);
                }
                send(*x, shaped(*x, dx)?)?;
            }
            Op::Reshape(x) => send(*x, g.clone().reshape(self.value(*x).shape())?)?,
            Op::CrossEntropy { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g.item()? / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                send(*logits, shaped(*logits, d)?)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                shape,
                cache,
            } => {
                let (dx, dg, db) = normalize::batch_norm_backward(g.data(), *shape, self.value(*gamma).data(), cache);
                send(*x, shaped(*x, dx)?)?;
                send(*gamma, shaped(*gamma, dg)?)?;
                send(*beta, shaped(*beta, db)?)?;
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                shape,
                cache,
            } => {
                let (dx, dg, db) = normalize::channel_affine_backward(g.data(), *shape, self.value(*gamma).data(), cache);
                send(*x, shaped(*x, dx)?)?;
                send(*gamma, shaped(*gamma, dg)?)?;
                send(*beta, shaped(*beta, db)?)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                shape,
                groups,
                cache,
            } => {
                let (dx, dg, db) =
                    normalize::group_norm_backward(g.data(), *shape, *groups, self.value(*gamma).data(), cache);
                send(*x, shaped(*x, dx)?)?;
                send(*gamma, shaped(*gamma, dg)?)?;
                send(*beta, shaped(*beta, db)?)?;
            }
            Op::WeightAlign { w, gamma, cfg, cache } => {
                let n = self.value(*w).len() / self.value(*gamma).len();
                let (dw, dg) = normalize::weight_align_backward(
                    self.value(*w).data(),
                    n,
                    self.value(*gamma).data(),
                    cfg,
                    cache,
                    g.data(),
                );
                send(*w, shaped(*w, dw)?)?;
                send(*gamma, shaped(*gamma, dg)?)?;
            }
            Op::WeightNorm { w, g: scale, eps, norms } => {
                let n = self.value(*w).len() / self.value(*scale).len();
                let (dw, dg) = normalize::weight_norm_backward(
                    self.value(*w).data(),
                    n,
                    self.value(*scale).data(),
                    *eps,
                    norms,
                    g.data(),
                );
                send(*w, shaped(*w, dw)?)?;
                send(*scale, shaped(*scale, dg)?)?;
            }
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// `f` records a scalar function of its input node. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(t.clone());
        let out = f(&mut g, input)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let input = g.variable(x.clone());
    let out = f(&mut g, input)?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(input).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient {a} at coordinate {i}")));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_are_absent_from_gradients() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2], 2.0));
        let c = g.constant(Tensor::full(&[2], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x) + sum(2x) -> df/dx = 3
        let mut g = Graph::new();
        let x = g.variable(random(&[4], 1));
        let a = g.sum(x);
        let x2 = g.scale(x, 2.0);
        let b = g.sum(x2);
        let f = g.add(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn sum_check_is_exact() {
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &random(&[3, 4], 2), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_check_off_kink() {
        let x = random(&[20], 3).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let err = finite_diff_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap());
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 10]));
        let l = g.cross_entropy(logits, &[3, 7]).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let mut hot = Tensor::zeros(&[1, 4]);
        hot.data_mut()[2] = 1000.0;
        let logits = g.constant(hot);
        let l = g.cross_entropy(logits, &[2]).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);

        assert!(g.cross_entropy(logits, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_softmax() {
        let x = random(&[4, 3], 4).scale(3.0);
        let labels = [0, 2, 1, 2];
        let mut g = Graph::new();
        let logits = g.constant(x.clone());
        let l = g.cross_entropy(logits, &labels).unwrap();
        let mut expect = 0.0;
        for (i, row) in x.data().chunks(3).enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[labels[i]].exp() / z).ln();
        }
        expect /= 4.0;
        assert!((g.value(l).item().unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn repeated_passes_are_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 3, 5, 5], 5));
            let w = g.variable(random(&[4, 3, 3, 3], 6));
            let y = g.conv2d(x, w, 1, 1).unwrap();
            let r = g.relu(y);
            let p = g.project(r, random(&[2, 4, 5, 5], 7)).unwrap();
            g.backward(p).unwrap().take(w).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn branch_gradients_add() {
        let x0 = random(&[6], 8);
        let c1 = random(&[6], 9);
        let c2 = random(&[6], 10);
        let grad = |cs: &[&Tensor]| {
            let mut g = Graph::new();
            let x = g.variable(x0.clone());
            let mut total: Option<NodeId> = None;
            for c in cs {
                let p = g.project(x, (*c).clone()).unwrap();
                total = Some(match total {
                    Some(t) => g.add(t, p).unwrap(),
                    None => p,
                });
            }
            g.backward(total.unwrap()).unwrap().take(x).unwrap()
        };
        let both = grad(&[&c1, &c2]);
        let sep = grad(&[&c1]).add(&grad(&[&c2])).unwrap();
        assert!(both.max_abs_diff(&sep).unwrap() < 1e-15);
    }

    #[test]
    fn sample_stat_counter() {
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 2, 3, 3], 11));
        let gamma = g.variable(Tensor::full(&[2], 1.0));
        let beta = g.variable(Tensor::zeros(&[2]));
        let mut st = NormState::new(2, 0.1, 1e-5);
        assert_eq!(g.sample_stat_evaluations(), 0);
        let w = g.variable(random(&[2, 2, 3, 3], 12));
        let gm = g.variable(Tensor::full(&[2], 1.0));
        g.weight_align(w, gm, WaConfig::default()).unwrap();
        assert_eq!(g.sample_stat_evaluations(), 0);
        g.batch_norm_train(x, gamma, beta, &mut st).unwrap();
        g.batch_norm_eval(x, gamma, beta, &st).unwrap();
        g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
        assert_eq!(g.sample_stat_evaluations(), 2);
    }

    #[test]
    fn weight_align_gradient_at_constant_filter() {
        let w = Tensor::full(&[2, 1, 3, 3], 0.4);
        let proj = random(&[2, 1, 3, 3], 9);
        let f = |g: &mut Graph, wi: NodeId| {
            let gm = g.constant(Tensor::full(&[2], 1.0));
            let y = g.weight_align(wi, gm, WaConfig::default())?;
            g.project(y, proj.clone())
        };
        let mut g = Graph::new();
        let wi = g.variable(w.clone());
        let out = f(&mut g, wi).unwrap();
        assert!(g.backward(out).unwrap().get(wi).unwrap().all_finite());
        assert!(finite_diff_check(f, &w, 1e-5).unwrap() < 1e-4);
    }
}
