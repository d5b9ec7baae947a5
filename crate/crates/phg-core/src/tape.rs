//! Minimal reverse-mode autodiff on a flat tape.
//!
//! Eager forward evaluation: every op computes its value immediately and
//! records itself on the tape; `backward` replays the tape in exact reverse
//! creation order. Only the primitives the UNet trunk and the losses need are
//! implemented. Values are stored f32; scalar reductions (losses, sums) are
//! accumulated in f64 and the exact f64 scalar is kept alongside so gradient
//! checks are not limited by f32 storage of the loss.
//!
//! Gradients flow only into nodes that (transitively) depend on a parameter
//! leaf, so e.g. the input image never gets an unnecessary conv backward pass.

use crate::error::{PhgError, Result};
use crate::tensor::{ClassMap, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, pad: usize },
    Relu { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    UpsampleNearest2 { input: NodeId },
    ConcatCh { inputs: Vec<NodeId> },
    SoftmaxCh { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    SumAll { input: NodeId },
    MeanScalars { inputs: Vec<NodeId> },
    CrossEntropy { logits: NodeId, target: ClassMap },
    L2 { pred: NodeId, target: Tensor },
    /// KL(teacher || student) with the teacher held constant as probabilities.
    KlVsProbs { student: NodeId, teacher: Tensor },
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f32>,
    /// Exact f64 value for scalar reduction nodes (losses, sums, means).
    scalar_f64: Option<f64>,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients produced by one backward pass, indexed by `NodeId`.
pub struct Grads {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Grads {
    /// Gradient buffer of a node, if any gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.by_node.get(id.0).and_then(|g| g.as_deref())
    }
}

/// The autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> NodeId {
        self.push_scalar64(dims, data, None, op, needs_grad)
    }

    fn push_scalar64(
        &mut self,
        dims: Vec<usize>,
        data: Vec<f32>,
        scalar_f64: Option<f64>,
        op: Op,
        needs_grad: bool,
    ) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node { dims, data, scalar_f64, op, needs_grad, is_param: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a trainable parameter leaf.
    pub fn parameter(&mut self, t: Tensor) -> NodeId {
        let dims = t.dims().to_vec();
        let id = self.push(dims, t.into_data(), Op::Leaf, true);
        self.nodes[id.0].is_param = true;
        id
    }

    /// Register a constant leaf (inputs, targets as tensors, ...).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let dims = t.dims().to_vec();
        self.push(dims, t.into_data(), Op::Leaf, false)
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Clone a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].dims.clone(), self.nodes[id.0].data.clone())
            .expect("tape node is internally consistent")
    }

    /// A scalar node's value, at f64 precision when the node is a reduction.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(PhgError::Shape(format!("node has dims {:?}, expected scalar", n.dims)));
        }
        Ok(n.scalar_f64.unwrap_or(n.data[0] as f64))
    }

    fn chw(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.nodes[id.0].dims[..] {
            [c, h, w] => Ok((c, h, w)),
            ref d => Err(PhgError::Shape(format!("{what}: expected [C,H,W], got {d:?}"))),
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────────────

    /// 2-D cross-correlation: input `[Ci,H,W]`, kernel `[Co,Ci,kh,kw]`,
    /// optional bias `[Co]`, symmetric zero padding `pad`.
    /// Output `[Co, H+2p-kh+1, W+2p-kw+1]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    ) -> Result<NodeId> {
        let (ci, h, w) = self.chw(input, "conv2d input")?;
        let kd = self.nodes[kernel.0].dims.clone();
        let [co, kci, kh, kw] = kd[..] else {
            return Err(PhgError::Shape(format!("conv2d kernel: expected rank 4, got {kd:?}")));
        };
        if kci != ci {
            return Err(PhgError::Shape(format!(
                "conv2d: kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(PhgError::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].dims[..] != [co] {
                return Err(PhgError::Shape(format!(
                    "conv2d bias: expected [{co}], got {:?}",
                    self.nodes[b.0].dims
                )));
            }
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;

        let out = conv2d_plain(
            &self.nodes[input.0].data,
            ci,
            h,
            w,
            &self.nodes[kernel.0].data,
            co,
            kh,
            kw,
            bias.map(|b| self.nodes[b.0].data.as_slice().to_vec()).as_deref(),
            pad,
        );
        let needs = self.nodes[input.0].needs_grad
            || self.nodes[kernel.0].needs_grad
            || bias.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
        Ok(self.push(vec![co, oh, ow], out, Op::Conv2d { input, kernel, bias, pad }, needs))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[input.0].data.iter().map(|&v| v.max(0.0)).collect();
        let dims = self.nodes[input.0].dims.clone();
        let needs = self.nodes[input.0].needs_grad;
        self.push(dims, data, Op::Relu { input }, needs)
    }

    /// 2x2 max pooling with stride 2; H and W must be even.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(input, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(PhgError::Shape(format!("max_pool2: dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0f32; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        let inp = &self.nodes[input.0].data;
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (ci * h + 2 * oy) * w + 2 * ox;
                    let mut best = inp[best_idx];
                    // Scan order fixes tie-breaking to the first maximum.
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if inp[idx] > best {
                            best = inp[idx];
                            best_idx = idx;
                        }
                    }
                    data[(ci * oh + oy) * ow + ox] = best;
                    argmax[(ci * oh + oy) * ow + ox] = best_idx as u32;
                }
            }
        }
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(vec![c, oh, ow], data, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(input, "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0f32; c * oh * ow];
        let inp = &self.nodes[input.0].data;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = inp[(ci * h + y) * w + x];
                    let base = (ci * oh + 2 * y) * ow + 2 * x;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + ow] = v;
                    data[base + ow + 1] = v;
                }
            }
        }
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(vec![c, oh, ow], data, Op::UpsampleNearest2 { input }, needs))
    }

    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(PhgError::Shape("concat_channels: no inputs".into()));
        }
        let (_, h, w) = self.chw(inputs[0], "concat_channels")?;
        let mut c_total = 0;
        for &id in inputs {
            let (c, hh, ww) = self.chw(id, "concat_channels")?;
            if hh != h || ww != w {
                return Err(PhgError::Shape(format!(
                    "concat_channels: spatial mismatch {hh}x{ww} vs {h}x{w}"
                )));
            }
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            data.extend_from_slice(&self.nodes[id.0].data);
        }
        let needs = inputs.iter().any(|&id| self.nodes[id.0].needs_grad);
        Ok(self.push(vec![c_total, h, w], data, Op::ConcatCh { inputs: inputs.to_vec() }, needs))
    }

    /// Per-pixel softmax over the channel axis of `[K,H,W]`.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let (k, h, w) = self.chw(input, "softmax_channels")?;
        let inp = &self.nodes[input.0].data;
        let mut data = vec![0.0f32; k * h * w];
        let plane = h * w;
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(inp[c * plane + p]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((inp[c * plane + p] - maxv) as f64).exp();
            }
            for c in 0..k {
                data[c * plane + p] = (((inp[c * plane + p] - maxv) as f64).exp() / denom) as f32;
            }
        }
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(vec![k, h, w], data, Op::SoftmaxCh { input }, needs))
    }

    /// Elementwise addition of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(PhgError::Shape(format!(
                "add: dims {:?} vs {:?}",
                self.nodes[a.0].dims, self.nodes[b.0].dims
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(dims, data, Op::Add { a, b }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(PhgError::Shape(format!(
                "mul: dims {:?} vs {:?}",
                self.nodes[a.0].dims, self.nodes[b.0].dims
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(dims, data, Op::Mul { a, b }, needs))
    }

    /// Sum of every element, as a scalar node (f64 accumulator).
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.nodes[input.0].data.iter().map(|&v| v as f64).sum();
        let needs = self.nodes[input.0].needs_grad;
        self.push_scalar64(vec![], vec![s as f32], Some(s), Op::SumAll { input }, needs)
    }

    /// Mean of several scalar nodes (used to average per-task losses).
    pub fn mean_scalars(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(PhgError::Shape("mean_scalars: no inputs".into()));
        }
        let mut acc = 0.0f64;
        for &id in inputs {
            acc += self.scalar(id)?;
        }
        let mean = acc / inputs.len() as f64;
        let needs = inputs.iter().any(|&id| self.nodes[id.0].needs_grad);
        Ok(self.push_scalar64(
            vec![],
            vec![mean as f32],
            Some(mean),
            Op::MeanScalars { inputs: inputs.to_vec() },
            needs,
        ))
    }

    /// Mean per-pixel cross-entropy between logits `[K,H,W]` and a target
    /// class map. Errors if the loss comes out non-finite.
    pub fn cross_entropy_loss(&mut self, logits: NodeId, target: &ClassMap) -> Result<NodeId> {
        let (k, h, w) = self.chw(logits, "cross_entropy_loss")?;
        if target.height() != h || target.width() != w {
            return Err(PhgError::Shape(format!(
                "cross_entropy_loss: logits {h}x{w} vs target {}x{}",
                target.height(),
                target.width()
            )));
        }
        target.check_labels(k, "cross_entropy_loss")?;
        let data = &self.nodes[logits.0].data;
        let plane = h * w;
        let mut acc = 0.0f64;
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(data[c * plane + p]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((data[c * plane + p] - maxv) as f64).exp();
            }
            let t = target.data()[p] as usize;
            acc += denom.ln() + maxv as f64 - data[t * plane + p] as f64;
        }
        let loss = acc / plane as f64;
        if !loss.is_finite() {
            return Err(PhgError::Numeric(format!("cross-entropy loss is {loss}")));
        }
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push_scalar64(
            vec![],
            vec![loss as f32],
            Some(loss),
            Op::CrossEntropy { logits, target: target.clone() },
            needs,
        ))
    }

    /// Mean squared error against a constant target of identical shape.
    pub fn l2_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.nodes[pred.0].dims != target.dims() {
            return Err(PhgError::Shape(format!(
                "l2_loss: pred {:?} vs target {:?}",
                self.nodes[pred.0].dims,
                target.dims()
            )));
        }
        let n = target.len().max(1);
        let acc: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                d * d
            })
            .sum();
        let loss = acc / n as f64;
        if !loss.is_finite() {
            return Err(PhgError::Numeric(format!("l2 loss is {loss}")));
        }
        let needs = self.nodes[pred.0].needs_grad;
        Ok(self.push_scalar64(
            vec![],
            vec![loss as f32],
            Some(loss),
            Op::L2 { pred, target: target.clone() },
            needs,
        ))
    }

    /// Mean per-pixel forward KL(teacher || student). The teacher is a
    /// constant `[K,H,W]` probability tensor (each pixel sums to ~1); the
    /// student passes logits. Zero teacher entries contribute zero.
    pub fn kl_loss_vs_probs(&mut self, student_logits: NodeId, teacher: &Tensor) -> Result<NodeId> {
        let (k, h, w) = self.chw(student_logits, "kl_loss")?;
        if teacher.dims() != [k, h, w] {
            return Err(PhgError::Shape(format!(
                "kl_loss: student {:?} vs teacher {:?}",
                self.nodes[student_logits.0].dims,
                teacher.dims()
            )));
        }
        let s = &self.nodes[student_logits.0].data;
        let t = teacher.data();
        let plane = h * w;
        let mut acc = 0.0f64;
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(s[c * plane + p]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((s[c * plane + p] - maxv) as f64).exp();
            }
            let lse = denom.ln() + maxv as f64;
            for c in 0..k {
                let tp = t[c * plane + p] as f64;
                if tp > 0.0 {
                    let log_s = s[c * plane + p] as f64 - lse;
                    acc += tp * (tp.ln() - log_s);
                }
            }
        }
        let loss = acc / plane as f64;
        if !loss.is_finite() {
            return Err(PhgError::Numeric(format!("kl loss is {loss}")));
        }
        let needs = self.nodes[student_logits.0].needs_grad;
        Ok(self.push_scalar64(
            vec![],
            vec![loss as f32],
            Some(loss),
            Op::KlVsProbs { student: student_logits, teacher: teacher.clone() },
            needs,
        ))
    }

    /// KL distillation loss with the teacher given as logits: the teacher is
    /// softmaxed (constant) and forwarded to `kl_loss_vs_probs`.
    pub fn kl_loss_vs_logits(
        &mut self,
        student_logits: NodeId,
        teacher_logits: &Tensor,
    ) -> Result<NodeId> {
        let [k, h, w] = teacher_logits.dims()[..] else {
            return Err(PhgError::Shape(format!(
                "kl_loss: teacher logits must be [K,H,W], got {:?}",
                teacher_logits.dims()
            )));
        };
        let plane = h * w;
        let t = teacher_logits.data();
        let mut probs = Tensor::zeros(&[k, h, w]);
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(t[c * plane + p]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((t[c * plane + p] - maxv) as f64).exp();
            }
            for c in 0..k {
                probs.data_mut()[c * plane + p] =
                    (((t[c * plane + p] - maxv) as f64).exp() / denom) as f32;
            }
        }
        self.kl_loss_vs_probs(student_logits, &probs)
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Errors if the tape is empty or
    /// the loss is not scalar.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(PhgError::Shape("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(PhgError::Shape(format!(
                "backward: node {} not on tape of length {}",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(PhgError::Shape(format!(
                "backward: loss node has dims {:?}, expected a scalar",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            // Parameters and leaves keep their gradient; interior nodes could
            // drop theirs, but keeping the buffer makes debugging easier and
            // the memory is short-lived.
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f32])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, pad } => {
                self.backprop_conv2d(*input, *kernel, *bias, *pad, &node.dims, g, grads);
            }
            Op::Relu { input } => {
                if self.nodes[input.0].needs_grad {
                    let x = &self.nodes[input.0].data;
                    Self::accum(grads, *input, x.len(), |gi| {
                        for ((gi, &xv), &gv) in gi.iter_mut().zip(x).zip(g) {
                            if xv > 0.0 {
                                *gi += gv;
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.nodes[input.0].needs_grad {
                    let len = self.nodes[input.0].data.len();
                    Self::accum(grads, *input, len, |gi| {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gi[src as usize] += gv;
                        }
                    });
                }
            }
            Op::UpsampleNearest2 { input } => {
                if self.nodes[input.0].needs_grad {
                    let [c, h, w] = self.nodes[input.0].dims[..] else { unreachable!() };
                    let ow = 2 * w;
                    Self::accum(grads, *input, c * h * w, |gi| {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let base = (ci * 2 * h + 2 * y) * ow + 2 * x;
                                    gi[(ci * h + y) * w + x] +=
                                        g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                                }
                            }
                        }
                    });
                }
            }
            Op::ConcatCh { inputs } => {
                let mut off = 0;
                for &id in inputs {
                    let len = self.nodes[id.0].data.len();
                    if self.nodes[id.0].needs_grad {
                        let seg = &g[off..off + len];
                        Self::accum(grads, id, len, |gi| {
                            for (gi, &gv) in gi.iter_mut().zip(seg) {
                                *gi += gv;
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::SoftmaxCh { input } => {
                if self.nodes[input.0].needs_grad {
                    let [k, h, w] = node.dims[..] else { unreachable!() };
                    let plane = h * w;
                    let s = &node.data;
                    Self::accum(grads, *input, k * plane, |gi| {
                        for p in 0..plane {
                            let mut dot = 0.0f64;
                            for c in 0..k {
                                dot += g[c * plane + p] as f64 * s[c * plane + p] as f64;
                            }
                            for c in 0..k {
                                gi[c * plane + p] += (s[c * plane + p] as f64
                                    * (g[c * plane + p] as f64 - dot))
                                    as f32;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &id in [a, b] {
                    if self.nodes[id.0].needs_grad {
                        Self::accum(grads, id, g.len(), |gi| {
                            for (gi, &gv) in gi.iter_mut().zip(g) {
                                *gi += gv;
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let other = &self.nodes[b.0].data;
                    Self::accum(grads, a, g.len(), |gi| {
                        for ((gi, &ov), &gv) in gi.iter_mut().zip(other).zip(g) {
                            *gi += gv * ov;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let other = &self.nodes[a.0].data;
                    Self::accum(grads, b, g.len(), |gi| {
                        for ((gi, &ov), &gv) in gi.iter_mut().zip(other).zip(g) {
                            *gi += gv * ov;
                        }
                    });
                }
            }
            Op::SumAll { input } => {
                if self.nodes[input.0].needs_grad {
                    let len = self.nodes[input.0].data.len();
                    let gv = g[0];
                    Self::accum(grads, *input, len, |gi| {
                        for gi in gi.iter_mut() {
                            *gi += gv;
                        }
                    });
                }
            }
            Op::MeanScalars { inputs } => {
                let share = g[0] / inputs.len() as f32;
                for &id in inputs {
                    if self.nodes[id.0].needs_grad {
                        Self::accum(grads, id, 1, |gi| gi[0] += share);
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                if self.nodes[logits.0].needs_grad {
                    let [k, h, w] = self.nodes[logits.0].dims[..] else { unreachable!() };
                    let plane = h * w;
                    let x = &self.nodes[logits.0].data;
                    let scale = g[0] as f64 / plane as f64;
                    Self::accum(grads, *logits, k * plane, |gi| {
                        for p in 0..plane {
                            let mut maxv = f32::NEG_INFINITY;
                            for c in 0..k {
                                maxv = maxv.max(x[c * plane + p]);
                            }
                            let mut denom = 0.0f64;
                            for c in 0..k {
                                denom += ((x[c * plane + p] - maxv) as f64).exp();
                            }
                            let t = target.data()[p] as usize;
                            for c in 0..k {
                                let sm = ((x[c * plane + p] - maxv) as f64).exp() / denom;
                                let ind = if c == t { 1.0 } else { 0.0 };
                                gi[c * plane + p] += ((sm - ind) * scale) as f32;
                            }
                        }
                    });
                }
            }
            Op::L2 { pred, target } => {
                if self.nodes[pred.0].needs_grad {
                    let x = &self.nodes[pred.0].data;
                    let scale = 2.0 * g[0] as f64 / x.len() as f64;
                    let t = target.data();
                    Self::accum(grads, *pred, x.len(), |gi| {
                        for i in 0..gi.len() {
                            gi[i] += ((x[i] as f64 - t[i] as f64) * scale) as f32;
                        }
                    });
                }
            }
            Op::KlVsProbs { student, teacher } => {
                if self.nodes[student.0].needs_grad {
                    let [k, h, w] = self.nodes[student.0].dims[..] else { unreachable!() };
                    let plane = h * w;
                    let s = &self.nodes[student.0].data;
                    let t = teacher.data();
                    let scale = g[0] as f64 / plane as f64;
                    Self::accum(grads, *student, k * plane, |gi| {
                        for p in 0..plane {
                            let mut maxv = f32::NEG_INFINITY;
                            for c in 0..k {
                                maxv = maxv.max(s[c * plane + p]);
                            }
                            let mut denom = 0.0f64;
                            for c in 0..k {
                                denom += ((s[c * plane + p] - maxv) as f64).exp();
                            }
                            let mut t_sum = 0.0f64;
                            for c in 0..k {
                                t_sum += t[c * plane + p] as f64;
                            }
                            for c in 0..k {
                                let sm = ((s[c * plane + p] - maxv) as f64).exp() / denom;
                                gi[c * plane + p] +=
                                    ((sm * t_sum - t[c * plane + p] as f64) * scale) as f32;
                            }
                        }
                    });
                }
            }
        }
    }

    fn backprop_conv2d(
        &self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: usize,
        out_dims: &[usize],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let [ci, h, w] = self.nodes[input.0].dims[..] else { unreachable!() };
        let [co, _, kh, kw] = self.nodes[kernel.0].dims[..] else { unreachable!() };
        let [_, oh, ow] = out_dims[..] else { unreachable!() };

        if self.nodes[input.0].needs_grad {
            let ker = &self.nodes[kernel.0].data;
            Self::accum(grads, input, ci * h * w, |gi| {
                for c_o in 0..co {
                    let g_plane = &g[c_o * oh * ow..][..oh * ow];
                    for c_i in 0..ci {
                        let gi_plane = &mut gi[c_i * h * w..][..h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wgt = ker[((c_o * ci + c_i) * kh + ky) * kw + kx];
                                if wgt == 0.0 {
                                    continue;
                                }
                                // Scatter: d_in[iy,ix] += w * g[oy,ox] over the
                                // same index window the forward pass used.
                                conv_axpy_scatter(gi_plane, g_plane, wgt, h, w, oh, ow, ky, kx, pad);
                            }
                        }
                    }
                }
            });
        }

        if self.nodes[kernel.0].needs_grad {
            let inp = &self.nodes[input.0].data;
            Self::accum(grads, kernel, co * ci * kh * kw, |gk| {
                for c_o in 0..co {
                    let g_plane = &g[c_o * oh * ow..][..oh * ow];
                    for c_i in 0..ci {
                        let in_plane = &inp[c_i * h * w..][..h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let acc =
                                    conv_kernel_grad(g_plane, in_plane, h, w, oh, ow, ky, kx, pad);
                                gk[((c_o * ci + c_i) * kh + ky) * kw + kx] += acc as f32;
                            }
                        }
                    }
                }
            });
        }

        if let Some(b) = bias {
            if self.nodes[b.0].needs_grad {
                Self::accum(grads, b, co, |gb| {
                    for c_o in 0..co {
                        let acc: f64 =
                            g[c_o * oh * ow..][..oh * ow].iter().map(|&v| v as f64).sum();
                        gb[c_o] += acc as f32;
                    }
                });
            }
        }
    }
}

/// Plain (no-tape) conv2d forward shared by the tape op and the fused-network
/// code: input `[ci,h,w]`, kernel `[co,ci,kh,kw]`, symmetric zero padding.
/// Zero kernel weights are skipped, so a fused kernel with zero cross-edge
/// blocks performs literally the same additions as the standalone edge.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_plain(
    inp: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    ker: &[f32],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f32]>,
    pad: usize,
) -> Vec<f32> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0f32; co * oh * ow];
    for c_o in 0..co {
        let out_plane = &mut out[c_o * oh * ow..][..oh * ow];
        if let Some(b) = bias {
            out_plane.fill(b[c_o]);
        }
        for c_i in 0..ci {
            let in_plane = &inp[c_i * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = ker[((c_o * ci + c_i) * kh + ky) * kw + kx];
                    if wgt == 0.0 {
                        continue; // finite inputs: adding 0*x is a no-op
                    }
                    conv_axpy(out_plane, in_plane, wgt, h, w, oh, ow, ky, kx, pad);
                }
            }
        }
    }
    out
}

/// Valid output-column range for a given kernel column offset under padding.
#[inline]
fn conv_ranges(h: usize, w: usize, oh: usize, ow: usize, ky: usize, kx: usize, pad: usize)
    -> (usize, usize, usize, usize) {
    let oy0 = pad.saturating_sub(ky);
    let oy1 = oh.min(h + pad - ky);
    let ox0 = pad.saturating_sub(kx);
    let ox1 = ow.min(w + pad - kx);
    (oy0, oy1, ox0, ox1)
}

/// out[oy,ox] += wgt * in[oy+ky-pad, ox+kx-pad] over the valid window.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_axpy(
    out_plane: &mut [f32],
    in_plane: &[f32],
    wgt: f32,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    let (oy0, oy1, ox0, ox1) = conv_ranges(h, w, oh, ow, ky, kx, pad);
    if ox1 <= ox0 {
        return;
    }
    for oy in oy0..oy1 {
        let iy = oy + ky - pad;
        let ix0 = ox0 + kx - pad;
        let orow = &mut out_plane[oy * ow + ox0..oy * ow + ox1];
        let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
        for (o, &iv) in orow.iter_mut().zip(irow) {
            *o += wgt * iv;
        }
    }
}

/// gi[oy+ky-pad, ox+kx-pad] += wgt * g[oy,ox] — the transpose of `conv_axpy`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_axpy_scatter(
    gi_plane: &mut [f32],
    g_plane: &[f32],
    wgt: f32,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    let (oy0, oy1, ox0, ox1) = conv_ranges(h, w, oh, ow, ky, kx, pad);
    if ox1 <= ox0 {
        return;
    }
    for oy in oy0..oy1 {
        let iy = oy + ky - pad;
        let ix0 = ox0 + kx - pad;
        let grow = &g_plane[oy * ow + ox0..oy * ow + ox1];
        let irow = &mut gi_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
        for (i, &gv) in irow.iter_mut().zip(grow) {
            *i += wgt * gv;
        }
    }
}

/// d_kernel[ky,kx] = sum over the valid window of g[oy,ox] * in[iy,ix],
/// accumulated in f64 (per-row partial dots in a fixed 4-lane association).
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_kernel_grad(
    g_plane: &[f32],
    in_plane: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) -> f64 {
    let (oy0, oy1, ox0, ox1) = conv_ranges(h, w, oh, ow, ky, kx, pad);
    if ox1 <= ox0 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for oy in oy0..oy1 {
        let iy = oy + ky - pad;
        let ix0 = ox0 + kx - pad;
        let grow = &g_plane[oy * ow + ox0..oy * ow + ox1];
        let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
        let mut lanes = [0.0f32; 4];
        let chunks = grow.len() / 4;
        for c in 0..chunks {
            for l in 0..4 {
                lanes[l] += grow[4 * c + l] * irow[4 * c + l];
            }
        }
        let mut tail = 0.0f32;
        for i in 4 * chunks..grow.len() {
            tail += grow[i] * irow[i];
        }
        acc += ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) as f64 + tail as f64;
    }
    acc
}
