use super::kernels::{self, round_half_even, sign, ConvGeom};
use crate::error::{CodeqError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Div(NodeId, NodeId, Broadcast),
    AddBias(NodeId, NodeId),
    AddChannelBias { x: NodeId, bias: NodeId, plane: usize },
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Tanh(NodeId),
    Exp2(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MaxReduce { a: NodeId, index: usize },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    SteRound(NodeId),
    SteRelu(NodeId),
    SteClip(NodeId),
    MaskedClip { a: NodeId, lo: f64, hi: f64 },
    ZeroGradSign,
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in creation order, which is always a
/// valid topological order of the graph.
///
/// Gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`] is invoked: running backward twice on the same loss
/// doubles every gradient.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.node(id).requires_grad)
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if numel(shape) != value.len() {
            return Err(CodeqError::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(shape),
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, false)
    }

    pub fn scalar(&mut self, value: f64, requires_grad: bool) -> NodeId {
        self.push(vec![1], vec![value], Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    /// First element of a node's value; intended for scalars.
    pub fn item(&self, id: NodeId) -> f64 {
        self.node(id).value[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        self.grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.node(id).value.len()])
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ----- element-wise binary ops with scalar broadcasting -----

    fn broadcast(&self, a: NodeId, b: NodeId, what: &str) -> Result<(Vec<usize>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (numel(sa) == 1 && numel(sb) == 1) {
            Ok((sa.to_vec(), Broadcast::Same))
        } else if numel(sb) == 1 {
            Ok((sa.to_vec(), Broadcast::RightScalar))
        } else if numel(sa) == 1 {
            Ok((sb.to_vec(), Broadcast::LeftScalar))
        } else {
            Err(CodeqError::Shape(format!("{what}: incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<NodeId> {
        let (shape, bc) = self.broadcast(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f64> = match bc {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::LeftScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op(a, b, bc), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// `x[.., m] + bias[m]`, broadcasting over leading dimensions.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().unwrap_or(&0);
        if self.shape(bias) != [m] {
            return Err(CodeqError::Shape(format!(
                "add_bias: bias {:?} does not match trailing dim of {:?}",
                self.shape(bias),
                shape
            )));
        }
        let vb = self.value(bias);
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % m])
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, value, Op::AddBias(x, bias), rg))
    }

    /// Add a per-channel bias to an `[N, C, H, W]` tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(bias) != [shape[1]] {
            return Err(CodeqError::Shape(format!(
                "add_channel_bias: bias {:?} vs input {:?}",
                self.shape(bias),
                shape
            )));
        }
        let plane = shape[2] * shape[3];
        let c = shape[1];
        let vb = self.value(bias);
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[(i / plane) % c])
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, value, Op::AddChannelBias { x, bias, plane }, rg))
    }

    // ----- unary ops -----

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = match op {
            Op::ZeroGradSign | Op::StopGradient => false,
            _ => self.rg(&[a]),
        };
        self.push(shape, value, op, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `|x|`, with `sign(x)` as the (sub)gradient; zero at the origin.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `2^x`
    pub fn exp2(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp2, Op::Exp2(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(a).len() {
            return Err(CodeqError::Shape(format!(
                "reshape: {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    /// Maximum over all elements; the gradient goes to the first maximiser.
    pub fn max_reduce(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(CodeqError::Empty("max_reduce"));
        }
        let (index, max) = v
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if x > bv { (i, x) } else { (bi, bv) });
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![max], Op::MaxReduce { a, index }, rg))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CodeqError::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// 2-D convolution (cross-correlation) of `x: [N, C, H, W]` with
    /// `w: [O, C, KH, KW]`, lowered to im2col + matmul.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(CodeqError::Shape(format!("conv2d: input {sx:?}, kernel {sw:?}")));
        }
        let out_h = ConvGeom::output_size(sx[2], sw[2], stride, padding);
        let out_w = ConvGeom::output_size(sx[3], sw[3], stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(CodeqError::Shape(format!(
                "conv2d: kernel {sw:?} with stride {stride} does not fit input {sx:?}"
            )));
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let value = kernels::conv2d_forward(self.value(x), self.value(w), &geom);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            vec![geom.batch, geom.out_ch, out_h, out_w],
            value,
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing rows
    /// and columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(CodeqError::Shape(format!("max_pool2d: input {s:?}, window {size}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let v = self.value(x);
        let mut value = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (base + i * size * w + j * size, f64::NEG_INFINITY);
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if v[idx] > best.1 {
                                best = (idx, v[idx]);
                            }
                        }
                    }
                    argmax.push(best.0);
                    value.push(best.1);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c, oh, ow], value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(CodeqError::Shape(format!(
                "softmax_cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CodeqError::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &v[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- straight-through and gradient-blocking nodes -----

    /// Round to nearest (ties to even); backward is the identity.
    pub fn ste_round(&mut self, a: NodeId) -> NodeId {
        self.unary(a, round_half_even, Op::SteRound(a))
    }

    /// `max(x, 0)` forward; backward passes the gradient everywhere.
    pub fn ste_relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::SteRelu(a))
    }

    /// Clip to `[lo, hi]` forward; backward passes the gradient everywhere.
    pub fn ste_clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(CodeqError::InvalidRange { lo, hi });
        }
        Ok(self.unary(a, |x| x.clamp(lo, hi), Op::SteClip(a)))
    }

    /// Clip to `[lo, hi]`; backward passes the gradient only where the input was
    /// inside the range.
    pub fn masked_clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(CodeqError::InvalidRange { lo, hi });
        }
        Ok(self.unary(a, |x| x.clamp(lo, hi), Op::MaskedClip { a, lo, hi }))
    }

    /// Element-wise sign in `{-1, 0, 1}`; contributes no gradient.
    pub fn zero_grad_sign(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sign, Op::ZeroGradSign)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x, Op::StopGradient)
    }

    // ----- backward -----

    /// Propagate `d loss / d node` to every node that requires a gradient and
    /// add it into the tape's gradient store.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(CodeqError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (parent, contribution) in self.node_backward(node, &g) {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut local[parent.0], contribution);
                }
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let val = |id: NodeId| self.value(id);
        let reduce = |full: Vec<f64>, to_scalar: bool| -> Vec<f64> {
            if to_scalar {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };

        match &node.op {
            Op::Leaf | Op::ZeroGradSign | Op::StopGradient => vec![],
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce(g.to_vec(), matches!(bc, Broadcast::LeftScalar));
                let gb = reduce(
                    g.iter().map(|x| sign_b * x).collect(),
                    matches!(bc, Broadcast::RightScalar),
                );
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(va, i)).collect();
                vec![
                    (*a, reduce(ga, matches!(bc, Broadcast::LeftScalar))),
                    (*b, reduce(gb, matches!(bc, Broadcast::RightScalar))),
                ]
            }
            Op::Div(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / at(vb, i)).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let d = at(vb, i);
                        -gi * at(va, i) / (d * d)
                    })
                    .collect();
                vec![
                    (*a, reduce(ga, matches!(bc, Broadcast::LeftScalar))),
                    (*b, reduce(gb, matches!(bc, Broadcast::RightScalar))),
                ]
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                let mut gb = vec![0.0; m];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % m] += gi;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::AddChannelBias { x, bias, plane } => {
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    gb[(i / plane) % c] += gi;
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Neg(a) => vec![(*a, g.iter().map(|x| -x).collect())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::SteRound(a)
            | Op::SteRelu(a)
            | Op::SteClip(a) => vec![(*a, g.to_vec())],
            Op::MatMul { a, b, m, k, n } => {
                let ga = kernels::matmul_a_bt(g, val(*b), *m, *n, *k);
                let gb = kernels::matmul_at_b(val(*a), g, *m, *k, *n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                vec![(*x, gx), (*w, gw)]
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gi;
                }
                vec![(*x, gx)]
            }
            Op::Relu(a) => {
                let va = val(*a);
                vec![(*a, g.iter().zip(va).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect())]
            }
            Op::Abs(a) => {
                let va = val(*a);
                vec![(*a, g.iter().zip(va).map(|(gi, &x)| gi * sign(x)).collect())]
            }
            Op::Tanh(a) => vec![(
                *a,
                g.iter().zip(&node.value).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            )],
            Op::Exp2(a) => vec![(
                *a,
                g.iter()
                    .zip(&node.value)
                    .map(|(gi, y)| gi * y * std::f64::consts::LN_2)
                    .collect(),
            )],
            Op::Square(a) => {
                let va = val(*a);
                vec![(*a, g.iter().zip(va).map(|(gi, x)| 2.0 * x * gi).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MaxReduce { a, index } => {
                let mut ga = vec![0.0; val(*a).len()];
                ga[*index] = g[0];
                vec![(*a, ga)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::MaskedClip { a, lo, hi } => {
                let va = val(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                        .collect(),
                )]
            }
        }
    }
}
