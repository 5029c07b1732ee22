//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already
//! topologically sorted; the backward sweep walks it once in reverse.
//! Only the handful of primitives the tiny networks need are provided.

use crate::error::{Error, Result};

/// Row-major tensor dimensions. An empty shape is a scalar.
pub type TensorShape = Vec<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

/// Recorded primitive. Inputs always refer to earlier nodes.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input data or a constant.
    Leaf,
    /// Trainable parameter; `index` is the caller's parameter slot.
    Param { index: usize },
    /// `[B, D_in] -> [B, D_out]`: `x W^T + b`.
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    /// 3x3 convolution, stride 1, zero padding 1: `[B, C_in, H, W] -> [B, C_out, H, W]`.
    Conv3x3 { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    /// 2x2 window, stride 2. `argmax` holds the winning input offset per
    /// output element for max pooling.
    Pool2x2 { input: NodeId, kind: PoolKind, argmax: Vec<usize> },
    /// `[B, C, H, W] -> [B, C]`.
    GlobalAvgPool { input: NodeId },
    /// `[B, ...] -> [B, prod(...)]`.
    Flatten { input: NodeId },
    /// Identity forward, blocks gradient.
    Detach { input: NodeId },
    /// Elementwise product of equal shapes.
    Mul { a: NodeId, b: NodeId },
    /// Sum of all entries to a scalar.
    Sum { input: NodeId },
    /// Batch-mean softmax cross-entropy of `[B, C]` logits against hard labels.
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    shape: TensorShape,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct TapeGraph {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a node, `None` when nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a node, materialized as zeros when nothing flowed into it.
    pub fn get_or_zero(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl TapeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: TensorShape) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { op, value, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check_len(value: &[f64], shape: &[usize]) -> Result<()> {
        if value.len() != numel(shape) {
            return Err(Error::usage(format!(
                "tensor of {} values does not fit shape {:?}",
                value.len(),
                shape
            )));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: TensorShape) -> Result<NodeId> {
        Self::check_len(&value, &shape)?;
        Ok(self.push(Op::Leaf, value, shape))
    }

    pub fn param(&mut self, index: usize, value: Vec<f64>, shape: TensorShape) -> Result<NodeId> {
        Self::check_len(&value, &shape)?;
        Ok(self.push(Op::Param { index }, value, shape))
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::usage(format!(
                "affine shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = vec![0.0; batch * d_out];
        for n in 0..batch {
            let row = &x[n * d_in..(n + 1) * d_in];
            for o in 0..d_out {
                let wrow = &w[o * d_in..(o + 1) * d_in];
                out[n * d_out + o] = b[o] + row.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Ok(self.push(Op::Affine { input, weight, bias }, out, vec![batch, d_out]))
    }

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4
            || ws.len() != 4
            || ws[1] != xs[1]
            || ws[2] != 3
            || ws[3] != 3
            || bs.len() != 1
            || bs[0] != ws[0]
        {
            return Err(Error::usage(format!(
                "conv shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        let (x, k, b) = (self.value(input), self.value(weight), self.value(bias));
        let plane = h * w;
        let mut out = vec![0.0; batch * c_out * plane];
        for n in 0..batch {
            for co in 0..c_out {
                let dst = &mut out[(n * c_out + co) * plane..][..plane];
                dst.fill(b[co]);
                for ci in 0..c_in {
                    let src = &x[(n * c_in + ci) * plane..][..plane];
                    let kern = &k[(co * c_in + ci) * 9..][..9];
                    conv_plane_accumulate(dst, src, kern, h, w);
                }
            }
        }
        Ok(self.push(
            Op::Conv3x3 { input, weight, bias },
            out,
            vec![batch, c_out, h, w],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::Relu { input }, out, shape)
    }

    pub fn pool2x2(&mut self, input: NodeId, kind: PoolKind) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::usage(format!("pool expects [B,C,H>=2,W>=2], got {xs:?}")));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = vec![0.0; batch * ch * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; out.len()];
        }
        for plane in 0..batch * ch {
            let src = &x[plane * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = plane * oh * ow + oy * ow + ox;
                    let base = 2 * oy * w + 2 * ox;
                    let window = [base, base + 1, base + w, base + w + 1];
                    match kind {
                        PoolKind::Max => {
                            // first maximum wins on ties
                            let mut best = window[0];
                            for &i in &window[1..] {
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                            out[o] = src[best];
                            argmax[o] = plane * h * w + best;
                        }
                        PoolKind::Avg => {
                            out[o] = window.iter().map(|&i| src[i]).sum::<f64>() * 0.25;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Pool2x2 { input, kind, argmax },
            out,
            vec![batch, ch, oh, ow],
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(Error::usage(format!("global pooling expects [B,C,H,W], got {xs:?}")));
        }
        let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.value(input);
        let out = (0..batch * ch)
            .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Op::GlobalAvgPool { input }, out, vec![batch, ch]))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.is_empty() {
            return Err(Error::usage("cannot flatten a scalar"));
        }
        let shape = vec![xs[0], numel(&xs[1..])];
        let out = self.value(input).to_vec();
        Ok(self.push(Op::Flatten { input }, out, shape))
    }

    pub fn detach(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).to_vec();
        let shape = self.shape(input).to_vec();
        self.push(Op::Detach { input }, out, shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::usage(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, out, shape))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).iter().sum();
        self.push(Op::Sum { input }, vec![s], vec![])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != targets.len() || targets.is_empty() {
            return Err(Error::usage(format!(
                "cross-entropy expects [B,C] logits with B targets, got {ls:?} and {}",
                targets.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::usage(format!("target {t} out of range for {classes} classes")));
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = 0.0;
        for (n, &t) in targets.iter().enumerate() {
            let row = &z[n * classes..(n + 1) * classes];
            let logp = super::log_softmax_scaled(row, 1.0);
            loss -= logp[t];
            probs.extend(logp.iter().map(|l| l.exp()));
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            vec![loss / batch as f64],
            vec![],
        ))
    }

    /// Reverse sweep from a scalar output seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::usage("backward called before the forward pass was recorded"));
        }
        if !self.nodes[output.0].shape.is_empty() {
            return Err(Error::usage(format!(
                "backward seed needs a scalar output, node has shape {:?}",
                self.nodes[output.0].shape
            )));
        }
        self.backward_from(&[(output, vec![seed])])
    }

    /// Reverse sweep from arbitrary upstream adjoints, e.g. loss gradients
    /// with respect to logits computed outside the tape.
    pub fn backward_from(&self, seeds: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        if self.nodes.is_empty() || seeds.is_empty() {
            return Err(Error::usage("backward called before the forward pass was recorded"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::usage("backward seed refers to an unrecorded node"))?;
            if g.len() != node.value.len() {
                return Err(Error::usage(format!(
                    "seed of length {} for node with {} values",
                    g.len(),
                    node.value.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward seed"));
            }
            let slot = add_into(&mut grads[id.0], g.len());
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
            last = last.max(id.0);
        }

        for idx in (0..=last).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param { .. } | Op::Detach { .. } => {}
            Op::Affine { input, weight, bias } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (batch, d_in, d_out) = (xs[0], xs[1], ws[0]);
                let (x, w) = (self.value(*input), self.value(*weight));
                {
                    let gx = add_into(&mut grads[input.0], x.len());
                    for n in 0..batch {
                        for o in 0..d_out {
                            let u = up[n * d_out + o];
                            if u == 0.0 {
                                continue;
                            }
                            let wrow = &w[o * d_in..(o + 1) * d_in];
                            for (g, wv) in gx[n * d_in..(n + 1) * d_in].iter_mut().zip(wrow) {
                                *g += u * wv;
                            }
                        }
                    }
                }
                {
                    let gw = add_into(&mut grads[weight.0], w.len());
                    for n in 0..batch {
                        let row = &x[n * d_in..(n + 1) * d_in];
                        for o in 0..d_out {
                            let u = up[n * d_out + o];
                            for (g, xv) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(row) {
                                *g += u * xv;
                            }
                        }
                    }
                }
                let gb = add_into(&mut grads[bias.0], d_out);
                for n in 0..batch {
                    for o in 0..d_out {
                        gb[o] += up[n * d_out + o];
                    }
                }
            }
            Op::Conv3x3 { input, weight, bias } => {
                let xs = self.shape(*input);
                let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let c_out = self.shape(*weight)[0];
                let plane = h * w;
                let (x, k) = (self.value(*input), self.value(*weight));
                {
                    let gx = add_into(&mut grads[input.0], x.len());
                    for n in 0..batch {
                        for co in 0..c_out {
                            let g_out = &up[(n * c_out + co) * plane..][..plane];
                            for ci in 0..c_in {
                                let kern = &k[(co * c_in + ci) * 9..][..9];
                                let dst = &mut gx[(n * c_in + ci) * plane..][..plane];
                                conv_plane_transpose_accumulate(dst, g_out, kern, h, w);
                            }
                        }
                    }
                }
                {
                    let gk = add_into(&mut grads[weight.0], k.len());
                    for n in 0..batch {
                        for co in 0..c_out {
                            let g_out = &up[(n * c_out + co) * plane..][..plane];
                            for ci in 0..c_in {
                                let src = &x[(n * c_in + ci) * plane..][..plane];
                                let dst = &mut gk[(co * c_in + ci) * 9..][..9];
                                conv_plane_kernel_grad(dst, g_out, src, h, w);
                            }
                        }
                    }
                }
                let gb = add_into(&mut grads[bias.0], c_out);
                for n in 0..batch {
                    for (co, g) in gb.iter_mut().enumerate() {
                        *g += up[(n * c_out + co) * plane..][..plane].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let gx = add_into(&mut grads[input.0], x.len());
                for ((g, &xv), &u) in gx.iter_mut().zip(x).zip(up) {
                    if xv > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::Pool2x2 { input, kind, argmax } => {
                let xs = self.shape(*input);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let len = self.value(*input).len();
                let gx = add_into(&mut grads[input.0], len);
                match kind {
                    PoolKind::Max => {
                        for (&src, &u) in argmax.iter().zip(up) {
                            gx[src] += u;
                        }
                    }
                    PoolKind::Avg => {
                        for (o, &u) in up.iter().enumerate() {
                            let plane = o / (oh * ow);
                            let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
                            let base = plane * h * w + 2 * oy * w + 2 * ox;
                            for i in [base, base + 1, base + w, base + w + 1] {
                                gx[i] += 0.25 * u;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.shape(*input);
                let plane = xs[2] * xs[3];
                let len = self.value(*input).len();
                let gx = add_into(&mut grads[input.0], len);
                let scale = 1.0 / plane as f64;
                for (p, &u) in up.iter().enumerate() {
                    for g in &mut gx[p * plane..(p + 1) * plane] {
                        *g += u * scale;
                    }
                }
            }
            Op::Flatten { input } => {
                let gx = add_into(&mut grads[input.0], up.len());
                for (g, u) in gx.iter_mut().zip(up) {
                    *g += u;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let ga = add_into(&mut grads[a.0], av.len());
                    for ((g, &u), &y) in ga.iter_mut().zip(up).zip(bv) {
                        *g += u * y;
                    }
                }
                let gb = add_into(&mut grads[b.0], bv.len());
                for ((g, &u), &x) in gb.iter_mut().zip(up).zip(av) {
                    *g += u * x;
                }
            }
            Op::Sum { input } => {
                let len = self.value(*input).len();
                let gx = add_into(&mut grads[input.0], len);
                for g in gx.iter_mut() {
                    *g += up[0];
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let batch = targets.len();
                let classes = probs.len() / batch;
                let scale = up[0] / batch as f64;
                let gz = add_into(&mut grads[logits.0], probs.len());
                for (n, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gz[n * classes + c] += scale * (probs[n * classes + c] - onehot);
                    }
                }
            }
        }
    }
}

/// Valid output range along one axis for kernel offset `k` in {0,1,2}.
#[inline]
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len - 1),
    }
}

/// `dst[y, x] += sum_k kern[ky, kx] * src[y + ky - 1, x + kx - 1]`.
fn conv_plane_accumulate(dst: &mut [f64], src: &[f64], kern: &[f64], h: usize, w: usize) {
    for ky in 0..3 {
        let (y0, y1) = valid_range(ky, h);
        for kx in 0..3 {
            let (x0, x1) = valid_range(kx, w);
            let kv = kern[ky * 3 + kx];
            for y in y0..y1 {
                let sy = y + ky - 1;
                let d = &mut dst[y * w + x0..y * w + x1];
                let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += kv * sv;
                }
            }
        }
    }
}

/// Adjoint of [`conv_plane_accumulate`] with respect to `src`.
fn conv_plane_transpose_accumulate(dst: &mut [f64], g_out: &[f64], kern: &[f64], h: usize, w: usize) {
    for ky in 0..3 {
        let (y0, y1) = valid_range(ky, h);
        for kx in 0..3 {
            let (x0, x1) = valid_range(kx, w);
            let kv = kern[ky * 3 + kx];
            for y in y0..y1 {
                let sy = y + ky - 1;
                let g = &g_out[y * w + x0..y * w + x1];
                let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += kv * gv;
                }
            }
        }
    }
}

/// Adjoint of [`conv_plane_accumulate`] with respect to `kern`.
fn conv_plane_kernel_grad(dst: &mut [f64], g_out: &[f64], src: &[f64], h: usize, w: usize) {
    for ky in 0..3 {
        let (y0, y1) = valid_range(ky, h);
        for kx in 0..3 {
            let (x0, x1) = valid_range(kx, w);
            let mut acc = 0.0;
            for y in y0..y1 {
                let sy = y + ky - 1;
                let g = &g_out[y * w + x0..y * w + x1];
                let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
            }
            dst[ky * 3 + kx] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::{finite_diff_grad, max_relative_error};

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = TapeGraph::new();
        let x = g.param(0, vec![3.0], vec![1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        assert_eq!(g.value(s), &[9.0]);
        let grads = g.backward(s, 1.0).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut g = TapeGraph::new();
        let x = g.param(0, vec![3.0, -1.0], vec![2]).unwrap();
        let c = g.leaf(vec![5.0], vec![1]).unwrap();
        let _ = g.mul(x, x).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s, 1.0).unwrap();
        assert_eq!(grads.get_or_zero(x, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let g = TapeGraph::new();
        assert!(matches!(g.backward(NodeId(0), 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_seed_rejected() {
        let mut g = TapeGraph::new();
        let x = g.param(0, vec![1.0], vec![]).unwrap();
        assert!(g.backward(x, f64::NAN).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = TapeGraph::new();
        let x = g.param(0, vec![2.0], vec![1]).unwrap();
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s, 1.0).unwrap();
        // only the live factor contributes: d(x * c)/dx = c
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    fn affine_relu_sum(x: &[f64], w: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let mut g = TapeGraph::new();
        let xi = g.leaf(x.to_vec(), vec![2, 4]).unwrap();
        let wi = g.param(0, w.to_vec(), vec![3, 4]).unwrap();
        let bi = g.param(1, b.to_vec(), vec![3]).unwrap();
        let a = g.affine(xi, wi, bi).unwrap();
        let r = g.relu(a);
        let s = g.sum(r);
        let grads = g.backward(s, 1.0).unwrap();
        (g.value(s)[0], grads.get_or_zero(wi, w.len()))
    }

    #[test]
    fn affine_relu_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 8);
        let w = random(&mut rng, 12);
        let b = random(&mut rng, 3);
        let (_, analytic) = affine_relu_sum(&x, &w, &b);
        let numeric = finite_diff_grad(|wp| affine_relu_sum(&x, wp, &b).0, &w, 1e-5);
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    fn conv_stack(x: &[f64], k: &[f64], kind: PoolKind) -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = TapeGraph::new();
        let xi = g.param(0, x.to_vec(), vec![2, 2, 4, 6]).unwrap();
        let ki = g.param(1, k.to_vec(), vec![3, 2, 3, 3]).unwrap();
        let bi = g.param(2, vec![0.1, -0.2, 0.05], vec![3]).unwrap();
        let c = g.conv3x3(xi, ki, bi).unwrap();
        let p = g.pool2x2(c, kind).unwrap();
        let gap = g.global_avg_pool(p).unwrap();
        let loss = g.softmax_cross_entropy(gap, &[1, 2]).unwrap();
        let grads = g.backward(loss, 1.0).unwrap();
        (
            g.value(loss)[0],
            grads.get_or_zero(xi, x.len()),
            grads.get_or_zero(ki, k.len()),
        )
    }

    #[test]
    fn conv_pool_ce_matches_finite_differences() {
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let x = random(&mut rng, 2 * 2 * 4 * 6);
            let k = random(&mut rng, 3 * 2 * 9);
            let (_, gx, gk) = conv_stack(&x, &k, kind);
            let nk = finite_diff_grad(|kp| conv_stack(&x, kp, kind).0, &k, 1e-5);
            let nx = finite_diff_grad(|xp| conv_stack(xp, &k, kind).0, &x, 1e-5);
            assert!(max_relative_error(&gk, &nk) < 1e-4, "{kind:?} kernel");
            assert!(max_relative_error(&gx, &nx) < 1e-4, "{kind:?} input");
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = TapeGraph::new();
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let xi = g.leaf(x.clone(), vec![1, 1, 3, 3]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let ki = g.param(0, k, vec![1, 1, 3, 3]).unwrap();
        let bi = g.param(1, vec![0.0], vec![1]).unwrap();
        let c = g.conv3x3(xi, ki, bi).unwrap();
        assert_eq!(g.value(c), x.as_slice());
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut g = TapeGraph::new();
        let x = g.leaf(vec![0.0; 6], vec![2, 3]).unwrap();
        let w = g.param(0, vec![0.0; 8], vec![2, 4]).unwrap();
        let b = g.param(1, vec![0.0; 2], vec![2]).unwrap();
        assert!(matches!(g.affine(x, w, b), Err(Error::Usage(_))));
        assert!(g.leaf(vec![0.0; 5], vec![2, 3]).is_err());
    }
}
