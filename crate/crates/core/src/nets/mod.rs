//! Tiny teacher/student networks with a feature tap, He initialization and
//! SGD with momentum.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::numkit::{Gradients, NodeId, PoolKind, TapeGraph};
use crate::seed::{self, Purpose};

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, spec_hash, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Fully connected layers with rectifiers; the tap is the last hidden layer.
    Mlp,
    /// `[conv3x3 -> relu -> pool2x2] x 2 -> GAP -> linear`; the tap is the
    /// stage-2 feature map.
    Cnn2stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    pub input: ImageShape,
    /// Hidden widths (mlp) or output channels per stage (cnn2stage).
    pub widths: Vec<usize>,
    pub classes: usize,
    /// Zero-based stage whose output feeds the weak head.
    pub tap_stage: usize,
    #[serde(default)]
    pub pool: PoolKind,
    /// Adds an auxiliary linear head on the pooled tap feature.
    #[serde(default)]
    pub weak_head: bool,
}

impl NetSpec {
    pub fn cnn2stage(input: ImageShape, channels: [usize; 2], classes: usize, weak_head: bool) -> NetSpec {
        NetSpec {
            kind: NetKind::Cnn2stage,
            input,
            widths: channels.to_vec(),
            classes,
            tap_stage: 1,
            pool: PoolKind::Max,
            weak_head,
        }
    }

    pub fn mlp(input: ImageShape, hidden: &[usize], classes: usize, weak_head: bool) -> NetSpec {
        NetSpec {
            kind: NetKind::Mlp,
            input,
            widths: hidden.to_vec(),
            classes,
            tap_stage: hidden.len().saturating_sub(1),
            pool: PoolKind::Max,
            weak_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("input and layer widths must be positive"));
        }
        match self.kind {
            NetKind::Cnn2stage => {
                if self.widths.len() != 2 {
                    return Err(Error::config("cnn2stage needs exactly two stage widths"));
                }
                if self.input.height < 4 || self.input.width < 4 {
                    return Err(Error::config("cnn2stage needs inputs of at least 4x4"));
                }
            }
            NetKind::Mlp => {
                if self.widths.is_empty() && self.weak_head {
                    return Err(Error::config("a weak head needs at least one hidden layer to tap"));
                }
            }
        }
        if !self.widths.is_empty() && self.tap_stage >= self.widths.len() {
            return Err(Error::config(format!(
                "tap stage {} does not exist in a {}-stage network",
                self.tap_stage,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Width of the pooled tap feature seen by the weak head.
    pub fn tap_width(&self) -> usize {
        self.widths.get(self.tap_stage).copied().unwrap_or(self.input.len())
    }

    fn final_in(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input.len())
    }

    /// Name, shape and initial weight variance of every parameter, in
    /// storage order. Layers feeding a rectifier get `2 / fan_in`, the
    /// output heads `1 / fan_in`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut push = |name: String, wshape: Vec<usize>, fan_in: usize| {
            let gain = if name == "fc" || name == "weak" { 1.0 } else { 2.0 };
            let var = gain / fan_in as f64;
            let bias = vec![wshape[0]];
            out.push((format!("{name}.weight"), wshape, var));
            out.push((format!("{name}.bias"), bias, var));
        };
        match self.kind {
            NetKind::Cnn2stage => {
                let mut c_in = self.input.channels;
                for (s, &c) in self.widths.iter().enumerate() {
                    push(format!("stage{}", s + 1), vec![c, c_in, 3, 3], c_in * 9);
                    c_in = c;
                }
            }
            NetKind::Mlp => {
                let mut d_in = self.input.len();
                for (s, &d) in self.widths.iter().enumerate() {
                    push(format!("hidden{}", s + 1), vec![d, d_in], d_in);
                    d_in = d;
                }
            }
        }
        push("fc".into(), vec![self.classes, self.final_in()], self.final_in());
        if self.weak_head {
            push("weak".into(), vec![self.classes, self.tap_width()], self.tap_width());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Whether the parameter belongs to the auxiliary weak head.
    pub fn is_weak(name: &str) -> bool {
        name.starts_with("weak.")
    }

    /// Checks that the set has exactly the layout `spec` requires.
    pub fn check_layout(&self, spec: &NetSpec) -> Result<()> {
        let layout = spec.layout();
        let matches = layout.len() == self.params.len()
            && layout
                .iter()
                .zip(&self.params)
                .all(|((n, s, _), p)| *n == p.name && *s == p.shape && p.value.len() == s.iter().product::<usize>());
        if !matches {
            return Err(Error::usage("parameter set does not match the network spec"));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform weights (`U(-a, a)` with `a = sqrt(3 var)`, see
/// [`NetSpec::layout`]) and zero biases, reproducible from `(spec, seed)`.
pub fn init_params(spec: &NetSpec, seed: u64) -> ParamSet {
    let mut rng = seed::stream(seed, Purpose::Init, 0);
    let params = spec
        .layout()
        .into_iter()
        .map(|(name, shape, var)| {
            let n: usize = shape.iter().product();
            let value = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let a = (3.0 * var).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            };
            Param { name, shape, value }
        })
        .collect();
    ParamSet { params }
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tape: TapeGraph,
    /// `[B, C]` final logits.
    pub logits: NodeId,
    /// `[B, D, H, W]` (cnn2stage) or `[B, D]` (mlp) tapped feature.
    pub tap: NodeId,
    /// `[B, C]` weak-head logits when the spec has a weak head.
    pub weak_logits: Option<NodeId>,
    params: Vec<NodeId>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        self.tape.value(self.logits)
    }

    pub fn weak(&self) -> Option<&[f64]> {
        self.weak_logits.map(|id| self.tape.value(id))
    }

    pub fn tap_value(&self) -> &[f64] {
        self.tape.value(self.tap)
    }

    pub fn param_node(&self, slot: usize) -> NodeId {
        self.params[slot]
    }

    /// Backpropagates adjoints of the final and weak logits; returns one
    /// gradient per parameter, zero where nothing flowed.
    pub fn backward(&self, d_logits: Vec<f64>, d_weak: Option<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let mut seeds = vec![(self.logits, d_logits)];
        if let (Some(id), Some(g)) = (self.weak_logits, d_weak) {
            seeds.push((id, g));
        }
        let grads = self.tape.backward_from(&seeds)?;
        Ok(self.param_grads(&grads))
    }

    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&id| grads.get_or_zero(id, self.tape.value(id).len()))
            .collect()
    }
}

/// Runs the network on a `[B, C_in, H, W]` batch, recording a tape for a
/// joint backward through the final and weak logits. With
/// `stop_weak_grad` the weak head reads a detached copy of the tap.
pub fn forward_with_tap(
    spec: &NetSpec,
    params: &ParamSet,
    input: &[f64],
    batch: usize,
    stop_weak_grad: bool,
) -> Result<Forward> {
    params.check_layout(spec)?;
    if batch == 0 || input.len() != batch * spec.input.len() {
        return Err(Error::usage(format!(
            "input of {} values is not a batch of {} images of shape {:?}",
            input.len(),
            batch,
            spec.input
        )));
    }
    let mut tape = TapeGraph::new();
    let mut nodes = Vec::with_capacity(params.len());
    for (slot, p) in params.params.iter().enumerate() {
        nodes.push(tape.param(slot, p.value.clone(), p.shape.clone())?);
    }
    let s = spec.input;
    let x = tape.leaf(input.to_vec(), vec![batch, s.channels, s.height, s.width])?;
    let mut slot = 0;
    let mut next = || {
        let pair = (nodes[slot], nodes[slot + 1]);
        slot += 2;
        pair
    };
    let (tap, pooled) = match spec.kind {
        NetKind::Cnn2stage => {
            let mut h = x;
            let mut tap = h;
            for stage in 0..spec.widths.len() {
                let (w, b) = next();
                let c = tape.conv3x3(h, w, b)?;
                let r = tape.relu(c);
                h = tape.pool2x2(r, spec.pool)?;
                if stage == spec.tap_stage {
                    tap = h;
                }
            }
            let g = tape.global_avg_pool(h)?;
            (tap, g)
        }
        NetKind::Mlp => {
            let mut h = tape.flatten(x)?;
            let mut tap = h;
            for stage in 0..spec.widths.len() {
                let (w, b) = next();
                let a = tape.affine(h, w, b)?;
                h = tape.relu(a);
                if stage == spec.tap_stage {
                    tap = h;
                }
            }
            (tap, h)
        }
    };
    let (w, b) = next();
    let logits = tape.affine(pooled, w, b)?;
    let weak_logits = if spec.weak_head {
        let (w, b) = next();
        let src = if stop_weak_grad { tape.detach(tap) } else { tap };
        let feat = match spec.kind {
            NetKind::Cnn2stage => tape.global_avg_pool(src)?,
            NetKind::Mlp => src,
        };
        Some(tape.affine(feat, w, b)?)
    } else {
        None
    };
    Ok(Forward {
        tape,
        logits,
        tap,
        weak_logits,
        params: nodes,
    })
}

/// Optimizer hyper-parameters and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "invalid optimizer settings lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: params.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        })
    }
}

/// `v <- m v + g + wd p; p <- p - lr v`. Rejects the whole step, leaving
/// parameters and buffers untouched, if any gradient is non-finite.
pub fn sgd_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len()
        || state.velocity.len() != params.len()
        || params
            .params
            .iter()
            .zip(grads)
            .zip(&state.velocity)
            .any(|((p, g), v)| p.value.len() != g.len() || v.len() != g.len())
    {
        return Err(Error::usage("gradients, buffers and parameters differ in shape"));
    }
    for (p, g) in params.params.iter().zip(grads) {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {} at element {k}",
                p.name
            )));
        }
    }
    for ((p, g), v) in params.params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, gv), vv) in p.value.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = state.momentum * *vv + gv + state.weight_decay * *pv;
            *pv -= state.lr * *vv;
        }
    }
    Ok(())
}

/// Step-decay learning rate: `base * gamma^(number of milestones <= epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.gamma.powi(k as i32)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c: usize, h: usize, w: usize) -> ImageShape {
        ImageShape { channels: c, height: h, width: w }
    }

    #[test]
    fn zero_weights_give_equal_logits() {
        let spec = NetSpec::cnn2stage(shape(1, 8, 8), [3, 4], 5, true);
        let mut p = init_params(&spec, 1);
        for q in &mut p.params {
            q.value.fill(0.0);
        }
        let f = forward_with_tap(&spec, &p, &[0.3; 128], 2, true).unwrap();
        assert!(f.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let spec = NetSpec::mlp(shape(1, 1, 2), &[], 2, false);
        let p = ParamSet {
            params: vec![
                Param { name: "fc.weight".into(), shape: vec![2, 2], value: vec![1.0, 2.0, 3.0, 4.0] },
                Param { name: "fc.bias".into(), shape: vec![2], value: vec![0.5, -0.5] },
            ],
        };
        let f = forward_with_tap(&spec, &p, &[1.0, -1.0], 1, true).unwrap();
        assert_eq!(f.logits(), &[-0.5, -1.5]);
    }

    #[test]
    fn init_is_reproducible() {
        let spec = NetSpec::cnn2stage(shape(1, 8, 8), [4, 8], 10, true);
        assert_eq!(init_params(&spec, 3), init_params(&spec, 3));
        assert_ne!(init_params(&spec, 3), init_params(&spec, 4));
        assert!(init_params(&spec, 3).get("stage2.bias").unwrap().value.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn he_variance() {
        let spec = NetSpec::mlp(shape(1, 1, 50), &[2000], 2, false);
        let p = init_params(&spec, 11);
        let w = &p.get("hidden1.weight").unwrap().value;
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 50.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn head_variance() {
        let spec = NetSpec::mlp(shape(1, 1, 4), &[100], 1000, false);
        let p = init_params(&spec, 12);
        let w = &p.get("fc.weight").unwrap().value;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let spec = NetSpec::cnn2stage(shape(1, 8, 8), [2, 2], 3, false);
        let p = init_params(&spec, 0);
        assert!(matches!(forward_with_tap(&spec, &p, &[0.0; 10], 1, true), Err(Error::Usage(_))));
    }

    fn one_param(v: f64) -> ParamSet {
        ParamSet { params: vec![Param { name: "w".into(), shape: vec![1], value: vec![v] }] }
    }

    #[test]
    fn plain_sgd() {
        let mut p = one_param(1.0);
        let mut s = OptimState::new(&p, 0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &[vec![2.0]], &mut s).unwrap();
        assert!((p.params[0].value[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut p, &[vec![0.0]], &mut s).unwrap();
        assert!((p.params[0].value[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_closed_form() {
        let mut p = one_param(0.0);
        let mut s = OptimState::new(&p, 0.1, 0.9, 0.0).unwrap();
        for _ in 0..2 {
            sgd_step(&mut p, &[vec![1.0]], &mut s).unwrap();
        }
        assert!((p.params[0].value[0] + 0.1 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = one_param(1.0);
        let mut s = OptimState::new(&p, 0.1, 0.9, 0.0).unwrap();
        assert!(sgd_step(&mut p, &[vec![f64::NAN]], &mut s).is_err());
        assert_eq!(p.params[0].value[0], 1.0);
        assert_eq!(s.velocity[0][0], 0.0);
    }

    #[test]
    fn step_decay() {
        let s = StepDecay { base_lr: 0.1, gamma: 0.1, milestones: vec![2, 4] };
        assert_eq!(s.lr(0), 0.1);
        assert!((s.lr(2) - 0.01).abs() < 1e-15);
        assert!((s.lr(5) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
