//! Training loop for every recipe, with a step-level API.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use log::info;

use super::config::{ExperimentConfig, Recipe, TeacherSource};
use super::metrics::{MetricsRow, MetricsWriter, TimingRow};
use crate::data::{batches, BatchPlan, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::kd::{ce_from_logits, dkd_from_logits, kd_from_logits, nkd_core, nkd_from_logits, LossResult};
use crate::nets::{
    argmax, forward_with_tap, init_params, load_checkpoint, save_checkpoint, sgd_step, Checkpoint, NetSpec,
    OptimState, ParamSet, StepDecay,
};
use crate::numkit::{log_softmax_scaled, softmax_scaled};
use crate::uskd::{uskd_batch_loss, SmoothVariant};

/// Loss components of one batch; see the README for their meaning per recipe.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub l_ori: f64,
    pub l_target: f64,
    pub l_non: f64,
    pub l_weak: f64,
}

/// Batch-mean loss, its components and gradients of that mean.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub components: Components,
    pub d_logits: Vec<f64>,
    pub d_weak: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum Teacher {
    Network {
        spec: NetSpec,
        params: ParamSet,
        /// Training images normalized with the teacher's own statistics.
        train: Dataset,
    },
    OneHot,
}

impl Teacher {
    /// Teacher logits for the selected training samples, `None` for one-hot.
    fn logits(&self, indices: &[usize], eval_batch: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Teacher::OneHot => Ok(None),
            Teacher::Network { spec, params, train } => {
                let mut out = Vec::with_capacity(indices.len() * spec.classes);
                for chunk in indices.chunks(eval_batch) {
                    let (x, _) = train.gather(chunk);
                    out.extend_from_slice(forward_with_tap(spec, params, &x, chunk.len(), true)?.logits());
                }
                Ok(Some(out))
            }
        }
    }
}

/// Seconds spent in one epoch's training steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub components: Components,
    pub seconds: f64,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub spec: NetSpec,
    pub params: ParamSet,
    pub opt: OptimState,
    pub schedule: StepDecay,
    pub teacher: Option<Teacher>,
    pub normalization: Normalization,
    /// Normalized training split.
    pub train: Dataset,
    /// Normalized test split.
    pub test: Dataset,
}

fn one_hot_kd(student_logits: &[f64], target: usize, scale: f64, weight: f64) -> LossResult {
    let log_s = log_softmax_scaled(student_logits, scale);
    let mut grad: Vec<f64> = log_s.iter().map(|l| weight * scale * l.exp()).collect();
    grad[target] -= weight * scale;
    LossResult {
        value: -weight * log_s[target],
        grad_student_logits: grad,
        clamped: false,
    }
}

impl Trainer {
    /// Loads data and teacher from the config.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = cfg.dataset.load(cfg.seed)?;
        Self::with_data(cfg, train, test)
    }

    /// Builds a trainer over already loaded raw splits.
    pub fn with_data(cfg: &ExperimentConfig, train_raw: Dataset, test_raw: Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.batch_size > train_raw.len() {
            return Err(Error::config(format!(
                "batch size {} exceeds {} training samples",
                cfg.batch_size,
                train_raw.len()
            )));
        }
        let spec = cfg
            .model
            .spec(train_raw.shape, cfg.dataset.classes, cfg.recipe == Recipe::Uskd);
        spec.validate()?;
        let normalization = Normalization::fit(&train_raw);
        let teacher = Self::load_teacher(cfg, &train_raw, &spec)?;
        let params = init_params(&spec, cfg.seed);
        let o = &cfg.optimizer;
        let opt = OptimState::new(&params, o.lr, o.momentum, o.weight_decay)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            schedule: StepDecay {
                base_lr: o.lr,
                gamma: o.lr_decay,
                milestones: o.milestones.clone(),
            },
            spec,
            params,
            opt,
            teacher,
            train: train_raw.normalized(&normalization),
            test: test_raw.normalized(&normalization),
            normalization,
        })
    }

    fn load_teacher(cfg: &ExperimentConfig, train_raw: &Dataset, student: &NetSpec) -> Result<Option<Teacher>> {
        let passthrough = cfg.recipe == Recipe::Uskd && cfg.uskd.smooth_variant == SmoothVariant::TeacherPassthrough;
        if !cfg.recipe.needs_teacher() && !passthrough {
            return Ok(None);
        }
        let tc = cfg.teacher.as_ref().expect("validated");
        match tc.source {
            TeacherSource::OneHot => Ok(Some(Teacher::OneHot)),
            TeacherSource::Checkpoint => {
                let path = tc.checkpoint.as_ref().expect("validated");
                if !path.exists() {
                    return Err(Error::config(format!("teacher checkpoint {} not found", path.display())));
                }
                let ck = load_checkpoint(path)
                    .map_err(|e| Error::config(format!("teacher checkpoint {}: {e}", path.display())))?;
                if ck.spec.classes != student.classes || ck.spec.input != student.input {
                    return Err(Error::config("teacher and student disagree on classes or input shape"));
                }
                Ok(Some(Teacher::Network {
                    train: train_raw.normalized(&ck.normalization),
                    spec: ck.spec,
                    params: ck.params,
                }))
            }
        }
    }

    /// Loss and logit gradients for one batch of training indices at the
    /// current parameters. No parameter is modified.
    pub fn batch_loss(&self, indices: &[usize]) -> Result<(BatchLoss, crate::nets::Forward)> {
        let (x, targets) = self.train.gather(indices);
        let batch = indices.len();
        let fwd = forward_with_tap(&self.spec, &self.params, &x, batch, self.cfg.uskd.stop_weak_grad)?;
        let loss = self.loss_from_logits(fwd.logits(), fwd.weak(), &targets, indices)?;
        Ok((loss, fwd))
    }

    /// The recipe's objective on given student (and weak) logits.
    pub fn loss_from_logits(
        &self,
        logits: &[f64],
        weak: Option<&[f64]>,
        targets: &[usize],
        indices: &[usize],
    ) -> Result<BatchLoss> {
        let c = self.spec.classes;
        let batch = targets.len();
        let inv = 1.0 / batch as f64;
        let rows: Vec<&[f64]> = logits.chunks_exact(c).collect();
        let teacher_logits = match &self.teacher {
            Some(t) => t.logits(indices, self.cfg.eval_batch_size)?,
            None => None,
        };
        let trow = |n: usize| teacher_logits.as_ref().map(|t| &t[n * c..(n + 1) * c]);

        if self.cfg.recipe == Recipe::Uskd {
            let s: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
            let w: Vec<Vec<f64>> = weak
                .ok_or_else(|| Error::usage("self-distillation needs weak-head logits"))?
                .chunks_exact(c)
                .map(<[f64]>::to_vec)
                .collect();
            let external: Option<Vec<f64>> = (0..batch)
                .map(|n| trow(n).map(|t| softmax_scaled(t, 1.0)[targets[n]]))
                .collect();
            let v_t = vec![1.0; batch];
            let r = uskd_batch_loss(&s, &w, targets, &v_t, &self.cfg.uskd, external.as_deref())?;
            return Ok(BatchLoss {
                loss: r.value,
                components: Components {
                    l_ori: r.components.l_ori,
                    l_target: r.components.l_target,
                    l_non: r.components.l_non,
                    l_weak: r.components.l_weak,
                },
                d_logits: r.grad_student_logits.concat(),
                d_weak: Some(r.grad_weak_logits.concat()),
            });
        }

        let mut out = BatchLoss {
            loss: 0.0,
            components: Components::default(),
            d_logits: Vec::with_capacity(logits.len()),
            d_weak: None,
        };
        for (n, (&z, &t)) in rows.iter().zip(targets).enumerate() {
            let ori = ce_from_logits(z, t, 1.0);
            let mut total = ori.clone();
            let (extra, l_target, l_non) = match self.cfg.recipe {
                Recipe::Baseline => (None, 0.0, 0.0),
                Recipe::Kd => {
                    let (r, p) = match trow(n) {
                        Some(tl) => kd_from_logits(tl, z, t, &self.cfg.kd),
                        None => {
                            let lam = self.cfg.kd.lambda;
                            let r = one_hot_kd(z, t, self.cfg.kd.logit_scale(), lam * lam);
                            let v = r.value;
                            (r, crate::kd::KdParts { target: v, nontarget: 0.0 })
                        }
                    };
                    (Some(r), p.target, p.nontarget)
                }
                Recipe::Nkd => {
                    let (r, p) = match trow(n) {
                        Some(tl) => nkd_from_logits(tl, z, t, &self.cfg.kd),
                        None => {
                            if self.cfg.kd.gamma != 0.0 {
                                return Err(Error::DegenerateTarget { target: t, mass: 1.0 });
                            }
                            nkd_core(1.0, None, z, t, &self.cfg.kd)
                        }
                    };
                    let k = &self.cfg.kd;
                    (Some(r), p.target, k.gamma * k.lambda * k.lambda * p.nontarget)
                }
                Recipe::Dkd => {
                    let tl = trow(n).ok_or(Error::DegenerateTarget { target: t, mass: 1.0 })?;
                    let (r, p) = dkd_from_logits(tl, z, t, &self.cfg.dkd);
                    (Some(r), self.cfg.dkd.alpha_dkd * p.tckd, self.cfg.dkd.beta_dkd * p.nckd)
                }
                Recipe::Uskd => unreachable!(),
            };
            if let Some(e) = &extra {
                total.add_scaled(e, 1.0);
            }
            out.loss += total.value;
            out.components.l_ori += ori.value;
            out.components.l_target += l_target;
            out.components.l_non += l_non;
            out.d_logits.extend(total.grad_student_logits.iter().map(|g| g * inv));
        }
        out.loss *= inv;
        out.components.l_ori *= inv;
        out.components.l_target *= inv;
        out.components.l_non *= inv;
        Ok(out)
    }

    /// One optimizer step on the given training indices; returns the
    /// pre-update batch loss.
    pub fn step(&mut self, indices: &[usize]) -> Result<BatchLoss> {
        let (loss, fwd) = self.batch_loss(indices)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = fwd.backward(loss.d_logits.clone(), loss.d_weak.clone())?;
        sgd_step(&mut self.params, &grads, &mut self.opt)?;
        Ok(loss)
    }

    /// One pass over the shuffled training split.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        self.opt.lr = self.schedule.lr(epoch.saturating_sub(1));
        let plan = BatchPlan {
            seed: self.cfg.seed,
            batch_size: self.cfg.batch_size,
            epoch: epoch as u64,
        };
        let start = Instant::now();
        let mut acc = Accumulator::default();
        for (k, b) in batches(self.train.len(), plan)?.iter().enumerate() {
            let l = self.step(b).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::Numerical(format!("{what} is non-finite at epoch {epoch}, step {k}"))
                }
                Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, step {k}")),
                other => other,
            })?;
            acc.add(&l, b.len());
        }
        Ok(acc.finish(start.elapsed().as_secs_f64()))
    }

    /// Mean loss over the training split without updating, batched as in `epoch`.
    pub fn evaluate_train_loss(&self, epoch: usize) -> Result<EpochStats> {
        let plan = BatchPlan {
            seed: self.cfg.seed,
            batch_size: self.cfg.batch_size,
            epoch: epoch as u64,
        };
        let start = Instant::now();
        let mut acc = Accumulator::default();
        for b in batches(self.train.len(), plan)? {
            acc.add(&self.batch_loss(&b)?.0, b.len());
        }
        Ok(acc.finish(start.elapsed().as_secs_f64()))
    }

    /// Top-1 accuracy in percent on the test split.
    pub fn test_top1(&self) -> Result<f64> {
        top1(&self.spec, &self.params, &self.test, self.cfg.eval_batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
            normalization: self.normalization.clone(),
        }
    }
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    loss: f64,
    c: Components,
}

impl Accumulator {
    fn add(&mut self, l: &BatchLoss, size: usize) {
        let w = size as f64;
        self.n += size;
        self.loss += w * l.loss;
        self.c.l_ori += w * l.components.l_ori;
        self.c.l_target += w * l.components.l_target;
        self.c.l_non += w * l.components.l_non;
        self.c.l_weak += w * l.components.l_weak;
    }

    fn finish(self, seconds: f64) -> EpochStats {
        let inv = 1.0 / self.n as f64;
        EpochStats {
            loss: self.loss * inv,
            components: Components {
                l_ori: self.c.l_ori * inv,
                l_target: self.c.l_target * inv,
                l_non: self.c.l_non * inv,
                l_weak: self.c.l_weak * inv,
            },
            seconds,
        }
    }
}

/// Percentage of samples whose argmax logit (lowest index on ties) is the label.
pub fn top1(spec: &NetSpec, params: &ParamSet, data: &Dataset, eval_batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(eval_batch.max(1)) {
        let (x, y) = data.gather(chunk);
        let f = forward_with_tap(spec, params, &x, chunk.len(), true)?;
        correct += f
            .logits()
            .chunks_exact(spec.classes)
            .zip(&y)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Top-1 of a checkpoint on raw images, normalized with the checkpoint's stats.
pub fn eval_checkpoint(ck: &Checkpoint, raw: &Dataset, eval_batch: usize) -> Result<f64> {
    if raw.num_classes() != ck.spec.classes {
        return Err(Error::config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            ck.spec.classes,
            raw.num_classes()
        )));
    }
    if raw.shape != ck.spec.input {
        return Err(Error::config(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            ck.spec.input, raw.shape
        )));
    }
    top1(&ck.spec, &ck.params, &raw.normalized(&ck.normalization), eval_batch)
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_row: MetricsRow,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains to completion, writing `metrics.csv`, `timing.csv`,
/// `config.toml` and `final.ckpt` into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let trainer = Trainer::new(cfg)?;
    run_with(trainer)
}

pub fn run_with(mut trainer: Trainer) -> Result<RunSummary> {
    let cfg = trainer.cfg.clone();
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut timing = MetricsWriter::create_timing(&out.join("timing.csv"))?;

    let stats0 = trainer.evaluate_train_loss(0)?;
    let mut row = make_row(&cfg, 0, &stats0, trainer.test_top1()?, 0.0);
    metrics.write(&row)?;
    for epoch in 1..=cfg.epochs {
        let stats = trainer.train_epoch(epoch)?;
        let top1 = trainer.test_top1()?;
        row = make_row(&cfg, epoch, &stats, top1, stats.seconds);
        info!(
            "{} seed {} epoch {epoch}: loss {:.4} top1 {:.2} ({:.1}s)",
            cfg.recipe.as_str(),
            cfg.seed,
            stats.loss,
            top1,
            stats.seconds
        );
        metrics.write(&row)?;
        timing.write_timing(&TimingRow {
            epoch,
            recipe: cfg.recipe,
            seed: cfg.seed,
            train_seconds: stats.seconds,
        })?;
    }
    metrics.flush()?;
    timing.flush()?;
    let checkpoint_path = out.join("final.ckpt");
    save_checkpoint(&checkpoint_path, &trainer.checkpoint())?;
    Ok(RunSummary {
        final_row: row,
        metrics_path,
        checkpoint_path,
    })
}

fn make_row(cfg: &ExperimentConfig, epoch: usize, s: &EpochStats, top1: f64, seconds: f64) -> MetricsRow {
    MetricsRow {
        epoch,
        recipe: cfg.recipe,
        seed: cfg.seed,
        train_loss: s.loss,
        l_ori: s.components.l_ori,
        l_target: s.components.l_target,
        l_non: s.components.l_non,
        l_weak: s.components.l_weak,
        test_top1: top1,
        wall_seconds: if cfg.record_wall_clock { seconds } else { 0.0 },
    }
}
