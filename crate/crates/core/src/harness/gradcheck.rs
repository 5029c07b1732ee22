//! Analytic versus central-difference gradients of a recipe's objective,
//! through the network, with self-distillation labels frozen.

use rand::Rng;

use super::config::{ExperimentConfig, Recipe};
use super::train::{BatchLoss, Components, Trainer};
use crate::data::{batches, BatchPlan};
use crate::error::Result;
use crate::nets::{forward_with_tap, ParamSet};
use crate::numkit::relative_error;
use crate::seed::{self, Purpose};
use crate::uskd::{build_soft_labels, uskd_total_loss, SoftLabelSet, UskdSampleState};

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub recipe: Recipe,
    pub param_coordinates: usize,
    pub logit_coordinates: usize,
    pub max_param_rel_err: f64,
    pub max_logit_rel_err: f64,
    /// Parameter name and element index of the largest parameter error.
    pub worst_param: (String, usize),
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_param_rel_err.max(self.max_logit_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= GRADCHECK_TOL
    }
}

/// Builds a trainer from `cfg` and checks `samples` parameter and `samples`
/// logit coordinates on a batch of up to 8 training samples.
pub fn gradcheck(cfg: &ExperimentConfig, samples: usize) -> Result<GradcheckReport> {
    let trainer = Trainer::new(cfg)?;
    gradcheck_trainer(&trainer, samples)
}

struct Frozen<'a> {
    trainer: &'a Trainer,
    indices: Vec<usize>,
    targets: Vec<usize>,
    input: Vec<f64>,
    labels: Option<Vec<SoftLabelSet>>,
}

impl Frozen<'_> {
    fn objective(&self, logits: &[f64], weak: Option<&[f64]>) -> Result<BatchLoss> {
        let Some(labels) = &self.labels else {
            return self.trainer.loss_from_logits(logits, weak, &self.targets, &self.indices);
        };
        let c = self.trainer.spec.classes;
        let weak = weak.expect("self-distillation student has a weak head");
        let inv = 1.0 / self.targets.len() as f64;
        let mut out = BatchLoss {
            loss: 0.0,
            components: Components::default(),
            d_logits: Vec::with_capacity(logits.len()),
            d_weak: Some(Vec::with_capacity(weak.len())),
        };
        for (n, &t) in self.targets.iter().enumerate() {
            let r = uskd_total_loss(
                &UskdSampleState {
                    student_logits: &logits[n * c..(n + 1) * c],
                    weak_logits: &weak[n * c..(n + 1) * c],
                    target: t,
                    v_t: 1.0,
                    labels: &labels[n],
                },
                &self.trainer.cfg.uskd,
            )?;
            out.loss += inv * r.value();
            out.components.l_weak += inv * r.components.l_weak;
            out.d_logits.extend(r.student.grad_student_logits.iter().map(|g| g * inv));
            out.d_weak
                .as_mut()
                .expect("set above")
                .extend(r.grad_weak_logits.iter().map(|g| g * inv));
        }
        Ok(out)
    }

    /// Loss of sample `n` alone, with its labels frozen.
    fn sample_value(&self, n: usize, logits: &[f64], weak: Option<&[f64]>) -> Result<f64> {
        match &self.labels {
            None => Ok(self
                .trainer
                .loss_from_logits(logits, weak, &self.targets[n..=n], &self.indices[n..=n])?
                .loss),
            Some(labels) => Ok(uskd_total_loss(
                &UskdSampleState {
                    student_logits: logits,
                    weak_logits: weak.expect("self-distillation student has a weak head"),
                    target: self.targets[n],
                    v_t: 1.0,
                    labels: &labels[n],
                },
                &self.trainer.cfg.uskd,
            )?
            .value()),
        }
    }

    /// Objective value at `params` as seen by parameter slot `slot`: with a
    /// detached tap, backbone slots do not see the auxiliary loss.
    fn value_at(&self, params: &ParamSet, slot: usize) -> Result<f64> {
        let t = self.trainer;
        let stop = t.cfg.uskd.stop_weak_grad;
        let f = forward_with_tap(&t.spec, params, &self.input, self.targets.len(), stop)?;
        let l = self.objective(f.logits(), f.weak())?;
        let weak_param = ParamSet::is_weak(&params.params[slot].name);
        Ok(if stop && !weak_param { l.loss - l.components.l_weak } else { l.loss })
    }
}

pub fn gradcheck_trainer(trainer: &Trainer, samples: usize) -> Result<GradcheckReport> {
    let cfg = &trainer.cfg;
    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size.min(8),
        epoch: 0,
    };
    let indices = batches(trainer.train.len(), plan)?.swap_remove(0);
    let (input, targets) = trainer.train.gather(&indices);
    let batch = targets.len();
    let base = forward_with_tap(&trainer.spec, &trainer.params, &input, batch, cfg.uskd.stop_weak_grad)?;
    let labels = if cfg.recipe == Recipe::Uskd {
        let c = trainer.spec.classes;
        let rows = |v: &[f64]| v.chunks_exact(c).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let weak = base.weak().expect("self-distillation student has a weak head");
        Some(build_soft_labels(
            &rows(base.logits()),
            &rows(weak),
            &targets,
            &vec![1.0; batch],
            &cfg.uskd,
            None,
        )?)
    } else {
        None
    };
    let frozen = Frozen {
        trainer,
        indices,
        targets,
        input,
        labels,
    };
    let loss = frozen.objective(base.logits(), base.weak())?;
    let grads = base.backward(loss.d_logits.clone(), loss.d_weak.clone())?;
    let mut rng = seed::stream(cfg.seed, Purpose::GradCheck, 0);

    let mut params = trainer.params.clone();
    let mut max_param = 0.0f64;
    let mut worst = (String::new(), 0);
    for k in 0..samples {
        let slot = k % params.len();
        let i = rng.gen_range(0..params.params[slot].value.len());
        let orig = params.params[slot].value[i];
        params.params[slot].value[i] = orig + FD_STEP;
        let up = frozen.value_at(&params, slot)?;
        params.params[slot].value[i] = orig - FD_STEP;
        let down = frozen.value_at(&params, slot)?;
        params.params[slot].value[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(grads[slot][i], fd);
        if err > max_param {
            max_param = err;
            worst = (params.params[slot].name.clone(), i);
        }
    }

    // each logit only enters its own sample's loss; differencing that term
    // alone avoids cancellation against the rest of the batch
    let c = trainer.spec.classes;
    let batch_inv = 1.0 / batch as f64;
    let logits = base.logits();
    let weak = base.weak();
    let mut max_logit = 0.0f64;
    for k in 0..samples {
        let on_weak = weak.is_some() && k % 2 == 1;
        let n = rng.gen_range(0..batch);
        let i = rng.gen_range(0..c);
        let z = &logits[n * c..(n + 1) * c];
        let w = weak.map(|w| &w[n * c..(n + 1) * c]);
        let eval = |delta: f64| -> Result<f64> {
            let (mut zz, mut ww) = (z.to_vec(), w.map(<[f64]>::to_vec));
            if on_weak {
                ww.as_mut().expect("checked")[i] += delta;
            } else {
                zz[i] += delta;
            }
            frozen.sample_value(n, &zz, ww.as_deref())
        };
        let fd = batch_inv * (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = if on_weak {
            loss.d_weak.as_ref().expect("weak gradient")[n * c + i]
        } else {
            loss.d_logits[n * c + i]
        };
        max_logit = max_logit.max(relative_error(analytic, fd));
    }

    Ok(GradcheckReport {
        recipe: cfg.recipe,
        param_coordinates: samples,
        logit_coordinates: samples,
        max_param_rel_err: max_param,
        max_logit_rel_err: max_logit,
        worst_param: worst,
    })
}
