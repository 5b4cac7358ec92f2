use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BnMode, ParamRole, Supernet};
use super::policy::{fairness_decay_mask, FreezeEntry, FreezeMask, Policy, PolicySampler, SamplerConfig};
use crate::autodiff::{cosine_lr, Sgd, Tape, Tensor};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::idm::{idm_loss, idm_site_selection, HeadVars, IdmConfig};
use crate::scheduler::{apply_schedule, CriterionReport, Schedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Decay latent weights only on max-bit samples.
    pub fairness: bool,
    /// Seed for weight initialization.
    pub init_seed: u64,
    /// Seed for the per-epoch data order.
    pub data_seed: u64,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub idm: IdmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 2.5e-5,
            warmup_epochs: 5,
            fairness: true,
            init_seed: 0,
            data_seed: 0,
            sampler: SamplerConfig::default(),
            schedule: ScheduleConfig {
                enabled: true,
                ..Default::default()
            },
            idm: IdmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("need lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        self.sampler.validate()?;
        self.idm.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyLoss {
    pub policy: Policy,
    pub loss: f64,
    /// True for the all-max-bit reference pass.
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: Vec<PolicyLoss>,
    /// Mean task loss over the contributing passes.
    pub mean_loss: f64,
    /// `(layer, loss)` for every active alignment site.
    pub idm: Vec<(usize, f64)>,
    pub frozen: Vec<FreezeEntry>,
    pub criterion: Option<CriterionReport>,
}

/// Single-threaded supernet trainer.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Supernet,
    pub optimizer: Sgd<f32>,
    pub sampler: PolicySampler,
    pub mask: FreezeMask,
    config: TrainConfig,
    schedule: Option<Schedule>,
    step: u64,
    steps_per_epoch: u64,
    order: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    /// Prepares a trainer for `data`; activation step sizes are set from the
    /// first batch.
    pub fn new(mut model: Supernet, config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let spe = data.steps_per_epoch(config.batch_size) as u64;
        if spe == 0 {
            return Err(Error::Config(format!(
                "{} samples is less than one batch of {}",
                data.len(),
                config.batch_size
            )));
        }
        let first: Vec<usize> = (0..config.batch_size).collect();
        model.init_activation_scales(&data.batch(&first))?;
        let total = spe * config.epochs as u64;
        let free = model.space().free_layers().count();
        let schedule = if config.schedule.enabled {
            Some(config.schedule.resolve(free, total, spe)?)
        } else {
            None
        };
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let optimizer = Sgd::new(
            config.momentum as f32,
            config.weight_decay as f32,
            shapes.iter().map(Vec::as_slice),
        );
        let sampler = PolicySampler::new(config.sampler.clone())?;
        Ok(Trainer {
            model,
            optimizer,
            sampler,
            mask: FreezeMask::new(),
            config,
            schedule,
            step: 0,
            steps_per_epoch: spe,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        self.schedule.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Restores the counters of a checkpointed run.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
        self.order = None;
    }

    fn next_batch(&mut self, data: &Dataset) -> Batch {
        let epoch = (self.step / self.steps_per_epoch) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.data_seed);
            rng.set_stream(epoch as u64);
            self.order = Some((epoch, data.epoch_batches(self.config.batch_size, &mut rng)));
        }
        let (_, order) = self.order.as_ref().expect("just set");
        data.batch(&order[(self.step % self.steps_per_epoch) as usize])
    }

    /// One optimizer step on the next batch with freshly sampled policies.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let batch = self.next_batch(data);
        let criterion = match &self.schedule {
            Some(s) => apply_schedule(&self.model, &mut self.mask, self.step, s)?,
            None => None,
        };
        self.mask.purge(self.step);
        let policies = (0..self.config.sampler.mc_samples)
            .map(|_| self.sampler.sample(self.model.space(), &self.mask))
            .collect::<Result<Vec<_>>>()?;
        let mut m = self.step_on(&batch, &policies)?;
        m.criterion = criterion;
        Ok(m)
    }

    /// Runs the remaining steps of the current epoch.
    pub fn train_epoch(&mut self, data: &Dataset, mut log: impl FnMut(&StepMetrics)) -> Result<()> {
        let end = ((self.step / self.steps_per_epoch) + 1) * self.steps_per_epoch;
        while self.step < end.min(self.total_steps()) {
            let m = self.train_step(data)?;
            log(&m);
        }
        Ok(())
    }

    /// One optimizer step on `batch` for the given sampled policies (plus the
    /// reference policy when configured).
    pub fn step_on(&mut self, batch: &Batch, sampled: &[Policy]) -> Result<StepMetrics> {
        let space = self.model.space().clone();
        let max_policy = space.max_policy();
        let include_max = self.config.sampler.include_max_policy;
        let idm_cfg = self.config.idm.clone();
        let use_idm = idm_cfg.enabled && idm_cfg.beta > 0.0;
        let n_terms = (sampled.len() + usize::from(include_max)) as f32;
        let lr = cosine_lr(
            self.step,
            self.total_steps(),
            self.config.lr,
            self.config.warmup_epochs as u64 * self.steps_per_epoch,
        )?;

        let n_params = self.model.params().len();
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n_params];
        let mut losses = Vec::new();
        let mut idm_values = Vec::new();
        let mut all_stats = Vec::new();
        let mut fairness_sum = vec![0.0f64; space.len()];

        let mut reference_outputs: Option<Vec<Tensor<f32>>> = None;
        if include_max || use_idm {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, include_max);
            let x = tape.constant(batch.images.clone());
            let out = self.model.forward(&mut tape, &vars, Some(&max_policy), x, BnMode::Batch)?;
            let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
            let lv = check_loss(tape.value(loss).item()? as f64, &max_policy)?;
            reference_outputs = Some(out.outputs.iter().map(|&v| tape.value(v).clone()).collect());
            if include_max {
                let scaled = tape.mul_scalar(loss, 1.0 / n_terms);
                accumulate(&mut grads, &vars, tape.backward(scaled)?)?;
                losses.push(PolicyLoss {
                    policy: max_policy.clone(),
                    loss: lv,
                    reference: true,
                });
                add_mask(&mut fairness_sum, &fairness_decay_mask(&space, &max_policy));
                all_stats.push(out.batch_stats);
            }
        }

        for policy in sampled {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let x = tape.constant(batch.images.clone());
            let out = self.model.forward(&mut tape, &vars, Some(policy), x, BnMode::Batch)?;
            let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
            let lv = check_loss(tape.value(loss).item()? as f64, policy)?;
            let mut total = tape.mul_scalar(loss, 1.0 / n_terms);
            if use_idm {
                let refs = reference_outputs.as_ref().expect("reference forward ran");
                for layer in space.free_layers() {
                    if !idm_site_selection(&space, &self.mask, policy, layer) {
                        continue;
                    }
                    let slots = self.model.slots(layer).idm.expect("free layers carry a head");
                    let head = HeadVars {
                        eta_s: vars[slots.eta_s],
                        xi_s: vars[slots.xi_s],
                        eta_h: vars[slots.eta_h],
                        xi_h: vars[slots.xi_h],
                    };
                    let target = tape.constant(refs[layer].clone());
                    let d = idm_loss(&mut tape, out.outputs[layer], target, &head, &idm_cfg)?;
                    let dv = tape.value(d).item()? as f64;
                    if !dv.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite alignment loss at layer {layer} under {policy}"
                        )));
                    }
                    idm_values.push((layer, dv));
                    let weighted = tape.mul_scalar(d, (idm_cfg.beta / n_terms as f64) as f32);
                    total = tape.add(total, weighted)?;
                }
            }
            accumulate(&mut grads, &vars, tape.backward(total)?)?;
            losses.push(PolicyLoss {
                policy: policy.clone(),
                loss: lv,
                reference: false,
            });
            add_mask(&mut fairness_sum, &fairness_decay_mask(&space, policy));
            all_stats.push(out.batch_stats);
        }

        let contributing = losses.len().max(1) as f64;
        let decay: Vec<f32> = self
            .model
            .param_info()
            .iter()
            .map(|info| match info.role {
                ParamRole::Weight if self.config.fairness => (fairness_sum[info.layer] / contributing) as f32,
                ParamRole::Weight => 1.0,
                _ => 0.0,
            })
            .collect();
        let grads: Vec<Option<Tensor<f32>>> = grads
            .into_iter()
            .zip(self.model.params())
            .map(|(g, p)| Some(g.unwrap_or_else(|| Tensor::zeros(p.shape()))))
            .collect();
        self.optimizer
            .step(lr as f32, self.model.params_mut(), &grads, &decay)?;
        self.model.clamp_scales();
        for stats in &all_stats {
            self.model.update_running(stats);
        }

        let mean_loss = losses.iter().map(|l| l.loss).sum::<f64>() / contributing;
        let m = StepMetrics {
            step: self.step,
            epoch: (self.step / self.steps_per_epoch) as usize,
            lr,
            losses,
            mean_loss,
            idm: idm_values,
            frozen: self.mask.entries().to_vec(),
            criterion: None,
        };
        self.step += 1;
        Ok(m)
    }
}

fn check_loss(v: f64, policy: &Policy) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("loss is {v} under policy {policy}")))
    }
}

fn add_mask(acc: &mut [f64], mask: &[f64]) {
    acc.iter_mut().zip(mask).for_each(|(a, m)| *a += m);
}

fn accumulate(
    acc: &mut [Option<Tensor<f32>>],
    vars: &[crate::autodiff::Var],
    mut g: crate::autodiff::Gradients<f32>,
) -> Result<()> {
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if let Some(t) = g.take(v) {
            match slot {
                Some(s) => s.add_assign(&t)?,
                None => *slot = Some(t),
            }
        }
    }
    Ok(())
}
