//! Learn, round and fine-tune phases over a resumable training session.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bitloss::{bit_loss, compute_lambdas, total_loss, BitLossConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::{model_facts, Model};
use crate::optim::Sgd;
use crate::params::ParamKind;
use crate::persistence::{self, Checkpoint, RngState};
use crate::quantizer::{BitMode, QuantPlan, Role, N_MAX, N_MIN};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bitlengths_trainable: bool,
    /// Apply ceiling selection before the first epoch of this phase.
    #[serde(default)]
    pub round_before: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub phases: Vec<PhaseSpec>,
    pub seed: u64,
    pub batch_size: usize,
    /// Validate every this many epochs (and at the end of each phase).
    pub eval_every: usize,
    /// Fractions of a phase after which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Learning-rate multiplier for bitlength parameters.
    pub bits_lr_mult: f64,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !self.bits_lr_mult.is_finite() || self.bits_lr_mult < 0.0 {
            return Err(Error::Config("bits_lr_mult must be >= 0".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr_milestones must lie in [0, 1]".into()));
        }
        let mut rounded = false;
        for p in &self.phases {
            if !p.lr.is_finite() || p.lr < 0.0 {
                return Err(Error::Config(format!(
                    "phase `{}`: lr must be >= 0",
                    p.name
                )));
            }
            if !(0.0..1.0).contains(&p.momentum) || p.weight_decay.is_nan() || p.weight_decay < 0.0
            {
                return Err(Error::Config(format!(
                    "phase `{}`: momentum must be in [0, 1) and weight_decay >= 0",
                    p.name
                )));
            }
            rounded |= p.round_before;
            if rounded && p.bitlengths_trainable {
                return Err(Error::Config(format!(
                    "phase `{}` trains bitlengths after they were rounded",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate for `epoch` (0-based) of `phase`.
    pub fn lr_at(&self, phase: usize, epoch: usize) -> f64 {
        let p = &self.phases[phase];
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * p.epochs as f64).floor() as usize && m > 0.0)
            .count();
        p.lr * self.lr_decay.powi(passed as i32)
    }

    fn epoch_offset(&self, phase: usize) -> usize {
        self.phases[..phase].iter().map(|p| p.epochs).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePosition {
    pub phase: usize,
    /// Completed epochs within `phase`.
    pub epoch: usize,
    /// Completed optimizer steps over the whole run.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub global_epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub bit_loss: f64,
    pub val_accuracy: Option<f64>,
    pub bits: BTreeMap<String, f64>,
    pub mean_weight_bits: Option<f64>,
    pub mean_activation_bits: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingEvent {
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, u32>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Accuracy at the learned real bitlengths.
    pub accuracy_real: f64,
    /// Accuracy immediately after ceiling selection.
    pub accuracy_rounded: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub name: String,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub final_task_loss: Option<f64>,
    pub mean_weight_bits: Option<f64>,
    pub mean_activation_bits: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub position: SchedulePosition,
    pub rounded: bool,
    pub records: Vec<EpochRecord>,
    pub phases: Vec<PhaseResult>,
    pub rounding: Option<RoundingEvent>,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub quantized: bool,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub phases: Vec<PhaseResult>,
    pub rounding: Option<RoundingEvent>,
    pub bits: BTreeMap<String, f64>,
    pub mean_bits: Option<f64>,
    pub mean_weight_bits: Option<f64>,
    pub mean_activation_bits: Option<f64>,
}

/// Top-1 accuracy with fake quantization at the learned real bitlengths or
/// at their ceilings.
pub fn evaluate(
    model: &Model,
    plan: Option<&QuantPlan>,
    data: &Dataset,
    use_integer_n: bool,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mode = if use_integer_n {
        BitMode::Integer
    } else {
        BitMode::Learned
    };
    let mut correct = 0usize;
    for (x, y) in batches(data, EVAL_BATCH, 0, 0, false) {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.forward(&mut tape, xv, plan.map(|p| (p, mode)))?;
        let out = tape.value(logits);
        let classes = out.shape()[1];
        for (row, &label) in out.data().chunks_exact(classes).zip(&y) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Replaces every bitlength by its ceiling (clipped to `[1, N_MAX]`) and
/// freezes it.
pub fn round_bitlengths(model: &mut Model, plan: &QuantPlan) -> BTreeMap<String, u32> {
    plan.groups
        .iter()
        .map(|g| {
            let n = model.params().bits(g.bits).ceil().clamp(N_MIN, N_MAX);
            model.params_mut().set_bits(g.bits, n);
            model.params_mut().get_mut(g.bits).frozen = true;
            (g.id.clone(), n as u32)
        })
        .collect()
}

/// Sets the loss weights of `plan` from the configured scheme.
pub fn assign_lambdas(model: &Model, plan: &mut QuantPlan, bitloss: &BitLossConfig) -> Result<()> {
    let facts = model_facts(model, plan, bitloss.footprint_batch_size);
    let lambdas = compute_lambdas(&plan.groups, &facts, bitloss)?;
    plan.set_lambdas(&lambdas)
}

/// Model, data and optimizer state for one run, advanced an epoch at a
/// time so it can be checkpointed and resumed at any epoch boundary.
pub struct Session {
    pub model: Model,
    pub plan: Option<QuantPlan>,
    pub schedule: TrainingSchedule,
    pub bitloss: BitLossConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub optimizer: Sgd,
    pub state: TrainState,
    pub config_hash: String,
    pub out_dir: Option<PathBuf>,
}

impl Session {
    /// Starts a run. Loss weights are computed for `plan` here.
    pub fn new(
        model: Model,
        mut plan: Option<QuantPlan>,
        schedule: TrainingSchedule,
        bitloss: BitLossConfig,
        train: Dataset,
        eval: Dataset,
    ) -> Result<Self> {
        schedule.validate()?;
        bitloss.validate()?;
        if let Some(p) = plan.as_mut() {
            assign_lambdas(&model, p, &bitloss)?;
        }
        let mut model = model;
        for (_, p) in model.params_mut().iter_mut() {
            if p.kind == ParamKind::Bitlength {
                p.lr_mult = schedule.bits_lr_mult;
            }
        }
        let first = &schedule.phases[0];
        let optimizer = Sgd::new(first.momentum, first.weight_decay);
        Ok(Self {
            model,
            plan,
            schedule,
            bitloss,
            train,
            eval,
            optimizer,
            state: TrainState::default(),
            config_hash: String::new(),
            out_dir: None,
        })
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        self.out_dir = Some(dir.into());
        self.config_hash = config_hash.into();
        self
    }

    /// Continues a run from a checkpoint. The schedule may differ from the
    /// one the checkpoint was written under (e.g. a separate fine-tune).
    pub fn resume(
        ckpt: &Checkpoint,
        schedule: TrainingSchedule,
        train: Dataset,
        eval: Dataset,
    ) -> Result<Self> {
        schedule.validate()?;
        let (model, plan) = ckpt.restore_model()?;
        Ok(Self {
            model,
            plan,
            schedule,
            bitloss: ckpt.bitloss.clone(),
            train,
            eval,
            optimizer: ckpt.optimizer.clone(),
            state: ckpt.state.clone(),
            config_hash: ckpt.config_hash.clone(),
            out_dir: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let pos = self.state.position;
        let epoch = if pos.phase < self.schedule.phases.len() {
            self.schedule.epoch_offset(pos.phase) + pos.epoch
        } else {
            self.schedule.total_epochs()
        };
        Checkpoint::capture(
            &self.model,
            self.plan.as_ref(),
            &self.optimizer,
            &self.state,
            RngState {
                seed: self.schedule.seed,
                epoch,
            },
            &self.bitloss,
            &self.config_hash,
        )
    }

    pub fn is_finished(&self) -> bool {
        self.state.position.phase >= self.schedule.phases.len()
    }

    pub fn current_phase(&self) -> Option<&PhaseSpec> {
        self.schedule.phases.get(self.state.position.phase)
    }

    pub fn evaluate(&self, use_integer_n: bool) -> Result<f64> {
        evaluate(&self.model, self.plan.as_ref(), &self.eval, use_integer_n)
    }

    /// Ceiling selection with before/after accuracy. A no-op when already
    /// rounded or unquantized.
    pub fn round(&mut self) -> Result<Option<&RoundingEvent>> {
        if self.state.rounded {
            return Ok(self.state.rounding.as_ref());
        }
        let Some(plan) = self.plan.clone() else {
            self.state.rounded = true;
            return Ok(None);
        };
        let before = plan.bits(self.model.params());
        let accuracy_real = self.evaluate(false)?;
        let after = round_bitlengths(&mut self.model, &plan);
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = v.collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let accuracy_rounded = self.evaluate(false)?;
        self.state.rounded = true;
        self.state.rounding = Some(RoundingEvent {
            mean_before: mean(&mut before.values().copied()),
            mean_after: mean(&mut after.values().map(|&n| f64::from(n))),
            before,
            after,
            accuracy_real,
            accuracy_rounded,
        });
        Ok(self.state.rounding.as_ref())
    }

    fn start_phase(&mut self) -> Result<()> {
        let phase = self.schedule.phases[self.state.position.phase].clone();
        self.optimizer = Sgd::new(phase.momentum, phase.weight_decay);
        if phase.round_before {
            self.round()?;
        }
        let freeze = self.state.rounded || !phase.bitlengths_trainable;
        if let Some(plan) = &self.plan {
            for g in &plan.groups {
                self.model.params_mut().get_mut(g.bits).frozen = freeze;
            }
        }
        Ok(())
    }

    fn finish_phase(&mut self, accuracy: f64) -> Result<()> {
        let pos = self.state.position;
        let phase = &self.schedule.phases[pos.phase];
        let last = self.state.records.last().filter(|r| r.phase == phase.name);
        self.state.phases.push(PhaseResult {
            name: phase.name.clone(),
            epochs: phase.epochs,
            final_accuracy: accuracy,
            final_task_loss: last.map(|r| r.task_loss),
            mean_weight_bits: self.mean_bits(Role::Weights),
            mean_activation_bits: self.mean_bits(Role::Activations),
        });
        let name = phase.name.clone();
        self.state.position = SchedulePosition {
            phase: pos.phase + 1,
            epoch: 0,
            step: pos.step,
        };
        if let Some(dir) = self.out_dir.clone() {
            persistence::save(&self.checkpoint(), &dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    fn mean_bits(&self, role: Role) -> Option<f64> {
        self.plan
            .as_ref()
            .and_then(|p| p.mean_bits(self.model.params(), role))
    }

    fn current_bit_loss(&self) -> f64 {
        self.plan.as_ref().map_or(0.0, |plan| {
            plan.groups
                .iter()
                .map(|g| g.lambda * self.model.params().bits(g.bits).clamp(N_MIN, N_MAX))
                .sum::<f64>()
                * self.bitloss.gamma
        })
    }

    /// One optimizer step on a batch; returns the task loss.
    fn step(&mut self, x: Tensor, y: &[usize], lr: f64) -> Result<f64> {
        let step = self.state.position.step;
        let diverged = |tensor: String| Error::Divergence { step, tensor };
        self.model.params_mut().zero_grad();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = self.model.forward(
            &mut tape,
            xv,
            self.plan.as_ref().map(|p| (p, BitMode::Learned)),
        )?;
        let task = tape.softmax_cross_entropy(logits, y)?;
        let bits = match &self.plan {
            Some(plan) => bit_loss(&mut tape, self.model.params(), plan, self.bitloss.gamma),
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let total = total_loss(&mut tape, task, bits)?;
        let task_value = tape.value(task).item();
        if !task_value.is_finite() {
            return Err(diverged("task loss".into()));
        }
        if !tape.value(bits).item().is_finite() {
            return Err(diverged("bit loss".into()));
        }
        tape.backward_into(total, self.model.params_mut())?;
        for (_, p) in self.model.params().iter() {
            if p.grad.as_ref().is_some_and(|g| !g.all_finite()) {
                return Err(diverged(format!("gradient of {}", p.name)));
            }
        }
        self.optimizer.step(self.model.params_mut(), lr)?;
        if let Some(plan) = &self.plan {
            for g in &plan.groups {
                let n = self.model.params().bits(g.bits);
                self.model
                    .params_mut()
                    .set_bits(g.bits, n.clamp(N_MIN, N_MAX));
            }
        }
        for (_, p) in self.model.params().iter() {
            if !p.tensor.all_finite() {
                return Err(diverged(p.name.clone()));
            }
        }
        self.state.position.step += 1;
        Ok(task_value)
    }

    /// Runs the next epoch, starting or finishing phases as needed. Returns
    /// `None` once the schedule is exhausted or when the step only closed a
    /// phase without epochs.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let pos = self.state.position;
        if pos.epoch == 0 {
            self.start_phase()?;
        }
        if self.schedule.phases[pos.phase].epochs == 0 {
            let acc = self.evaluate(false)?;
            self.finish_phase(acc)?;
            return Ok(None);
        }
        let pos = self.state.position;
        let phase = self.schedule.phases[pos.phase].clone();
        let lr = self.schedule.lr_at(pos.phase, pos.epoch);
        let global_epoch = self.schedule.epoch_offset(pos.phase) + pos.epoch;

        let batch_list: Vec<(Tensor, Vec<usize>)> = batches(
            &self.train,
            self.schedule.batch_size,
            self.schedule.seed,
            global_epoch,
            true,
        )
        .collect();
        let mut loss_sum = 0.0;
        for (x, y) in batch_list {
            loss_sum += self.step(x, &y, lr)? * y.len() as f64;
        }
        let task_loss = loss_sum / self.train.len() as f64;

        let last_of_phase = pos.epoch + 1 == phase.epochs;
        let val_accuracy =
            if (pos.epoch + 1).is_multiple_of(self.schedule.eval_every) || last_of_phase {
                Some(self.evaluate(false)?)
            } else {
                None
            };
        let record = EpochRecord {
            phase: phase.name.clone(),
            epoch: pos.epoch,
            global_epoch,
            lr,
            task_loss,
            bit_loss: self.current_bit_loss(),
            val_accuracy,
            bits: self
                .plan
                .as_ref()
                .map(|p| p.bits(self.model.params()))
                .unwrap_or_default(),
            mean_weight_bits: self.mean_bits(Role::Weights),
            mean_activation_bits: self.mean_bits(Role::Activations),
        };
        self.state.records.push(record.clone());
        self.state.position.epoch += 1;

        let improved = val_accuracy.is_some_and(|a| self.state.best_accuracy.is_none_or(|b| a > b));
        if improved {
            self.state.best_accuracy = val_accuracy;
            self.state.best_epoch = Some(global_epoch);
        }
        if last_of_phase {
            self.finish_phase(val_accuracy.expect("evaluated at phase end"))?;
        }
        if let Some(dir) = self.out_dir.clone() {
            let ckpt = self.checkpoint();
            if improved {
                persistence::save(&ckpt, &dir.join("best.ckpt"))?;
            }
            persistence::save(&ckpt, &dir.join("last.ckpt"))?;
            persistence::write_jsonl(&dir.join("records.jsonl"), &self.state.records)?;
        }
        Ok(Some(record))
    }

    /// Runs epochs until the schedule ends or `stop` returns true for the
    /// current position.
    pub fn run_until(&mut self, mut stop: impl FnMut(&SchedulePosition) -> bool) -> Result<()> {
        while !self.is_finished() && !stop(&self.state.position) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(|_| false)
    }

    /// Runs to the end of the current phase.
    pub fn run_phase(&mut self) -> Result<()> {
        let phase = self.state.position.phase;
        self.run_until(|p| p.phase != phase)
    }

    pub fn summary(&self) -> RunSummary {
        let bits = self
            .plan
            .as_ref()
            .map(|p| p.bits(self.model.params()))
            .unwrap_or_default();
        RunSummary {
            config_hash: self.config_hash.clone(),
            quantized: self.plan.is_some(),
            epochs: self.state.records.len(),
            final_accuracy: self.state.phases.last().map(|p| p.final_accuracy),
            best_accuracy: self.state.best_accuracy,
            best_epoch: self.state.best_epoch,
            phases: self.state.phases.clone(),
            rounding: self.state.rounding.clone(),
            mean_bits: self
                .plan
                .as_ref()
                .filter(|p| !p.is_empty())
                .map(|p| p.mean_all_bits(self.model.params())),
            bits,
            mean_weight_bits: self.mean_bits(Role::Weights),
            mean_activation_bits: self.mean_bits(Role::Activations),
        }
    }

    /// Writes the summary file into the output directory, if any.
    pub fn write_summary(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            write_summary(dir, &self.summary())?;
        }
        Ok(())
    }
}

pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    persistence::write_json(&dir.join("summary.json"), summary)
}
