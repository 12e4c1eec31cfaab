//! Annealed replacement: `W* = β·W + (1−β)·W_share + b·a` with `β` decaying
//! from 1 to 0 over the first `ε·T` recovery steps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::construction::LowRankAdapter;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{train_step, MoeModel, ParamKey, TrainableSet};
use crate::numerics::{AdamW, AdamWConfig, Matrix, Scalar};
use crate::tasks::{Split, Task};

/// Recovery batches are drawn from the training split starting here.
pub const RECOVERY_BATCH_OFFSET: u64 = 2 << 32;

/// Effective weight of a replaced expert matrix. The original term is
/// skipped at `beta = 0` and the base term at `beta = 1`, so a missing
/// original is fine once annealing is over.
pub fn effective_weight<T: Scalar>(
    original: Option<&Matrix<T>>,
    base: Option<&Matrix<T>>,
    adapter: &LowRankAdapter<T>,
    beta: f64,
) -> Result<Matrix<T>> {
    let mut acc: Option<Matrix<T>> = None;
    if beta != 0.0 {
        let w = original.ok_or_else(|| Error::Contract(format!("original weights required at beta = {beta}")))?;
        acc = Some(w.scale(T::from_f64(beta)));
    }
    if let Some(base) = base {
        if beta != 1.0 {
            let scaled = base.scale(T::from_f64(1.0 - beta));
            acc = Some(match acc {
                Some(a) => a.add(&scaled)?,
                None => scaled,
            });
        }
    }
    let delta = adapter.delta();
    match acc {
        Some(a) => a.add(&delta),
        None => Ok(delta),
    }
}

/// `max(1 − t/(εT), 0)`; zero everywhere when `ε = 0`.
pub fn beta_linear(t: usize, total: usize, end_ratio: f64) -> f64 {
    match progress(t, total, end_ratio) {
        None => 0.0,
        Some(tau) => (1.0 - tau).max(0.0),
    }
}

/// `max((e^{−γτ} − e^{−γ}) / (1 − e^{−γ}), 0)` with `τ = t/(εT)`.
pub fn beta_exponential(t: usize, total: usize, end_ratio: f64, gamma: f64) -> f64 {
    match progress(t, total, end_ratio) {
        None => 0.0,
        Some(tau) if tau >= 1.0 => 0.0,
        Some(tau) => {
            let floor = (-gamma).exp();
            (((-gamma * tau).exp() - floor) / (1.0 - floor)).max(0.0)
        }
    }
}

/// `τ = t/(εT)`, or `None` for direct replacement.
fn progress(t: usize, total: usize, end_ratio: f64) -> Option<f64> {
    if end_ratio <= 0.0 {
        return None;
    }
    if total == 0 {
        return Some(if t == 0 { 0.0 } else { 1.0 });
    }
    Some(t as f64 / (end_ratio * total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub kind: ScheduleKind,
    pub end_ratio: f64,
    pub gamma: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.end_ratio) {
            return Err(Error::Config(format!("end ratio {} must lie in [0, 1]", self.end_ratio)));
        }
        if self.kind == ScheduleKind::Exponential && !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Linear => beta_linear(t, self.total_steps, self.end_ratio),
            ScheduleKind::Exponential => beta_exponential(t, self.total_steps, self.end_ratio, self.gamma),
        }
    }

    /// First step at which `beta` is zero.
    pub fn anneal_end(&self) -> usize {
        (0..=self.total_steps)
            .find(|&t| self.beta(t) == 0.0)
            .unwrap_or(self.total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub step: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub betas: Vec<f64>,
    /// Step at which originals were swapped out wholesale (direct replacement).
    pub swap_step: Option<usize>,
    /// First step with `beta = 0` (annealed runs).
    pub anneal_end: Option<usize>,
    /// Eval loss of the model at step 0, before any update.
    pub initial_eval_loss: Option<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss,beta")?;
        for (t, (loss, beta)) in self.losses.iter().zip(&self.betas).enumerate() {
            writeln!(out, "{t},{loss},{beta}")?;
        }
        Ok(())
    }

    /// Largest loss among the first `window` steps.
    pub fn max_in_first(&self, window: usize) -> f64 {
        self.losses.iter().take(window).copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Also train the adapters of retained experts.
    pub train_retained_adapters: bool,
    /// Eval tokens for the step-0 eval loss; 0 skips it.
    pub eval_tokens: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            train_retained_adapters: true,
            eval_tokens: 4096,
        }
    }
}

/// A recovery fine-tuning run that can be advanced step by step.
pub struct Recovery<'a, T> {
    model: MoeModel<T>,
    task: &'a Task,
    schedule: AnnealSchedule,
    batch_size: usize,
    optimizer: AdamW<T, ParamKey>,
    trainable: TrainableSet,
    trace: LossTrace,
    step: usize,
}

impl<'a, T: Scalar> Recovery<'a, T> {
    pub fn new(model: MoeModel<T>, task: &'a Task, schedule: AnnealSchedule, cfg: &RecoveryConfig) -> Result<Self> {
        schedule.validate()?;
        if schedule.total_steps != cfg.steps {
            return Err(Error::Precondition(format!(
                "schedule spans {} steps but recovery runs {}",
                schedule.total_steps, cfg.steps
            )));
        }
        if !model.is_compressed() {
            return Err(Error::Precondition("recovery needs an assembled compressed model".into()));
        }
        let trainable = if cfg.train_retained_adapters {
            TrainableSet::adapters(&model)
        } else {
            TrainableSet::replaced_adapters(&model)
        };
        let mut model = model;
        model.beta = schedule.beta(0);
        let trace = LossTrace {
            swap_step: (schedule.end_ratio == 0.0).then_some(0),
            anneal_end: (schedule.end_ratio > 0.0).then(|| schedule.anneal_end()),
            initial_eval_loss: if cfg.eval_tokens > 0 {
                Some(evaluate(&model, task, cfg.eval_tokens)?.loss)
            } else {
                None
            },
            ..LossTrace::default()
        };
        Ok(Self {
            model,
            task,
            schedule,
            batch_size: cfg.batch_size,
            optimizer: AdamW::new(cfg.optimizer),
            trainable,
            trace,
            step: 0,
        })
    }

    pub fn state(&self) -> AnnealState {
        AnnealState {
            step: self.step,
            beta: self.model.beta,
        }
    }

    pub fn model(&self) -> &MoeModel<T> {
        &self.model
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// Sets `beta` for the current step, then trains one batch.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.step;
        self.model.beta = self.schedule.beta(t);
        let batch = self
            .task
            .batch::<T>(Split::Train, RECOVERY_BATCH_OFFSET + t as u64, self.batch_size);
        let loss = match train_step(&mut self.model, &batch, &mut self.optimizer, &self.trainable) {
            Ok(loss) => loss,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step: t,
                    trace: Box::new(self.trace.clone()),
                })
            }
            Err(e) => return Err(e),
        };
        self.trace.losses.push(loss);
        self.trace.betas.push(self.model.beta);
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining steps, then drops the originals and merges the
    /// retained adapters. With zero steps the assembled model is returned
    /// untouched.
    pub fn finish(mut self) -> Result<(MoeModel<T>, LossTrace)> {
        if self.schedule.total_steps == 0 {
            return Ok((self.model, self.trace));
        }
        while !self.is_done() {
            self.step()?;
        }
        self.model.beta = self.schedule.beta(self.schedule.total_steps);
        self.model.finalize()?;
        Ok((self.model, self.trace))
    }
}

/// Full recovery fine-tuning of an assembled model.
pub fn finetune<T: Scalar>(
    model: MoeModel<T>,
    task: &Task,
    schedule: AnnealSchedule,
    cfg: &RecoveryConfig,
) -> Result<(MoeModel<T>, LossTrace)> {
    Recovery::new(model, task, schedule, cfg)?.finish()
}
