//! In-memory pipeline stages for one `(config, seed)` cell.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annealing::{finetune, LossTrace};
use crate::calibration::{calibrate, CalibrationReport, CalibrationSet, GateScoreTable, RouterNormProfile};
use crate::construction::{assemble_compressed_model, CompressionReport, ReplaceMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics};
use crate::grouping::{dominant_group, group_count, kmeans_group, mean_expert_outputs, GroupAssignment};
use crate::model::{train_step_with, MoeModel, TrainableSet};
use crate::numerics::{AdamW, RandomSource};
use crate::selection::{adaptive_thresholds, average_select, select_with_cap, SelectionPlan};
use crate::tasks::{Split, Task};

use super::config::{ExperimentConfig, GroupingMethod, SelectionMethod};
use super::search::{search_threshold, ThresholdSearch};

// Independent random streams per seed.
const STREAM_INIT: u64 = 1;
const STREAM_ADAPTERS: u64 = 2;
const STREAM_KMEANS: u64 = 3;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub task: Task,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MoeModel<f32>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub model: MoeModel<f32>,
    pub report: CompressionReport,
    pub plan: SelectionPlan,
    pub groups: GroupAssignment,
    pub base_threshold: f64,
}

/// Eval metrics of one cell across the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub value: Option<String>,
    pub base_threshold: f64,
    pub rho: f64,
    pub pretrained: EvalMetrics,
    pub assembled: EvalMetrics,
    pub recovered: EvalMetrics,
    /// Per-phase wall time in milliseconds (zeros unless recording is on).
    pub wall_ms: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "value,seed,base_threshold,rho,\
pretrained_loss,pretrained_acc,assembled_loss,assembled_acc,recovered_loss,recovered_acc,wall_ms";

    pub fn csv_row(&self) -> String {
        let value = self.value.clone().unwrap_or_default();
        let acc = |m: &EvalMetrics| m.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let wall: u64 = self.wall_ms.values().sum();
        format!(
            "{value},{},{},{},{},{},{},{},{},{},{wall}",
            self.seed,
            self.base_threshold,
            self.rho,
            self.pretrained.loss,
            acc(&self.pretrained),
            self.assembled.loss,
            acc(&self.assembled),
            self.recovered.loss,
            acc(&self.recovered),
        )
    }
}

impl Experiment {
    /// The task world of a cell is seeded with `task.seed + seed`.
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut spec = config.task;
        spec.seed = spec.seed.wrapping_add(seed);
        let task = Task::new(spec)?;
        Ok(Self { config, seed, task })
    }

    fn rng(&self, stream: u64) -> RandomSource {
        RandomSource::with_stream(self.seed, stream)
    }

    pub fn init_model(&self) -> Result<MoeModel<f32>> {
        MoeModel::init(self.config.hyper(), &mut self.rng(STREAM_INIT))
    }

    /// Trains every parameter on training batches `0..steps`.
    pub fn pretrain(&self) -> Result<PretrainOutcome> {
        let cfg = &self.config.pretrain;
        let mut model = self.init_model()?;
        let all = TrainableSet::all(&model);
        let mut opt = AdamW::new(cfg.optimizer);
        let mut losses = Vec::with_capacity(cfg.steps);
        for t in 0..cfg.steps {
            let batch = self.task.batch::<f32>(Split::Train, t as u64, cfg.batch_size);
            losses.push(train_step_with(&mut model, &batch, &mut opt, &all, cfg.aux_loss_coef)?);
        }
        Ok(PretrainOutcome { model, losses })
    }

    pub fn calibration_set(&self, tokens: usize) -> Result<CalibrationSet<f32>> {
        CalibrationSet::from_task(&self.task, tokens, self.config.calibration.batch_tokens)
    }

    pub fn calibrate(&self, model: &MoeModel<f32>) -> Result<CalibrationReport> {
        let calib = self.calibration_set(self.config.calibration.tokens)?;
        let (scores, norms) = calibrate(model, &calib, self.config.calibration_options())?;
        Ok(CalibrationReport::new(&scores, &norms))
    }

    /// Selection plan of the configured method at base threshold `p`.
    pub fn plan_at(&self, scores: &GateScoreTable, norms: &RouterNormProfile, p: f64) -> Result<SelectionPlan> {
        let sel = &self.config.selection;
        let cap = self.config.candidate_cap();
        let layers = scores.num_layers();
        match sel.method {
            SelectionMethod::Adaptive => {
                select_with_cap(scores, &adaptive_thresholds(norms, &sel.thresholds(p)), cap)
            }
            SelectionMethod::Uniform => select_with_cap(scores, &vec![p; layers], cap),
            SelectionMethod::Average => {
                let adaptive = select_with_cap(scores, &adaptive_thresholds(norms, &sel.thresholds(p)), cap)?;
                let mean = adaptive.total() as f64 / layers as f64;
                average_select(scores, mean.round() as usize)
            }
        }
    }

    /// Structural ratio a plan will reach, with `⌈N′/g⌉` groups per layer.
    pub fn planned_report(&self, plan: &SelectionPlan) -> CompressionReport {
        let counts = plan.counts();
        let groups: Vec<usize> = match self.config.construction.mode {
            ReplaceMode::SharedBase => counts
                .iter()
                .map(|&c| group_count(c, self.config.grouping.group_size))
                .collect(),
            ReplaceMode::AdapterOnly => vec![0; counts.len()],
        };
        let h = self.config.hyper();
        let shapes = vec![(h.d_model, h.d_hidden), (h.d_hidden, h.d_model)];
        CompressionReport::from_counts(&shapes, h.num_experts, &counts, &groups, self.config.construction.rank)
    }

    pub fn search_threshold(
        &self,
        scores: &GateScoreTable,
        norms: &RouterNormProfile,
        target: f64,
        tol: f64,
    ) -> Result<ThresholdSearch> {
        search_threshold(|p| Ok(self.planned_report(&self.plan_at(scores, norms, p)?).rho), target, tol)
    }

    /// Base threshold from the config, or searched for the target ratio.
    pub fn resolve_threshold(&self, calib: &CalibrationReport) -> Result<f64> {
        match self.config.selection.base_threshold {
            Some(p) => Ok(p),
            None => {
                let (scores, norms) = calib.split()?;
                let sel = &self.config.selection;
                Ok(self.search_threshold(&scores, &norms, sel.target_rho, sel.tolerance)?.base_threshold)
            }
        }
    }

    pub fn group(
        &self,
        model: &MoeModel<f32>,
        plan: &SelectionPlan,
        scores: &GateScoreTable,
    ) -> Result<GroupAssignment> {
        let g = &self.config.grouping;
        let needs_calib = g.method == GroupingMethod::Kmeans
            || g.similarity == crate::grouping::SimilarityMode::LogitProfiles;
        let calib = if needs_calib {
            let c = &self.config.calibration;
            Some(self.calibration_set(c.grouping_tokens.min(c.tokens))?)
        } else {
            None
        };
        match g.method {
            GroupingMethod::Dominant => dominant_group(model, calib.as_ref(), plan, scores, g.group_size, g.similarity),
            GroupingMethod::Kmeans => {
                let features = mean_expert_outputs(model, calib.as_ref().expect("built above"))?;
                kmeans_group(&features, plan, scores, g.group_size, &mut self.rng(STREAM_KMEANS))
            }
        }
    }

    pub fn compress(&self, model: &MoeModel<f32>, calib: &CalibrationReport, base_threshold: f64) -> Result<Compressed> {
        let (scores, norms) = calib.split()?;
        if scores.num_layers() != model.layers.len() {
            return Err(Error::Contract("calibration and model disagree on layer count".into()));
        }
        let plan = self.plan_at(&scores, &norms, base_threshold)?;
        let groups = self.group(model, &plan, &scores)?;
        let (compressed, report) = assemble_compressed_model(
            model,
            &plan,
            &groups,
            &scores,
            self.config.assembly(),
            &mut self.rng(STREAM_ADAPTERS),
        )?;
        Ok(Compressed {
            model: compressed,
            report,
            plan,
            groups,
            base_threshold,
        })
    }

    pub fn finetune(&self, model: MoeModel<f32>) -> Result<(MoeModel<f32>, LossTrace)> {
        finetune(model, &self.task, self.config.schedule(), &self.config.recovery())
    }

    pub fn evaluate(&self, model: &MoeModel<f32>) -> Result<EvalMetrics> {
        evaluate(model, &self.task, self.config.eval_tokens)
    }
}
