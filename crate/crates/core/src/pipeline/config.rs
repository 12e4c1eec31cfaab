use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealSchedule, RecoveryConfig, ScheduleKind};
use crate::calibration::{CalibrationOptions, GateMode, NormMode};
use crate::construction::{AssemblyOptions, ReplaceMode};
use crate::error::{Error, Result};
use crate::grouping::SimilarityMode;
use crate::model::{LossKind, ModelHyper};
use crate::numerics::AdamWConfig;
use crate::selection::ThresholdConfig;
use crate::tasks::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_hidden: 64,
            num_experts: 16,
            top_k: 2,
            num_layers: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Weight of the load-balancing penalty.
    pub aux_loss_coef: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            aux_loss_coef: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub tokens: usize,
    pub batch_tokens: usize,
    pub gate_mode: GateMode,
    pub norm_mode: NormMode,
    /// Prefix of the calibration stream used for grouping features.
    pub grouping_tokens: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tokens: 1 << 17,
            batch_tokens: 1024,
            gate_mode: GateMode::TopK,
            norm_mode: NormMode::Gates,
            grouping_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    #[default]
    Adaptive,
    Uniform,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub method: SelectionMethod,
    pub alpha: f64,
    pub max_delta: f64,
    /// Fixed base threshold; when absent it is searched for `target_rho`.
    pub base_threshold: Option<f64>,
    pub target_rho: f64,
    pub tolerance: f64,
    /// Never replace more than `N − top_k` experts in a layer.
    pub cap_to_active: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            method: SelectionMethod::Adaptive,
            alpha: 0.3,
            max_delta: 0.2,
            base_threshold: None,
            target_rho: 0.5,
            tolerance: 0.01,
            cap_to_active: true,
        }
    }
}

impl SelectionConfig {
    pub fn thresholds(&self, base_threshold: f64) -> ThresholdConfig {
        ThresholdConfig {
            base_threshold,
            alpha: self.alpha,
            max_delta: self.max_delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    #[default]
    Dominant,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub method: GroupingMethod,
    pub similarity: SimilarityMode,
    pub group_size: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            method: GroupingMethod::Dominant,
            similarity: SimilarityMode::RouterColumns,
            group_size: crate::grouping::DEFAULT_GROUP_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructionConfig {
    pub rank: usize,
    pub mode: ReplaceMode,
    pub attach_retained_adapters: bool,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            mode: ReplaceMode::SharedBase,
            attach_retained_adapters: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub end_ratio: f64,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            end_ratio: 0.2,
            gamma: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryPhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Train retained experts' adapters as well as replaced ones.
    pub train_retained_adapters: bool,
}

impl Default for RecoveryPhaseConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            train_retained_adapters: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EndRatio,
    Rank,
    GroupSize,
    SelectionMethod,
    GroupingMethod,
    CalibTokens,
    MaxDelta,
    Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub pretrain: PretrainConfig,
    pub calibration: CalibrationConfig,
    pub selection: SelectionConfig,
    pub grouping: GroupingConfig,
    pub construction: ConstructionConfig,
    pub schedule: ScheduleConfig,
    pub recovery: RecoveryPhaseConfig,
    pub eval_tokens: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write measured phase times; off by default so reports stay
    /// byte-reproducible.
    pub record_wall_time: bool,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            pretrain: PretrainConfig::default(),
            calibration: CalibrationConfig::default(),
            selection: SelectionConfig::default(),
            grouping: GroupingConfig::default(),
            construction: ConstructionConfig::default(),
            schedule: ScheduleConfig::default(),
            recovery: RecoveryPhaseConfig::default(),
            eval_tokens: 4096,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            record_wall_time: false,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        self.task.validate()?;
        if self.model.num_layers == 0 {
            return Err(Error::Config("experiments need at least one MoE layer".into()));
        }
        if self.pretrain.batch_size == 0 || self.recovery.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.calibration.tokens == 0 || self.calibration.batch_tokens == 0 || self.calibration.grouping_tokens == 0 {
            return Err(Error::Config("calibration token budgets must be positive".into()));
        }
        if self.eval_tokens == 0 {
            return Err(Error::Config("eval_tokens must be positive".into()));
        }
        if self.grouping.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        let (n, m) = (self.model.d_model, self.model.d_hidden);
        if self.construction.rank == 0 || self.construction.rank > n.min(m) {
            return Err(Error::Config(format!("rank must lie in 1..={}", n.min(m))));
        }
        if let Some(p) = self.selection.base_threshold {
            self.selection.thresholds(p).validate()?;
        } else {
            self.selection.thresholds(0.5).validate()?;
            if !(self.selection.target_rho >= 0.0 && self.selection.target_rho < 1.0) {
                return Err(Error::Config("target_rho must lie in [0, 1)".into()));
            }
            if !(self.selection.tolerance > 0.0) {
                return Err(Error::Config("tolerance must be positive".into()));
            }
        }
        self.schedule().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> ModelHyper {
        ModelHyper {
            input_dim: self.task.input_dim,
            output_dim: self.task.output_dim,
            d_model: self.model.d_model,
            d_hidden: self.model.d_hidden,
            num_experts: self.model.num_experts,
            top_k: self.model.top_k,
            num_layers: self.model.num_layers,
            loss: match self.task.kind {
                TaskKind::ClusterRegression => LossKind::Mse,
                TaskKind::ModularClassification => LossKind::CrossEntropy,
            },
        }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            kind: self.schedule.kind,
            end_ratio: self.schedule.end_ratio,
            gamma: self.schedule.gamma,
            total_steps: self.recovery.steps,
        }
    }

    pub fn recovery(&self) -> RecoveryConfig {
        RecoveryConfig {
            steps: self.recovery.steps,
            batch_size: self.recovery.batch_size,
            optimizer: self.recovery.optimizer,
            train_retained_adapters: self.recovery.train_retained_adapters,
            eval_tokens: self.eval_tokens,
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            gate_mode: self.calibration.gate_mode,
            norm_mode: self.calibration.norm_mode,
        }
    }

    pub fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions {
            rank: self.construction.rank,
            mode: self.construction.mode,
            attach_retained_adapters: self.construction.attach_retained_adapters,
        }
    }

    /// Per-layer candidate cap, if enabled.
    pub fn candidate_cap(&self) -> Option<usize> {
        self.selection
            .cap_to_active
            .then(|| self.model.num_experts - self.model.top_k)
    }

    /// A copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: &serde_json::Value) -> Result<Self> {
        let bad = || Error::Config(format!("value {value} does not fit sweep axis {axis:?}"));
        let number = || value.as_f64().ok_or_else(bad);
        let count = || value.as_u64().map(|v| v as usize).ok_or_else(bad);
        let mut cfg = self.clone();
        match axis {
            SweepAxis::EndRatio => cfg.schedule.end_ratio = number()?,
            SweepAxis::Rank => cfg.construction.rank = count()?,
            SweepAxis::GroupSize => cfg.grouping.group_size = count()?,
            SweepAxis::CalibTokens => cfg.calibration.tokens = count()?,
            SweepAxis::MaxDelta => cfg.selection.max_delta = number()?,
            SweepAxis::SelectionMethod => cfg.selection.method = serde_json::from_value(value.clone())?,
            SweepAxis::GroupingMethod => cfg.grouping.method = serde_json::from_value(value.clone())?,
            SweepAxis::Schedule => cfg.schedule.kind = serde_json::from_value(value.clone())?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"model": {"num_layers": 2}, "seeds": [7]}"#).unwrap();
        assert_eq!(partial.model.num_layers, 2);
        assert_eq!(partial.model.num_experts, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {"width": 3}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.construction.rank = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.end_ratio = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_axes_apply() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.with_axis(SweepAxis::EndRatio, &serde_json::json!(0.4)).unwrap().schedule.end_ratio, 0.4);
        assert_eq!(
            cfg.with_axis(SweepAxis::SelectionMethod, &serde_json::json!("uniform")).unwrap().selection.method,
            SelectionMethod::Uniform
        );
        assert!(cfg.with_axis(SweepAxis::Rank, &serde_json::json!("big")).is_err());
    }
}
