//! Expert importance from routing statistics.
//!
//! Runs calibration tokens through a trained model and accumulates, per
//! layer, each expert's share of the total gate mass (the normalized gate
//! score) and the mean L2 norm of the router output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeModel, TrainableSet};
use crate::numerics::{Matrix, Scalar};
use crate::tasks::{Split, Task};

/// Default calibration budget in tokens.
pub const DEFAULT_CALIBRATION_TOKENS: usize = 1 << 17;

/// Calibration batches are drawn from the training split starting at this
/// batch index, away from the indices pretraining consumes.
pub const CALIBRATION_BATCH_OFFSET: u64 = 1 << 32;

/// Which gate value counts as an expert's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Renormalized top-k gate; zero for inactive experts.
    #[default]
    TopK,
    /// Full softmax gate.
    Dense,
}

/// Which router tensor is normed for the layer profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Dense softmax gate vector.
    #[default]
    Gates,
    /// Raw router logits.
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet<T> {
    batches: Vec<Matrix<T>>,
    token_count: usize,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn new(batches: Vec<Matrix<T>>) -> Result<Self> {
        let token_count = batches.iter().map(Matrix::rows).sum();
        if token_count == 0 {
            return Err(Error::Precondition("calibration set is empty".into()));
        }
        Ok(Self { batches, token_count })
    }

    /// `budget` training tokens in batches of at most `batch_tokens`.
    pub fn from_task(task: &Task, budget: usize, batch_tokens: usize) -> Result<Self> {
        if batch_tokens == 0 {
            return Err(Error::Precondition("calibration batch size must be positive".into()));
        }
        let mut batches = Vec::new();
        let mut left = budget;
        let mut index = CALIBRATION_BATCH_OFFSET;
        while left > 0 {
            let n = left.min(batch_tokens);
            batches.push(task.batch::<T>(Split::Train, index, n).inputs);
            left -= n;
            index += 1;
        }
        Self::new(batches)
    }

    pub fn batches(&self) -> &[Matrix<T>] {
        &self.batches
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

/// Per-layer normalized gate scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateScoreTable {
    pub scores: Vec<Vec<f64>>,
    pub token_count: usize,
}

impl GateScoreTable {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.scores[l]
    }

    /// Expert ids of layer `l` in ascending score order, ties by index.
    pub fn ascending(&self, l: usize) -> Vec<usize> {
        let s = &self.scores[l];
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterNormProfile {
    pub raw_norms: Vec<f64>,
    /// Raw norm divided by the mean raw norm across layers.
    pub relative_norms: Vec<f64>,
}

impl RouterNormProfile {
    pub fn from_raw(raw_norms: Vec<f64>) -> Result<Self> {
        if raw_norms.is_empty() {
            return Err(Error::Precondition("norm profile needs at least one layer".into()));
        }
        if raw_norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::NonFinite("router norms must be positive and finite".into()));
        }
        let mean = raw_norms.iter().sum::<f64>() / raw_norms.len() as f64;
        let relative_norms = raw_norms.iter().map(|n| n / mean).collect();
        Ok(Self {
            raw_norms,
            relative_norms,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub gate_mode: GateMode,
    pub norm_mode: NormMode,
}

/// Gate scores and router norms from a single pass over `calib`.
pub fn calibrate<T: Scalar>(
    model: &MoeModel<T>,
    calib: &CalibrationSet<T>,
    opts: CalibrationOptions,
) -> Result<(GateScoreTable, RouterNormProfile)> {
    let layers = model.layers.len();
    let n = model.hyper.num_experts;
    let mut mass = vec![vec![0.0f64; n]; layers];
    let mut norm_sum = vec![0.0f64; layers];
    for batch in calib.batches() {
        let pass = model.forward(batch, &TrainableSet::none())?;
        for (l, gating) in pass.gatings.iter().enumerate() {
            match opts.gate_mode {
                GateMode::TopK => {
                    for (idx, gates) in gating.active_indices.iter().zip(&gating.active_gates) {
                        for (&e, &g) in idx.iter().zip(gates) {
                            mass[l][e] += g.as_f64();
                        }
                    }
                }
                GateMode::Dense => {
                    for t in 0..gating.tokens() {
                        for (e, &g) in gating.dense_gates.row(t).iter().enumerate() {
                            mass[l][e] += g.as_f64();
                        }
                    }
                }
            }
            let src = match opts.norm_mode {
                NormMode::Gates => &gating.dense_gates,
                NormMode::Logits => &gating.logits,
            };
            for t in 0..src.rows() {
                norm_sum[l] += src.row(t).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            }
        }
    }
    let scores = mass
        .into_iter()
        .map(|m| {
            let total: f64 = m.iter().sum();
            m.into_iter().map(|v| v / total).collect()
        })
        .collect();
    let tokens = calib.token_count() as f64;
    let table = GateScoreTable {
        scores,
        token_count: calib.token_count(),
    };
    let profile = if layers == 0 {
        RouterNormProfile {
            raw_norms: vec![],
            relative_norms: vec![],
        }
    } else {
        RouterNormProfile::from_raw(norm_sum.into_iter().map(|s| s / tokens).collect())?
    };
    Ok((table, profile))
}

pub fn accumulate_gate_scores<T: Scalar>(
    model: &MoeModel<T>,
    calib: &CalibrationSet<T>,
    mode: GateMode,
) -> Result<GateScoreTable> {
    let opts = CalibrationOptions {
        gate_mode: mode,
        ..Default::default()
    };
    Ok(calibrate(model, calib, opts)?.0)
}

pub fn compute_router_norms<T: Scalar>(
    model: &MoeModel<T>,
    calib: &CalibrationSet<T>,
    mode: NormMode,
) -> Result<RouterNormProfile> {
    let opts = CalibrationOptions {
        norm_mode: mode,
        ..Default::default()
    };
    Ok(calibrate(model, calib, opts)?.1)
}

/// On-disk form: `{"layers": [{"scores": [...], "raw_norm": x}], "token_count": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    pub layers: Vec<LayerCalibration>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCalibration {
    pub scores: Vec<f64>,
    pub raw_norm: f64,
}

impl CalibrationReport {
    pub fn new(scores: &GateScoreTable, norms: &RouterNormProfile) -> Self {
        Self {
            layers: scores
                .scores
                .iter()
                .zip(&norms.raw_norms)
                .map(|(s, &raw_norm)| LayerCalibration {
                    scores: s.clone(),
                    raw_norm,
                })
                .collect(),
            token_count: scores.token_count,
        }
    }

    pub fn split(&self) -> Result<(GateScoreTable, RouterNormProfile)> {
        let table = GateScoreTable {
            scores: self.layers.iter().map(|l| l.scores.clone()).collect(),
            token_count: self.token_count,
        };
        let profile = RouterNormProfile::from_raw(self.layers.iter().map(|l| l.raw_norm).collect())?;
        Ok((table, profile))
    }
}
