//! Which experts to replace: per-layer cumulative-score thresholds.
//!
//! Experts are sorted by ascending gate score and the smallest prefix whose
//! cumulative score reaches the layer threshold becomes the candidate set.
//! The adaptive variant modulates the base threshold by the layer's relative
//! router norm.

use serde::{Deserialize, Serialize};

use crate::calibration::{GateScoreTable, RouterNormProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub base_threshold: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_max_delta")]
    pub max_delta: f64,
}

fn default_alpha() -> f64 {
    0.3
}

fn default_max_delta() -> f64 {
    0.2
}

impl ThresholdConfig {
    pub fn new(base_threshold: f64) -> Self {
        Self {
            base_threshold,
            alpha: default_alpha(),
            max_delta: default_max_delta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.base_threshold;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("base threshold {p} must lie in [0, 1)")));
        }
        if !(self.max_delta >= 0.0) || self.max_delta > 1.0 {
            return Err(Error::Config(format!("max_delta {} must lie in [0, 1]", self.max_delta)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    /// `(p_min, p_max)` around the base threshold.
    pub fn bounds(&self) -> (f64, f64) {
        let p = self.base_threshold;
        ((1.0 - self.max_delta) * p, (1.0 + self.max_delta) * p)
    }
}

/// `p_j = clip(p · exp(-α (norm_j − 1)), p_min, p_max)` per layer.
pub fn adaptive_thresholds(profile: &RouterNormProfile, cfg: &ThresholdConfig) -> Vec<f64> {
    let (lo, hi) = cfg.bounds();
    profile
        .relative_norms
        .iter()
        .map(|&norm| (cfg.base_threshold * (-cfg.alpha * (norm - 1.0)).exp()).clamp(lo, hi))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSelection {
    pub threshold: f64,
    /// Ascending importance order.
    pub candidates: Vec<usize>,
    #[serde(default)]
    pub cumulative_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPlan {
    pub layers: Vec<LayerSelection>,
}

impl SelectionPlan {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerSelection {
                    threshold: 0.0,
                    candidates: vec![],
                    cumulative_score: 0.0,
                })
                .collect(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.candidates.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.candidates.len()).sum()
    }
}

/// Smallest ascending prefix whose cumulative score reaches each layer's
/// threshold, crossing expert included.
pub fn select_candidates(scores: &GateScoreTable, thresholds: &[f64]) -> Result<SelectionPlan> {
    select_with_cap(scores, thresholds, None)
}

/// [`select_candidates`] with at most `cap` candidates per layer.
pub fn select_with_cap(scores: &GateScoreTable, thresholds: &[f64], cap: Option<usize>) -> Result<SelectionPlan> {
    if thresholds.len() != scores.num_layers() {
        return Err(Error::Contract(format!(
            "{} thresholds for {} layers",
            thresholds.len(),
            scores.num_layers()
        )));
    }
    let layers = thresholds
        .iter()
        .enumerate()
        .map(|(l, &threshold)| {
            let s = scores.layer(l);
            let mut candidates = Vec::new();
            let mut cumulative = 0.0;
            if threshold > 0.0 {
                for e in scores.ascending(l) {
                    if cap.is_some_and(|c| candidates.len() >= c) {
                        break;
                    }
                    candidates.push(e);
                    cumulative += s[e];
                    if cumulative >= threshold {
                        break;
                    }
                }
            }
            LayerSelection {
                threshold,
                candidates,
                cumulative_score: cumulative,
            }
        })
        .collect();
    Ok(SelectionPlan { layers })
}

/// Same constant threshold in every layer.
pub fn uniform_select(scores: &GateScoreTable, base_threshold: f64) -> Result<SelectionPlan> {
    select_candidates(scores, &vec![base_threshold; scores.num_layers()])
}

/// The `count` lowest-score experts of every layer.
pub fn average_select(scores: &GateScoreTable, count: usize) -> Result<SelectionPlan> {
    let layers = (0..scores.num_layers())
        .map(|l| {
            let n = scores.layer(l).len();
            if count > n {
                return Err(Error::Precondition(format!("cannot select {count} of {n} experts")));
            }
            let candidates: Vec<usize> = scores.ascending(l).into_iter().take(count).collect();
            let cumulative_score = candidates.iter().map(|&e| scores.layer(l)[e]).sum();
            Ok(LayerSelection {
                threshold: 0.0,
                candidates,
                cumulative_score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SelectionPlan { layers })
}
