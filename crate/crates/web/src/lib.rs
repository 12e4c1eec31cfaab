//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic
//! can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use expert_replace::annealing::{beta_exponential, beta_linear};
use expert_replace::calibration::{GateScoreTable, RouterNormProfile};
use expert_replace::construction;
use expert_replace::selection::{adaptive_thresholds, select_candidates, ThresholdConfig};

/// `β(t)` for `t = 0..=steps`.
pub fn beta_curve(kind: &str, steps: usize, end_ratio: f64, gamma: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&end_ratio) {
        return Err(format!("end ratio {end_ratio} must lie in [0, 1]"));
    }
    match kind {
        "linear" => Ok((0..=steps).map(|t| beta_linear(t, steps, end_ratio)).collect()),
        "exponential" if gamma > 0.0 => Ok((0..=steps).map(|t| beta_exponential(t, steps, end_ratio, gamma)).collect()),
        "exponential" => Err(format!("gamma {gamma} must be positive")),
        other => Err(format!("unknown schedule {other:?}")),
    }
}

#[derive(Debug, Serialize)]
pub struct LayerView {
    pub scores: Vec<f64>,
    pub relative_norm: f64,
    pub threshold: f64,
    pub candidates: Vec<usize>,
    pub cumulative_score: f64,
}

/// Adaptive selection on hand-entered data. `masses[l]` are non-negative
/// gate masses of layer `l` (normalized here); `norms[l]` its raw router norm.
pub fn explore_selection(
    masses: &[Vec<f64>],
    norms: &[f64],
    base_threshold: f64,
    alpha: f64,
    max_delta: f64,
) -> Result<Vec<LayerView>, String> {
    if masses.len() != norms.len() {
        return Err(format!("{} score rows but {} router norms", masses.len(), norms.len()));
    }
    let mut scores = Vec::with_capacity(masses.len());
    for (l, row) in masses.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.is_empty() || row.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0) {
            return Err(format!("layer {l}: gate masses must be non-negative with a positive sum"));
        }
        scores.push(row.iter().map(|v| v / total).collect::<Vec<_>>());
    }
    let cfg = ThresholdConfig {
        base_threshold,
        alpha,
        max_delta,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let profile = RouterNormProfile::from_raw(norms.to_vec()).map_err(|e| e.to_string())?;
    let table = GateScoreTable { scores, token_count: 0 };
    let thresholds = adaptive_thresholds(&profile, &cfg);
    let plan = select_candidates(&table, &thresholds).map_err(|e| e.to_string())?;
    Ok(plan
        .layers
        .into_iter()
        .zip(table.scores)
        .zip(profile.relative_norms)
        .map(|((sel, scores), relative_norm)| LayerView {
            scores,
            relative_norm,
            threshold: sel.threshold,
            candidates: sel.candidates,
            cumulative_score: sel.cumulative_score,
        })
        .collect())
}

/// `ρ` for every replaced count `N′ = 0..=N` with `⌈N′/g⌉` groups.
pub fn ratio_table(n: usize, m: usize, experts: usize, group_size: usize, rank: usize) -> Result<Vec<f64>, String> {
    if n == 0 || m == 0 || experts == 0 || group_size == 0 || rank == 0 {
        return Err("all sizes must be positive".into());
    }
    Ok((0..=experts)
        .map(|replaced| {
            let groups = replaced.div_ceil(group_size);
            construction::compression_ratio(n, m, experts, replaced, groups, rank)
        })
        .collect())
}

#[wasm_bindgen(js_name = betaCurve)]
pub fn beta_curve_js(kind: &str, steps: usize, end_ratio: f64, gamma: f64) -> Result<Vec<f64>, JsError> {
    beta_curve(kind, steps, end_ratio, gamma).map_err(|e| JsError::new(&e))
}

/// `masses_json` is a JSON array of per-layer arrays; returns JSON.
#[wasm_bindgen(js_name = exploreSelection)]
pub fn explore_selection_js(
    masses_json: &str,
    norms: Vec<f64>,
    base_threshold: f64,
    alpha: f64,
    max_delta: f64,
) -> Result<String, JsError> {
    let masses: Vec<Vec<f64>> = serde_json::from_str(masses_json).map_err(|e| JsError::new(&e.to_string()))?;
    let layers = explore_selection(&masses, &norms, base_threshold, alpha, max_delta).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&layers).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = compressionRatio)]
pub fn compression_ratio_js(n: usize, m: usize, experts: usize, replaced: usize, groups: usize, rank: usize) -> f64 {
    construction::compression_ratio(n, m, experts, replaced, groups, rank)
}

#[wasm_bindgen(js_name = ratioTable)]
pub fn ratio_table_js(n: usize, m: usize, experts: usize, group_size: usize, rank: usize) -> Result<Vec<f64>, JsError> {
    ratio_table(n, m, experts, group_size, rank).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves() {
        let lin = beta_curve("linear", 10, 0.4, 3.0).unwrap();
        assert_eq!(lin.len(), 11);
        assert_eq!((lin[0], lin[2], lin[4], lin[10]), (1.0, 0.5, 0.0, 0.0));
        let exp = beta_curve("exponential", 10, 0.2, 1.0).unwrap();
        assert!((exp[1] - 0.37754).abs() < 1e-5);
        assert!(beta_curve("linear", 10, 0.0, 3.0).unwrap().iter().all(|&b| b == 0.0));
        assert!(beta_curve("cosine", 10, 0.2, 3.0).is_err());
        assert!(beta_curve("exponential", 10, 0.2, 0.0).is_err());
        assert!(beta_curve("linear", 10, 1.5, 3.0).is_err());
    }

    #[test]
    fn selection() {
        // Equal norms: thresholds stay at the base value.
        let layers = explore_selection(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]], &[1.0, 1.0], 0.25, 0.3, 0.2)
            .unwrap();
        assert_eq!(layers[0].candidates, vec![0, 1]);
        assert_eq!(layers[1].candidates, vec![3, 2]);
        assert!((layers[0].cumulative_score - 0.3).abs() < 1e-12);
        assert_eq!(layers[0].threshold, 0.25);
        // A high-norm layer gets a lower threshold.
        let layers = explore_selection(&[vec![1.0; 4], vec![1.0; 4]], &[3.0, 1.0], 0.5, 0.3, 0.2).unwrap();
        assert!(layers[0].threshold < layers[1].threshold);
        assert!(explore_selection(&[vec![1.0]], &[1.0, 2.0], 0.5, 0.3, 0.2).is_err());
        assert!(explore_selection(&[vec![-1.0, 2.0]], &[1.0], 0.5, 0.3, 0.2).is_err());
        assert!(explore_selection(&[vec![1.0, 2.0]], &[1.0], 1.5, 0.3, 0.2).is_err());
    }

    #[test]
    fn ratios() {
        let table = ratio_table(32, 64, 16, 3, 1).unwrap();
        assert_eq!(table.len(), 17);
        assert_eq!(table[0], 0.0);
        assert!((table[14] - 0.5215).abs() < 1e-3);
        assert!(ratio_table(32, 64, 16, 0, 1).is_err());
        assert_eq!(compression_ratio_js(8, 8, 8, 4, 1, 1), 0.25);
    }
}
