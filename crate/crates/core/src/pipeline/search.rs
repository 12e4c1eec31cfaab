//! Bisection on the base threshold to hit a target compression ratio.
//!
//! The ratio is a step function of the threshold and only roughly monotone
//! (the group count jumps at multiples of the group size), so the search
//! keeps the closest probe seen and returns it if no probe lands within the
//! tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD_MIN: f64 = 1e-4;
pub const THRESHOLD_MAX: f64 = 0.999;
pub const MAX_PROBES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub threshold: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub target_rho: f64,
    pub tolerance: f64,
    pub base_threshold: f64,
    pub achieved_rho: f64,
    pub probes: Vec<Probe>,
}

/// `rho_at(p)` evaluates the ratio reached at base threshold `p`.
pub fn search_threshold(
    mut rho_at: impl FnMut(f64) -> Result<f64>,
    target: f64,
    tol: f64,
) -> Result<ThresholdSearch> {
    if !(tol > 0.0) {
        return Err(Error::Precondition(format!("tolerance {tol} must be positive")));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Precondition(format!("target ratio {target} must lie in [0, 1)")));
    }
    let finish = |probes: Vec<Probe>| {
        let best = *probes
            .iter()
            .min_by(|a, b| (a.rho - target).abs().total_cmp(&(b.rho - target).abs()))
            .expect("at least one probe");
        ThresholdSearch {
            target_rho: target,
            tolerance: tol,
            base_threshold: best.threshold,
            achieved_rho: best.rho,
            probes,
        }
    };
    if target == 0.0 {
        // Nothing to remove: a zero threshold selects no experts.
        let rho = rho_at(0.0)?;
        return Ok(finish(vec![Probe { threshold: 0.0, rho }]));
    }

    let mut probes = Vec::new();
    let mut probe = |p: f64, probes: &mut Vec<Probe>| -> Result<f64> {
        let rho = rho_at(p)?;
        probes.push(Probe { threshold: p, rho });
        Ok(rho)
    };
    let within = |rho: f64| (rho - target).abs() <= tol;

    let rho_lo = probe(THRESHOLD_MIN, &mut probes)?;
    if within(rho_lo) || rho_lo > target {
        return Ok(finish(probes));
    }
    let rho_hi = probe(THRESHOLD_MAX, &mut probes)?;
    if within(rho_hi) {
        return Ok(finish(probes));
    }
    if rho_hi < target {
        let best = probes
            .iter()
            .max_by(|a, b| a.rho.total_cmp(&b.rho))
            .expect("two probes");
        return Err(Error::Infeasible {
            target,
            max_achievable: best.rho,
            at_threshold: best.threshold,
        });
    }
    let (mut lo, mut hi) = (THRESHOLD_MIN, THRESHOLD_MAX);
    while probes.len() < MAX_PROBES {
        let mid = 0.5 * (lo + hi);
        let rho = probe(mid, &mut probes)?;
        if within(rho) {
            break;
        }
        if rho < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(probes))
}
