use crate::error::{Error, Result};

use super::graph::Gradients;
use super::matrix::Matrix;
use super::rng::RandomSource;

const EPS_ABS: f64 = 1e-8;

/// Parameter storage a gradient check can perturb in place.
pub trait ParamAccess<K> {
    fn param_keys(&self) -> Vec<K>;
    fn param_mut(&mut self, key: &K) -> Option<&mut Matrix<f64>>;
}

impl<K: Ord + Clone> ParamAccess<K> for std::collections::BTreeMap<K, Matrix<f64>> {
    fn param_keys(&self) -> Vec<K> {
        self.keys().cloned().collect()
    }

    fn param_mut(&mut self, key: &K) -> Option<&mut Matrix<f64>> {
        self.get_mut(key)
    }
}

/// One scalar parameter: entry `index` (row-major) of tensor `key`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec<K> {
    pub key: K,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport<K> {
    pub max_relative_error: f64,
    pub worst: ProbeSpec<K>,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Compares reverse-mode gradients against central differences on
/// `probes` randomly chosen scalar parameters.
///
/// `loss_fn` returns the loss and the reverse-mode gradients at the
/// store's current values. Missing gradient entries count as zero.
pub fn grad_check<K, S, F>(
    store: &mut S,
    loss_fn: F,
    probes: usize,
    h: f64,
    rng: &mut RandomSource,
) -> Result<GradReport<K>>
where
    K: Ord + Clone,
    S: ParamAccess<K>,
    F: FnMut(&S) -> Result<(f64, Gradients<f64, K>)>,
{
    if probes == 0 {
        return Err(Error::Precondition("grad_check needs at least one probe".into()));
    }
    let keys = store.param_keys();
    if keys.is_empty() {
        return Err(Error::Precondition("no parameters to probe".into()));
    }
    let mut specs = Vec::with_capacity(probes);
    for _ in 0..probes {
        let key = keys[rng.below(keys.len())].clone();
        let len = store.param_mut(&key).map_or(0, |m| m.len());
        specs.push(ProbeSpec {
            key,
            index: rng.below(len.max(1)),
        });
    }
    grad_check_at(store, loss_fn, &specs, h)
}

/// Same as [`grad_check`] with explicit probe locations.
pub fn grad_check_at<K, S, F>(
    store: &mut S,
    mut loss_fn: F,
    probes: &[ProbeSpec<K>],
    h: f64,
) -> Result<GradReport<K>>
where
    K: Ord + Clone,
    S: ParamAccess<K>,
    F: FnMut(&S) -> Result<(f64, Gradients<f64, K>)>,
{
    if probes.is_empty() {
        return Err(Error::Precondition("grad_check needs at least one probe".into()));
    }
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Precondition(format!("step h={h} outside (0, 1e-2]")));
    }
    let (_, grads) = loss_fn(store)?;
    let mut report: Option<GradReport<K>> = None;
    for spec in probes {
        let original = {
            let m = store
                .param_mut(&spec.key)
                .ok_or_else(|| Error::Precondition("probe names an unknown parameter".into()))?;
            if spec.index >= m.len() {
                return Err(Error::Precondition("probe index out of range".into()));
            }
            m.data()[spec.index]
        };
        let mut at = |store: &mut S, v: f64| -> Result<f64> {
            store.param_mut(&spec.key).expect("checked").data_mut()[spec.index] = v;
            Ok(loss_fn(store)?.0)
        };
        let plus = at(store, original + h)?;
        let minus = at(store, original - h)?;
        store.param_mut(&spec.key).expect("checked").data_mut()[spec.index] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(&spec.key).map_or(0.0, |g| g.data()[spec.index]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(EPS_ABS);
        if report.as_ref().is_none_or(|r| rel > r.max_relative_error) {
            report = Some(GradReport {
                max_relative_error: rel,
                worst: spec.clone(),
                analytic,
                numeric,
                probes: probes.len(),
            });
        }
    }
    Ok(report.expect("at least one probe"))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::numerics::Graph;

    fn linear_loss(store: &BTreeMap<&'static str, Matrix<f64>>) -> Result<(f64, Gradients<f64, &'static str>)> {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[&[1.0, 2.0], &[-0.5, 0.5]]));
        let w = g.param("w", store["w"].clone());
        let y = g.matmul(x, w)?;
        let loss = g.sum(y);
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)?))
    }

    fn store() -> BTreeMap<&'static str, Matrix<f64>> {
        let mut s = BTreeMap::new();
        s.insert("w", Matrix::from_rows(&[&[0.25, -0.125], &[1.5, 0.75]]));
        s
    }

    #[test]
    fn linear_is_exact() {
        let mut s = store();
        let mut rng = RandomSource::new(0);
        // Dyadic data and steps keep every sum exact.
        for h in [2f64.powi(-7), 2f64.powi(-14), 2f64.powi(-20)] {
            let r = grad_check(&mut s, linear_loss, 8, h, &mut rng).unwrap();
            assert!(r.max_relative_error <= 1e-10, "{}", r.max_relative_error);
        }
        assert_eq!(s, store(), "parameters restored");
    }

    #[test]
    fn zero_probes_rejected() {
        let mut s = store();
        let mut rng = RandomSource::new(0);
        assert!(matches!(
            grad_check(&mut s, linear_loss, 0, 1e-5, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn bad_step_rejected() {
        let mut s = store();
        let mut rng = RandomSource::new(0);
        assert!(grad_check(&mut s, linear_loss, 1, 0.5, &mut rng).is_err());
    }
}
