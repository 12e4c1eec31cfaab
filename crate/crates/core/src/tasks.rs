//! Deterministic synthetic tasks with planted modes.
//!
//! Each task owns K modes with Zipf-like frequencies `p_k ∝ (k+1)^-skew`.
//! A token picks a mode, sits near that mode's centroid, and its target
//! depends on the mode, so experts that specialize on frequent modes matter
//! more than the rest.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomSource, Scalar};

/// Standard deviation of a token around its mode centroid.
const SPREAD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Target = mode-specific linear map of the input, plus noise.
    ClusterRegression,
    /// Label = (mode + side of a mode-specific hyperplane) mod classes.
    ModularClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_modes: usize,
    pub mode_skew: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ClusterRegression,
            input_dim: 16,
            output_dim: 8,
            num_modes: 16,
            mode_skew: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_modes < 2 {
            return Err(Error::Config("a task needs at least two modes".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if self.kind == TaskKind::ModularClassification && self.output_dim < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        if !(self.mode_skew >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("mode_skew and noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Regression(Matrix<T>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Matrix<T>,
    pub targets: Targets<T>,
    /// Hidden mode of each token; diagnostics only.
    pub modes: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn tokens(&self) -> usize {
        self.inputs.rows()
    }

    /// Writes one CSV row per token: inputs, targets, mode.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let mut header: Vec<String> = (0..self.inputs.cols()).map(|i| format!("x{i}")).collect();
        match &self.targets {
            Targets::Regression(t) => header.extend((0..t.cols()).map(|i| format!("y{i}"))),
            Targets::Classes(_) => header.push("label".into()),
        }
        header.push("mode".into());
        writeln!(out, "{}", header.join(","))?;
        for r in 0..self.tokens() {
            let mut cells: Vec<String> = self.inputs.row(r).iter().map(|v| v.to_string()).collect();
            match &self.targets {
                Targets::Regression(t) => cells.extend(t.row(r).iter().map(|v| v.to_string())),
                Targets::Classes(c) => cells.push(c[r].to_string()),
            }
            cells.push(self.modes[r].to_string());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// A task's fixed "world": mode centroids, frequencies and target maps.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    centroids: Vec<Vec<f64>>,
    mode_weights: Vec<f64>,
    /// Regression: `input_dim × output_dim` map per mode.
    /// Classification: `input_dim × 1` hyperplane normal per mode.
    maps: Vec<Matrix<f64>>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RandomSource::with_stream(spec.seed, 0);
        let centroids = (0..spec.num_modes)
            .map(|_| (0..spec.input_dim).map(|_| rng.normal()).collect())
            .collect();
        let mode_weights = (0..spec.num_modes)
            .map(|k| ((k + 1) as f64).powf(-spec.mode_skew))
            .collect();
        let cols = match spec.kind {
            TaskKind::ClusterRegression => spec.output_dim,
            TaskKind::ModularClassification => 1,
        };
        let scale = 1.0 / (spec.input_dim as f64).sqrt();
        let maps = (0..spec.num_modes)
            .map(|_| Matrix::randn(spec.input_dim, cols, scale, &mut rng))
            .collect();
        Ok(Self {
            spec,
            centroids,
            mode_weights,
            maps,
        })
    }

    pub fn mode_probabilities(&self) -> Vec<f64> {
        let total: f64 = self.mode_weights.iter().sum();
        self.mode_weights.iter().map(|w| w / total).collect()
    }

    /// Batch `index` of `split`: a pure function of `(spec, split, index, tokens)`.
    pub fn batch<T: Scalar>(&self, split: Split, index: u64, tokens: usize) -> Batch<T> {
        let split_tag = match split {
            Split::Train => 1u64,
            Split::Eval => 2u64,
        };
        let mut rng = RandomSource::with_stream(self.spec.seed, (split_tag << 56) | (index & ((1 << 56) - 1)));
        let d = self.spec.input_dim;
        let mut inputs = Matrix::<f64>::zeros(tokens, d);
        let mut modes = Vec::with_capacity(tokens);
        for t in 0..tokens {
            let k = rng.categorical(&self.mode_weights);
            modes.push(k);
            for (i, v) in inputs.row_mut(t).iter_mut().enumerate() {
                *v = self.centroids[k][i] + SPREAD * rng.normal();
            }
        }
        let targets = match self.spec.kind {
            TaskKind::ClusterRegression => {
                let mut y = Matrix::<f64>::zeros(tokens, self.spec.output_dim);
                for t in 0..tokens {
                    let map = &self.maps[modes[t]];
                    for o in 0..self.spec.output_dim {
                        let mut acc = 0.0;
                        for i in 0..d {
                            acc += inputs.get(t, i) * map.get(i, o);
                        }
                        let noise = if self.spec.noise_std > 0.0 {
                            self.spec.noise_std * rng.normal()
                        } else {
                            0.0
                        };
                        y.set(t, o, acc + noise);
                    }
                }
                Targets::Regression(y.cast())
            }
            TaskKind::ModularClassification => Targets::Classes(
                (0..tokens)
                    .map(|t| {
                        let k = modes[t];
                        let side: f64 = (0..d)
                            .map(|i| (inputs.get(t, i) - self.centroids[k][i]) * self.maps[k].get(i, 0))
                            .sum();
                        (k + usize::from(side > 0.0)) % self.spec.output_dim
                    })
                    .collect(),
            ),
        };
        Batch {
            inputs: inputs.cast(),
            targets,
            modes,
        }
    }
}

/// Convenience wrapper building the task world on every call.
pub fn generate<T: Scalar>(spec: &TaskSpec, split: Split, batch_index: u64, tokens: usize) -> Result<Batch<T>> {
    Ok(Task::new(*spec)?.batch(split, batch_index, tokens))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn batches_are_deterministic() {
        let spec = TaskSpec::default();
        let a = generate::<f32>(&spec, Split::Train, 7, 32).unwrap();
        let b = generate::<f32>(&spec, Split::Train, 7, 32).unwrap();
        assert_eq!(a, b);
        let c = generate::<f32>(&spec, Split::Train, 8, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_modes_within_binomial_bounds() {
        let spec = TaskSpec {
            mode_skew: 0.0,
            num_modes: 8,
            ..TaskSpec::default()
        };
        let task = Task::new(spec).unwrap();
        let mut counts = [0usize; 8];
        let per_batch = 1000;
        for i in 0..100 {
            for m in task.batch::<f32>(Split::Train, i, per_batch).modes {
                counts[m] += 1;
            }
        }
        let n = 100_000f64;
        let p = 1.0 / 8.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn noiseless_regression_reproduces_maps() {
        let spec = TaskSpec {
            noise_std: 0.0,
            ..TaskSpec::default()
        };
        let task = Task::new(spec).unwrap();
        let b = task.batch::<f64>(Split::Eval, 3, 20);
        let Targets::Regression(y) = &b.targets else { panic!() };
        for t in 0..20 {
            let x = b.inputs.gather_rows(&[t]);
            let want = x.matmul(&task.maps[b.modes[t]]).unwrap();
            assert!(want.max_abs_diff(&y.gather_rows(&[t])) < 1e-12);
        }
    }

    #[test]
    fn splits_share_no_rows() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let mut seen = HashSet::new();
        for i in 0..50 {
            let b = task.batch::<f32>(Split::Train, i, 1000);
            for r in 0..b.tokens() {
                seen.insert(b.inputs.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
        for i in 0..50 {
            let b = task.batch::<f32>(Split::Eval, i, 1000);
            for r in 0..b.tokens() {
                let key: Vec<u32> = b.inputs.row(r).iter().map(|v| v.to_bits()).collect();
                assert!(!seen.contains(&key));
            }
        }
    }

    #[test]
    fn classification_labels_in_range() {
        let spec = TaskSpec {
            kind: TaskKind::ModularClassification,
            output_dim: 4,
            ..TaskSpec::default()
        };
        let b = generate::<f32>(&spec, Split::Train, 0, 200).unwrap();
        let Targets::Classes(c) = &b.targets else { panic!() };
        assert!(c.iter().all(|&l| l < 4));
        assert!(c.iter().collect::<HashSet<_>>().len() > 1);
    }

    #[test]
    fn rejects_single_mode() {
        let spec = TaskSpec {
            num_modes: 1,
            ..TaskSpec::default()
        };
        assert!(Task::new(spec).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let b = generate::<f32>(&TaskSpec::default(), Split::Train, 0, 3).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x0,"));
    }
}
