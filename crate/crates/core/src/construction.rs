//! Shared bases, low-rank adapters, compressed-model assembly and the
//! compression-ratio accounting.

use serde::{Deserialize, Serialize};

use crate::calibration::GateScoreTable;
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::model::{ExpertAdapter, ExpertParams, ExpertSlot, MoeModel, WeightKind};
use crate::numerics::{Matrix, RandomSource, Scalar};
use crate::selection::SelectionPlan;

/// Rank-`r` correction `b · a` for an `n × m` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter<T> {
    /// `r × m`
    pub a: Matrix<T>,
    /// `n × r`
    pub b: Matrix<T>,
}

impl<T: Scalar> LowRankAdapter<T> {
    pub fn zeros(n: usize, m: usize, r: usize) -> Self {
        Self {
            a: Matrix::zeros(r, m),
            b: Matrix::zeros(n, r),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul_unchecked(&self.a)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn cast<U: Scalar>(&self) -> LowRankAdapter<U> {
        LowRankAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
        }
    }
}

/// `a ~ N(0, 1/r)`, `b = 0`, so `b · a` starts at exactly zero.
pub fn init_adapter<T: Scalar>(n: usize, m: usize, r: usize, rng: &mut RandomSource) -> Result<LowRankAdapter<T>> {
    if r == 0 || r > n.min(m) {
        return Err(Error::Precondition(format!(
            "adapter rank {r} must lie in 1..={} for a {n}x{m} weight",
            n.min(m)
        )));
    }
    Ok(LowRankAdapter {
        a: Matrix::randn(r, m, 1.0 / (r as f64).sqrt(), rng),
        b: Matrix::zeros(n, r),
    })
}

/// Gate-weighted average of a group's experts.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedBase<T> {
    pub w_in: Matrix<T>,
    pub w_out: Matrix<T>,
    pub members: Vec<usize>,
    pub group: usize,
}

impl<T: Scalar> SharedBase<T> {
    pub fn get(&self, kind: WeightKind) -> &Matrix<T> {
        match kind {
            WeightKind::In => &self.w_in,
            WeightKind::Out => &self.w_out,
        }
    }

    pub fn get_mut(&mut self, kind: WeightKind) -> &mut Matrix<T> {
        match kind {
            WeightKind::In => &mut self.w_in,
            WeightKind::Out => &mut self.w_out,
        }
    }

    pub fn cast<U: Scalar>(&self) -> SharedBase<U> {
        SharedBase {
            w_in: self.w_in.cast(),
            w_out: self.w_out.cast(),
            members: self.members.clone(),
            group: self.group,
        }
    }
}

/// `Σ G_i W_i / Σ G_i` over `members` (expert id, weights), computed in
/// double precision. Falls back to uniform weights when every score is zero.
pub fn build_shared_base<T: Scalar>(
    members: &[(usize, &ExpertParams<T>)],
    layer_scores: &[f64],
    group: usize,
) -> Result<SharedBase<T>> {
    if members.is_empty() {
        return Err(Error::Precondition("a group needs at least one member".into()));
    }
    let mut sorted: Vec<(usize, &ExpertParams<T>)> = members.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    let ids: Vec<usize> = sorted.iter().map(|(id, _)| *id).collect();
    if sorted.len() == 1 {
        let p = sorted[0].1;
        return Ok(SharedBase {
            w_in: p.w_in.clone(),
            w_out: p.w_out.clone(),
            members: ids,
            group,
        });
    }
    let raw: Vec<f64> = ids.iter().map(|&i| layer_scores[i]).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    let average = |kind: WeightKind| -> Result<Matrix<T>> {
        let (rows, cols) = sorted[0].1.get(kind).shape();
        let mut acc = vec![0.0f64; rows * cols];
        for ((_, p), &w) in sorted.iter().zip(&weights) {
            let m = p.get(kind);
            if m.shape() != (rows, cols) {
                return Err(Error::Contract("group members have different shapes".into()));
            }
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += w * v.as_f64();
            }
        }
        Matrix::new(rows, cols, acc.into_iter().map(T::from_f64).collect())
    };
    Ok(SharedBase {
        w_in: average(WeightKind::In)?,
        w_out: average(WeightKind::Out)?,
        members: ids,
        group,
    })
}

/// Parameters of one `n × m` expert matrix kind across a layer, after
/// replacing `replaced` experts with `groups` bases and rank-`r` adapters.
pub fn compressed_param_count(n: usize, m: usize, experts: usize, replaced: usize, groups: usize, r: usize) -> u64 {
    let (n, m) = (n as u64, m as u64);
    (experts - replaced + groups) as u64 * n * m + replaced as u64 * r as u64 * (n + m)
}

/// `ρ = 1 − ((N − N′ + M)·n·m + N′·r·(n+m)) / (N·n·m)` for one matrix shape.
pub fn compression_ratio(n: usize, m: usize, experts: usize, replaced: usize, groups: usize, r: usize) -> f64 {
    let before = experts as u64 * n as u64 * m as u64;
    1.0 - compressed_param_count(n, m, experts, replaced, groups, r) as f64 / before as f64
}

/// How replaced experts are rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    /// Shared group base plus per-expert adapter.
    #[default]
    SharedBase,
    /// Adapter alone, no base.
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub experts: usize,
    pub replaced: usize,
    pub groups: usize,
    /// `(n, m)` of each expert matrix kind.
    pub shapes: Vec<(usize, usize)>,
    pub rank: usize,
    pub expert_param_count_before: u64,
    pub expert_param_count_after: u64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub expert_param_count_before: u64,
    pub expert_param_count_after: u64,
    pub rho: f64,
}

impl CompressionReport {
    /// Exact integer accounting over every layer and matrix kind.
    pub fn from_counts(shapes: &[(usize, usize)], experts: usize, replaced: &[usize], groups: &[usize], rank: usize) -> Self {
        let layers: Vec<LayerReport> = replaced
            .iter()
            .zip(groups)
            .map(|(&r_count, &g_count)| {
                let before: u64 = shapes.iter().map(|&(n, m)| (experts * n * m) as u64).sum();
                let after: u64 = shapes
                    .iter()
                    .map(|&(n, m)| compressed_param_count(n, m, experts, r_count, g_count, rank))
                    .sum();
                LayerReport {
                    experts,
                    replaced: r_count,
                    groups: g_count,
                    shapes: shapes.to_vec(),
                    rank,
                    expert_param_count_before: before,
                    expert_param_count_after: after,
                    rho: 1.0 - after as f64 / before as f64,
                }
            })
            .collect();
        let before: u64 = layers.iter().map(|l| l.expert_param_count_before).sum();
        let after: u64 = layers.iter().map(|l| l.expert_param_count_after).sum();
        let rho = if before == 0 { 0.0 } else { 1.0 - after as f64 / before as f64 };
        Self {
            layers,
            expert_param_count_before: before,
            expert_param_count_after: after,
            rho,
        }
    }

    pub const CSV_HEADER: &'static str = "replaced,groups,rank,params_before,params_after,rho";

    pub fn csv_row(&self) -> String {
        let replaced: usize = self.layers.iter().map(|l| l.replaced).sum();
        let groups: usize = self.layers.iter().map(|l| l.groups).sum();
        format!(
            "{replaced},{groups},{},{},{},{}",
            self.layers.first().map_or(0, |l| l.rank),
            self.expert_param_count_before,
            self.expert_param_count_after,
            self.rho
        )
    }
}

/// Expert matrix shapes `(n, m)` of a model: `w_in`, then `w_out`.
pub fn expert_shapes<T: Scalar>(model: &MoeModel<T>) -> Vec<(usize, usize)> {
    let h = model.hyper;
    vec![(h.d_model, h.d_hidden), (h.d_hidden, h.d_model)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyOptions {
    pub rank: usize,
    pub mode: ReplaceMode,
    /// Give retained experts mergeable adapters for recovery.
    pub attach_retained_adapters: bool,
}

/// Rewires the plan's candidates to (frozen original, group base, fresh
/// adapter) and reports the resulting compression ratio. The returned model
/// has `beta = 1` and computes the same function as `model`.
pub fn assemble_compressed_model<T: Scalar>(
    model: &MoeModel<T>,
    plan: &SelectionPlan,
    groups: &GroupAssignment,
    scores: &GateScoreTable,
    opts: AssemblyOptions,
    rng: &mut RandomSource,
) -> Result<(MoeModel<T>, CompressionReport)> {
    let layers = model.layers.len();
    if plan.layers.len() != layers || scores.num_layers() != layers {
        return Err(Error::Contract("plan, scores and model disagree on layer count".into()));
    }
    if opts.mode == ReplaceMode::SharedBase && groups.layers.len() != layers {
        return Err(Error::Contract("group assignment and model disagree on layer count".into()));
    }
    let shapes = expert_shapes(model);
    let mut out = model.clone();
    out.beta = 1.0;
    let mut group_counts = Vec::with_capacity(layers);
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let dense = model.layers[l].dense_experts()?;
        let n = dense.len();
        let candidates = &plan.layers[l].candidates;
        let mut is_candidate = vec![false; n];
        for &e in candidates {
            if e >= n || is_candidate[e] {
                return Err(Error::Contract(format!("layer {l}: invalid or repeated candidate {e}")));
            }
            is_candidate[e] = true;
        }
        let mut group_of = vec![None; n];
        if opts.mode == ReplaceMode::SharedBase {
            let mut covered = 0;
            for (g, grp) in groups.layers[l].iter().enumerate() {
                for &e in &grp.members {
                    if e >= n || !is_candidate[e] || group_of[e].is_some() {
                        return Err(Error::Contract(format!("layer {l}: groups do not partition the candidates")));
                    }
                    group_of[e] = Some(g);
                    covered += 1;
                }
                if !grp.members.contains(&grp.dominant) {
                    return Err(Error::Contract(format!("layer {l}: group {g} lacks its dominant")));
                }
            }
            if covered != candidates.len() {
                return Err(Error::Contract(format!("layer {l}: groups do not cover the candidates")));
            }
            layer.bases = groups.layers[l]
                .iter()
                .enumerate()
                .map(|(g, grp)| {
                    let members: Vec<(usize, &ExpertParams<T>)> = grp.members.iter().map(|&e| (e, dense[e])).collect();
                    build_shared_base(&members, scores.layer(l), g)
                })
                .collect::<Result<_>>()?;
        } else {
            layer.bases = Vec::new();
        }
        group_counts.push(layer.bases.len());

        for (e, slot) in layer.experts.iter_mut().enumerate() {
            let ExpertSlot::Dense { params, .. } = slot else { unreachable!("checked dense above") };
            let params = params.clone();
            let wants_adapter = is_candidate[e] || opts.attach_retained_adapters;
            let adapter = if wants_adapter {
                let (ni, mi) = shapes[0];
                let (no, mo) = shapes[1];
                Some(ExpertAdapter {
                    w_in: init_adapter(ni, mi, opts.rank, rng)?,
                    w_out: init_adapter(no, mo, opts.rank, rng)?,
                })
            } else {
                None
            };
            *slot = if is_candidate[e] {
                ExpertSlot::Replaced {
                    group: group_of[e],
                    original: Some(params),
                    adapter: adapter.expect("candidates always get adapters"),
                }
            } else {
                ExpertSlot::Dense { params, adapter }
            };
        }
    }
    let report = CompressionReport::from_counts(
        &shapes,
        model.hyper.num_experts,
        &plan.counts(),
        &group_counts,
        opts.rank,
    );
    Ok((out, report))
}

/// Structural expert parameter count of a model: dense experts, shared bases
/// and replaced-expert adapters. Frozen originals and unmerged retained
/// adapters are excluded.
pub fn expert_param_count<T: Scalar>(model: &MoeModel<T>) -> u64 {
    model
        .layers
        .iter()
        .map(|layer| {
            let experts: usize = layer
                .experts
                .iter()
                .map(|slot| match slot {
                    ExpertSlot::Dense { params, .. } => params.param_count(),
                    ExpertSlot::Replaced { adapter, .. } => adapter.w_in.param_count() + adapter.w_out.param_count(),
                })
                .sum();
            let bases: usize = layer.bases.iter().map(|b| b.w_in.len() + b.w_out.len()).sum();
            (experts + bases) as u64
        })
        .sum()
}
