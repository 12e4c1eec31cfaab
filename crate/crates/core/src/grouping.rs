//! Partitions each layer's candidates into groups that will share a base.
//!
//! The default strategy picks the highest-score candidates as dominants and
//! attaches every other candidate to its most similar dominant. The k-means
//! baseline clusters candidates by their mean output instead.

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationSet, GateScoreTable};
use crate::error::{Error, Result};
use crate::model::{MoeModel, TrainableSet};
use crate::numerics::{Matrix, RandomSource, Scalar};
use crate::selection::SelectionPlan;

pub const DEFAULT_GROUP_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Cosine of the experts' router weight columns.
    #[default]
    RouterColumns,
    /// Cosine of the experts' logits over the calibration tokens.
    LogitProfiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub dominant: usize,
    /// Ascending expert ids, dominant included.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub group_size: usize,
    pub layers: Vec<Vec<Group>>,
}

impl GroupAssignment {
    pub fn group_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Group index of `expert` in layer `l`, if it is a candidate.
    pub fn group_of(&self, l: usize, expert: usize) -> Option<usize> {
        self.layers[l].iter().position(|g| g.members.contains(&expert))
    }
}

/// Number of groups for `candidates` candidates: `⌈N′ / group_size⌉`.
pub fn group_count(candidates: usize, group_size: usize) -> usize {
    candidates.div_ceil(group_size)
}

/// Candidates of each layer sorted by descending score, ties by index.
fn by_descending_score(plan: &SelectionPlan, scores: &GateScoreTable, l: usize) -> Vec<usize> {
    let s = scores.layer(l);
    let mut ids = plan.layers[l].candidates.clone();
    ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    ids
}

/// The `⌈N′/group_size⌉` highest-score candidates per layer, best first.
pub fn pick_dominants(plan: &SelectionPlan, scores: &GateScoreTable, group_size: usize) -> Result<Vec<Vec<usize>>> {
    if group_size == 0 {
        return Err(Error::Precondition("group size must be at least 1".into()));
    }
    if plan.layers.len() != scores.num_layers() {
        return Err(Error::Contract("plan and score table disagree on layer count".into()));
    }
    Ok((0..plan.layers.len())
        .map(|l| {
            let m = group_count(plan.layers[l].candidates.len(), group_size);
            by_descending_score(plan, scores, l).into_iter().take(m).collect()
        })
        .collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Per layer, a `N′ × M` matrix: rows follow the plan's candidate order,
/// columns follow `dominants`.
pub fn routing_similarity<T: Scalar>(
    model: &MoeModel<T>,
    calib: Option<&CalibrationSet<T>>,
    plan: &SelectionPlan,
    dominants: &[Vec<usize>],
    mode: SimilarityMode,
) -> Result<Vec<Matrix<f64>>> {
    let vectors: Vec<Vec<Vec<f64>>> = match mode {
        SimilarityMode::RouterColumns => model
            .layers
            .iter()
            .map(|layer| {
                (0..layer.num_experts())
                    .map(|e| layer.router.w_router.column(e).iter().map(|v| v.as_f64()).collect())
                    .collect()
            })
            .collect(),
        SimilarityMode::LogitProfiles => {
            let calib = calib.ok_or_else(|| Error::Precondition("logit profiles need a calibration set".into()))?;
            logit_profiles(model, calib)?
        }
    };
    Ok(plan
        .layers
        .iter()
        .zip(dominants)
        .enumerate()
        .map(|(l, (sel, doms))| {
            Matrix::from_fn(sel.candidates.len(), doms.len(), |i, j| {
                cosine(&vectors[l][sel.candidates[i]], &vectors[l][doms[j]])
            })
        })
        .collect())
}

/// Per layer and expert, the router logit of every calibration token.
fn logit_profiles<T: Scalar>(model: &MoeModel<T>, calib: &CalibrationSet<T>) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = model.hyper.num_experts;
    let mut out = vec![vec![Vec::with_capacity(calib.token_count()); n]; model.layers.len()];
    for batch in calib.batches() {
        let pass = model.forward(batch, &TrainableSet::none())?;
        for (l, gating) in pass.gatings.iter().enumerate() {
            for t in 0..gating.tokens() {
                for (e, v) in gating.logits.row(t).iter().enumerate() {
                    out[l][e].push(v.as_f64());
                }
            }
        }
    }
    Ok(out)
}

/// Attaches each non-dominant candidate to its most similar dominant.
/// `dominants` must be in descending score order (as [`pick_dominants`]
/// returns them) so that ties favor the stronger, then lower-index dominant.
pub fn assign_members(
    plan: &SelectionPlan,
    dominants: &[Vec<usize>],
    similarity: &[Matrix<f64>],
    group_size: usize,
) -> Result<GroupAssignment> {
    let mut layers = Vec::with_capacity(plan.layers.len());
    for (l, sel) in plan.layers.iter().enumerate() {
        let doms = &dominants[l];
        let sim = &similarity[l];
        if !sel.candidates.is_empty() && doms.is_empty() {
            return Err(Error::Contract(format!("layer {l} has candidates but no dominants")));
        }
        if sim.shape() != (sel.candidates.len(), doms.len()) {
            return Err(Error::Contract(format!("similarity matrix of layer {l} has the wrong shape")));
        }
        let mut groups: Vec<Group> = doms
            .iter()
            .map(|&d| Group {
                dominant: d,
                members: vec![d],
            })
            .collect();
        for (i, &e) in sel.candidates.iter().enumerate() {
            if doms.contains(&e) {
                continue;
            }
            let mut best = 0;
            for j in 1..doms.len() {
                if sim.get(i, j) > sim.get(i, best) {
                    best = j;
                }
            }
            groups[best].members.push(e);
        }
        for g in &mut groups {
            g.members.sort_unstable();
        }
        layers.push(groups);
    }
    Ok(GroupAssignment { group_size, layers })
}

/// Dominant-expert grouping end to end.
pub fn dominant_group<T: Scalar>(
    model: &MoeModel<T>,
    calib: Option<&CalibrationSet<T>>,
    plan: &SelectionPlan,
    scores: &GateScoreTable,
    group_size: usize,
    mode: SimilarityMode,
) -> Result<GroupAssignment> {
    let dominants = pick_dominants(plan, scores, group_size)?;
    let sim = routing_similarity(model, calib, plan, &dominants, mode)?;
    assign_members(plan, &dominants, &sim, group_size)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns a cluster label per
/// point; stops after 100 iterations or when no centroid moves by 1e-6.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut RandomSource) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::Precondition(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = if d2.iter().sum::<f64>() > 0.0 {
            rng.categorical(&d2)
        } else {
            // Every point coincides with a centroid; take the next index.
            centroids.len()
        };
        centroids.push(points[next].clone());
    }

    let nearest = |p: &[f64], centroids: &[Vec<f64>]| {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    };

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..100 {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let updated = if counts[j] == 0 {
                // Re-seed an empty cluster with the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("points are nonempty");
                points[far].clone()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            shift = shift.max(sq_dist(&updated, &centroids[j]).sqrt());
            centroids[j] = updated;
        }
        labels = points.iter().map(|p| nearest(p, &centroids)).collect();
        if shift < 1e-6 {
            break;
        }
    }
    Ok(labels)
}

/// Mean output of each expert over the calibration tokens reaching its
/// layer, `[layer][expert] -> d_model` vector.
pub fn mean_expert_outputs<T: Scalar>(model: &MoeModel<T>, calib: &CalibrationSet<T>) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = model.hyper.d_model;
    let n = model.hyper.num_experts;
    let mut sums = vec![vec![vec![0.0f64; d]; n]; model.layers.len()];
    for batch in calib.batches() {
        let pass = model.forward(batch, &TrainableSet::none())?;
        for (l, &node) in pass.layer_inputs.iter().enumerate() {
            let h = pass.graph.value(node);
            for (e, acc) in sums[l].iter_mut().enumerate() {
                let w_in = model.layers[l].expert_weight(e, crate::model::WeightKind::In, model.beta)?;
                let w_out = model.layers[l].expert_weight(e, crate::model::WeightKind::Out, model.beta)?;
                let act = h.matmul(&w_in)?.map(|v| v * crate::numerics::sigmoid(v));
                let out = act.matmul(&w_out)?;
                for t in 0..out.rows() {
                    for (s, v) in acc.iter_mut().zip(out.row(t)) {
                        *s += v.as_f64();
                    }
                }
            }
        }
    }
    let tokens = calib.token_count() as f64;
    for layer in &mut sums {
        for v in layer.iter_mut().flatten() {
            *v /= tokens;
        }
    }
    Ok(sums)
}

/// Clusters each layer's candidates into `⌈N′/group_size⌉` groups by their
/// feature vectors (`features[layer][expert]`); each cluster's dominant is
/// its highest-score member.
pub fn kmeans_group(
    features: &[Vec<Vec<f64>>],
    plan: &SelectionPlan,
    scores: &GateScoreTable,
    group_size: usize,
    rng: &mut RandomSource,
) -> Result<GroupAssignment> {
    if group_size == 0 {
        return Err(Error::Precondition("group size must be at least 1".into()));
    }
    let mut layers = Vec::with_capacity(plan.layers.len());
    for (l, sel) in plan.layers.iter().enumerate() {
        let m = group_count(sel.candidates.len(), group_size);
        if m == 0 {
            layers.push(Vec::new());
            continue;
        }
        let points: Vec<Vec<f64>> = sel.candidates.iter().map(|&e| features[l][e].clone()).collect();
        let labels = kmeans(&points, m, rng)?;
        let s = scores.layer(l);
        let mut groups: Vec<Group> = (0..m)
            .filter_map(|c| {
                let mut members: Vec<usize> = sel
                    .candidates
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &lab)| lab == c)
                    .map(|(&e, _)| e)
                    .collect();
                members.sort_unstable();
                let dominant = *members
                    .iter()
                    .max_by(|&&a, &&b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))?;
                Some(Group { dominant, members })
            })
            .collect();
        groups.sort_by(|a, b| s[b.dominant].total_cmp(&s[a.dominant]).then(a.dominant.cmp(&b.dominant)));
        layers.push(groups);
    }
    Ok(GroupAssignment { group_size, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::hyper;
    use crate::selection::{select_candidates, LayerSelection};

    fn plan(candidates: Vec<usize>) -> SelectionPlan {
        SelectionPlan {
            layers: vec![LayerSelection {
                threshold: 0.5,
                candidates,
                cumulative_score: 0.0,
            }],
        }
    }

    fn scores(s: Vec<f64>) -> GateScoreTable {
        GateScoreTable {
            scores: vec![s],
            token_count: 1,
        }
    }

    fn is_partition(groups: &GroupAssignment, plan: &SelectionPlan) -> bool {
        groups.layers.iter().zip(&plan.layers).all(|(g, sel)| {
            let mut all: Vec<usize> = g.iter().flat_map(|g| g.members.clone()).collect();
            all.sort_unstable();
            let mut want = sel.candidates.clone();
            want.sort_unstable();
            all == want
        })
    }

    #[test]
    fn dominant_counts() {
        let s = scores(vec![0.05, 0.1, 0.15, 0.2, 0.02, 0.08, 0.4]);
        let p3 = plan(vec![4, 0, 5]);
        assert_eq!(pick_dominants(&p3, &s, 3).unwrap(), vec![vec![5]]);
        let p7 = plan(vec![4, 0, 5, 1, 2, 3, 6]);
        assert_eq!(pick_dominants(&p7, &s, 3).unwrap()[0].len(), 3);
        assert_eq!(pick_dominants(&p7, &s, 10).unwrap()[0], vec![6]);
        assert_eq!(pick_dominants(&plan(vec![]), &s, 3).unwrap()[0], Vec::<usize>::new());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let h = 0.5f64.sqrt();
        assert!((cosine(&[1.0, 0.0], &[h, h]) - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn members_join_argmax_dominant() {
        let p = plan(vec![2, 0, 1]);
        let sim = Matrix::from_rows(&[&[0.9, 0.2], &[1.0, 0.0], &[0.0, 1.0]]);
        let g = assign_members(&p, &[vec![0, 1]], &[sim.clone()], 2).unwrap();
        assert_eq!(g.layers[0][0].members, vec![0, 2]);
        assert_eq!(g.layers[0][1].members, vec![1]);
        let scaled = sim.scale(3.5);
        assert_eq!(assign_members(&p, &[vec![0, 1]], &[scaled], 2).unwrap(), g);
        // A tie goes to the first (stronger) dominant.
        let tie = Matrix::from_rows(&[&[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(assign_members(&p, &[vec![1, 0]], &[tie], 2).unwrap().layers[0][0].dominant, 1);
    }

    #[test]
    fn dominant_grouping_is_a_partition() {
        let mut rng = RandomSource::new(4);
        let model = MoeModel::<f64>::init(hyper(6, 10, 2, 2), &mut rng).unwrap();
        let table = GateScoreTable {
            scores: vec![vec![0.1; 10]; 2],
            token_count: 10,
        };
        let p = select_candidates(&table, &[0.75, 0.35]).unwrap();
        for size in 1..5 {
            let g = dominant_group(&model, None, &p, &table, size, SimilarityMode::RouterColumns).unwrap();
            assert!(is_partition(&g, &p));
            for (groups, sel) in g.layers.iter().zip(&p.layers) {
                assert_eq!(groups.len(), group_count(sel.candidates.len(), size));
                for grp in groups {
                    assert!(grp.members.contains(&grp.dominant));
                }
            }
        }
        let all = dominant_group(&model, None, &p, &table, 1, SimilarityMode::RouterColumns).unwrap();
        assert!(all.layers[0].iter().all(|g| g.members.len() == 1));
        assert!(dominant_group(&model, None, &p, &table, 3, SimilarityMode::LogitProfiles).is_err());
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        let mut rng = RandomSource::new(11);
        let mut points = Vec::new();
        for i in 0..12 {
            let center = if i % 2 == 0 { 10.0 } else { -10.0 };
            points.push(vec![center + 0.1 * rng.normal(), center + 0.1 * rng.normal()]);
        }
        let labels = kmeans(&points, 2, &mut RandomSource::new(1)).unwrap();
        for i in 0..12 {
            assert_eq!(labels[i] == labels[0], i % 2 == 0);
        }
        assert_eq!(labels, kmeans(&points, 2, &mut RandomSource::new(1)).unwrap());
        let singles = kmeans(&points, 12, &mut RandomSource::new(1)).unwrap();
        let mut sorted = singles.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(kmeans(&points, 13, &mut RandomSource::new(1)).is_err());
    }

    #[test]
    fn kmeans_grouping_partitions() {
        let mut rng = RandomSource::new(4);
        let model = MoeModel::<f64>::init(hyper(6, 8, 2, 1), &mut rng).unwrap();
        let calib = CalibrationSet::new(vec![Matrix::randn(20, 5, 1.0, &mut rng)]).unwrap();
        let features = mean_expert_outputs(&model, &calib).unwrap();
        let s = scores(vec![0.125; 8]);
        let p = plan(vec![0, 1, 2, 3, 4, 5, 6]);
        let g = kmeans_group(&features, &p, &s, 3, &mut RandomSource::new(2)).unwrap();
        assert!(is_partition(&g, &p));
        assert!(g.layers[0].len() <= 3);
    }
}
