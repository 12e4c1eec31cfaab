//! The toy mixture-of-experts network: an input projection, a stack of
//! residual MoE layers with softmax top-k routing, and a linear output head.
//!
//! A layer's expert slots are either dense experts (optionally carrying a
//! mergeable low-rank adapter) or replaced experts whose effective weights
//! blend a frozen original, a shared group base and a trainable adapter
//! according to the model's annealing factor `beta`.

mod forward;
mod keys;
mod routing;
mod train;

use serde::{Deserialize, Serialize};

use crate::annealing::effective_weight;
use crate::construction::{LowRankAdapter, SharedBase};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomSource, Scalar};

pub use forward::ForwardPass;
pub use keys::{ParamClass, ParamKey, WeightKind};
pub use routing::{route, top_k_indices, GatingOutput};
pub use train::{loss_and_gradients, train_step, train_step_with, TrainableSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error against real-valued targets.
    Mse,
    /// Softmax cross-entropy against class labels.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    pub input_dim: usize,
    pub output_dim: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
    pub loss: LossKind,
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k={} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Two-matrix expert MLP: `silu(x · w_in) · w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    /// `d_model × d_hidden`
    pub w_in: Matrix<T>,
    /// `d_hidden × d_model`
    pub w_out: Matrix<T>,
}

impl<T: Scalar> ExpertParams<T> {
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

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_out.len()
    }
}

/// One adapter per expert weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAdapter<T> {
    pub w_in: LowRankAdapter<T>,
    pub w_out: LowRankAdapter<T>,
}

impl<T: Scalar> ExpertAdapter<T> {
    pub fn get(&self, kind: WeightKind) -> &LowRankAdapter<T> {
        match kind {
            WeightKind::In => &self.w_in,
            WeightKind::Out => &self.w_out,
        }
    }

    pub fn get_mut(&mut self, kind: WeightKind) -> &mut LowRankAdapter<T> {
        match kind {
            WeightKind::In => &mut self.w_in,
            WeightKind::Out => &mut self.w_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSlot<T> {
    /// Retained expert, with an adapter while recovery fine-tuning runs.
    Dense {
        params: ExpertParams<T>,
        adapter: Option<ExpertAdapter<T>>,
    },
    /// Expert rebuilt as `beta·original + (1-beta)·base + b·a`.
    ///
    /// `group` is `None` for adapter-only replacement (no shared base).
    /// `original` is dropped once annealing has finished.
    Replaced {
        group: Option<usize>,
        original: Option<ExpertParams<T>>,
        adapter: ExpertAdapter<T>,
    },
}

impl<T: Scalar> ExpertSlot<T> {
    pub fn is_replaced(&self) -> bool {
        matches!(self, ExpertSlot::Replaced { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    /// `d_model × N`
    pub w_router: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T> {
    pub router: RouterParams<T>,
    pub experts: Vec<ExpertSlot<T>>,
    pub bases: Vec<SharedBase<T>>,
}

impl<T: Scalar> MoeLayer<T> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Effective weight matrix of one expert at annealing factor `beta`.
    pub fn expert_weight(&self, expert: usize, kind: WeightKind, beta: f64) -> Result<Matrix<T>> {
        match &self.experts[expert] {
            ExpertSlot::Dense { params, adapter } => match adapter {
                None => Ok(params.get(kind).clone()),
                Some(ad) => params.get(kind).add(&ad.get(kind).delta()),
            },
            ExpertSlot::Replaced {
                group,
                original,
                adapter,
            } => {
                let base = group.map(|g| self.bases[g].get(kind));
                effective_weight(original.as_ref().map(|o| o.get(kind)), base, adapter.get(kind), beta)
            }
        }
    }

    /// The original dense experts of an uncompressed layer.
    pub fn dense_experts(&self) -> Result<Vec<&ExpertParams<T>>> {
        self.experts
            .iter()
            .map(|s| match s {
                ExpertSlot::Dense { params, .. } => Ok(params),
                ExpertSlot::Replaced { .. } => Err(Error::Contract("layer is already compressed".into())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel<T> {
    pub hyper: ModelHyper,
    /// `input_dim × d_model`
    pub input_proj: Matrix<T>,
    pub layers: Vec<MoeLayer<T>>,
    /// `d_model × output_dim`
    pub output_head: Matrix<T>,
    /// Annealing factor applied to every replaced expert.
    pub beta: f64,
}

impl<T: Scalar> MoeModel<T> {
    /// Random initialization with `N(0, 1/fan_in)` weights.
    pub fn init(hyper: ModelHyper, rng: &mut RandomSource) -> Result<Self> {
        hyper.validate()?;
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let input_proj = Matrix::randn(hyper.input_dim, hyper.d_model, std(hyper.input_dim), rng);
        let layers = (0..hyper.num_layers)
            .map(|_| {
                let w_router = Matrix::randn(hyper.d_model, hyper.num_experts, std(hyper.d_model), rng);
                let experts = (0..hyper.num_experts)
                    .map(|_| ExpertSlot::Dense {
                        params: ExpertParams {
                            w_in: Matrix::randn(hyper.d_model, hyper.d_hidden, std(hyper.d_model), rng),
                            w_out: Matrix::randn(hyper.d_hidden, hyper.d_model, std(hyper.d_hidden), rng),
                        },
                        adapter: None,
                    })
                    .collect();
                MoeLayer {
                    router: RouterParams { w_router },
                    experts,
                    bases: Vec::new(),
                }
            })
            .collect();
        let output_head = Matrix::randn(hyper.d_model, hyper.output_dim, std(hyper.d_model), rng);
        Ok(Self {
            hyper,
            input_proj,
            layers,
            output_head,
            beta: 1.0,
        })
    }

    pub fn is_compressed(&self) -> bool {
        self.layers.iter().any(|l| l.experts.iter().any(|s| s.is_replaced()))
    }

    /// Every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<(ParamKey, &Matrix<T>)> {
        let mut out = vec![(ParamKey::InputProj, &self.input_proj)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((ParamKey::Router { layer: l }, &layer.router.w_router));
            for (e, slot) in layer.experts.iter().enumerate() {
                let (dense, original, adapter) = match slot {
                    ExpertSlot::Dense { params, adapter } => (Some(params), None, adapter.as_ref()),
                    ExpertSlot::Replaced { original, adapter, .. } => (None, original.as_ref(), Some(adapter)),
                };
                for kind in WeightKind::ALL {
                    if let Some(p) = dense {
                        out.push((ParamKey::Expert { layer: l, expert: e, kind }, p.get(kind)));
                    }
                    if let Some(p) = original {
                        out.push((ParamKey::Original { layer: l, expert: e, kind }, p.get(kind)));
                    }
                    if let Some(ad) = adapter {
                        out.push((ParamKey::AdapterA { layer: l, expert: e, kind }, &ad.get(kind).a));
                        out.push((ParamKey::AdapterB { layer: l, expert: e, kind }, &ad.get(kind).b));
                    }
                }
            }
            for (g, base) in layer.bases.iter().enumerate() {
                for kind in WeightKind::ALL {
                    out.push((ParamKey::Base { layer: l, group: g, kind }, base.get(kind)));
                }
            }
        }
        out.push((ParamKey::OutputHead, &self.output_head));
        out
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Matrix<T>> {
        match *key {
            ParamKey::InputProj => Some(&self.input_proj),
            ParamKey::OutputHead => Some(&self.output_head),
            ParamKey::Router { layer } => self.layers.get(layer).map(|l| &l.router.w_router),
            ParamKey::Base { layer, group, kind } => {
                self.layers.get(layer)?.bases.get(group).map(|b| b.get(kind))
            }
            ParamKey::Expert { layer, expert, kind } => match self.layers.get(layer)?.experts.get(expert)? {
                ExpertSlot::Dense { params, .. } => Some(params.get(kind)),
                _ => None,
            },
            ParamKey::Original { layer, expert, kind } => match self.layers.get(layer)?.experts.get(expert)? {
                ExpertSlot::Replaced { original, .. } => original.as_ref().map(|o| o.get(kind)),
                _ => None,
            },
            ParamKey::AdapterA { layer, expert, kind } | ParamKey::AdapterB { layer, expert, kind } => {
                let adapter = match self.layers.get(layer)?.experts.get(expert)? {
                    ExpertSlot::Dense { adapter, .. } => adapter.as_ref()?,
                    ExpertSlot::Replaced { adapter, .. } => adapter,
                };
                let ad = adapter.get(kind);
                Some(if matches!(key, ParamKey::AdapterA { .. }) { &ad.a } else { &ad.b })
            }
        }
    }

    pub fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Matrix<T>> {
        match *key {
            ParamKey::InputProj => Some(&mut self.input_proj),
            ParamKey::OutputHead => Some(&mut self.output_head),
            ParamKey::Router { layer } => self.layers.get_mut(layer).map(|l| &mut l.router.w_router),
            ParamKey::Base { layer, group, kind } => {
                self.layers.get_mut(layer)?.bases.get_mut(group).map(|b| b.get_mut(kind))
            }
            ParamKey::Expert { layer, expert, kind } => {
                match self.layers.get_mut(layer)?.experts.get_mut(expert)? {
                    ExpertSlot::Dense { params, .. } => Some(params.get_mut(kind)),
                    _ => None,
                }
            }
            ParamKey::Original { layer, expert, kind } => {
                match self.layers.get_mut(layer)?.experts.get_mut(expert)? {
                    ExpertSlot::Replaced { original, .. } => original.as_mut().map(|o| o.get_mut(kind)),
                    _ => None,
                }
            }
            ParamKey::AdapterA { layer, expert, kind } | ParamKey::AdapterB { layer, expert, kind } => {
                let is_a = matches!(key, ParamKey::AdapterA { .. });
                let adapter = match self.layers.get_mut(layer)?.experts.get_mut(expert)? {
                    ExpertSlot::Dense { adapter, .. } => adapter.as_mut()?,
                    ExpertSlot::Replaced { adapter, .. } => adapter,
                };
                let ad = adapter.get_mut(kind);
                Some(if is_a { &mut ad.a } else { &mut ad.b })
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> MoeModel<U> {
        let expert = |p: &ExpertParams<T>| ExpertParams {
            w_in: p.w_in.cast(),
            w_out: p.w_out.cast(),
        };
        let adapter = |a: &ExpertAdapter<T>| ExpertAdapter {
            w_in: a.w_in.cast(),
            w_out: a.w_out.cast(),
        };
        MoeModel {
            hyper: self.hyper,
            input_proj: self.input_proj.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    router: RouterParams {
                        w_router: l.router.w_router.cast(),
                    },
                    experts: l
                        .experts
                        .iter()
                        .map(|s| match s {
                            ExpertSlot::Dense { params, adapter: ad } => ExpertSlot::Dense {
                                params: expert(params),
                                adapter: ad.as_ref().map(adapter),
                            },
                            ExpertSlot::Replaced {
                                group,
                                original,
                                adapter: ad,
                            } => ExpertSlot::Replaced {
                                group: *group,
                                original: original.as_ref().map(expert),
                                adapter: adapter(ad),
                            },
                        })
                        .collect(),
                    bases: l.bases.iter().map(SharedBase::cast).collect(),
                })
                .collect(),
            output_head: self.output_head.cast(),
            beta: self.beta,
        }
    }

    /// Drops frozen originals of replaced experts and folds retained-expert
    /// adapters into their dense weights. Requires `beta == 0`.
    pub fn finalize(&mut self) -> Result<()> {
        if self.beta != 0.0 {
            return Err(Error::Contract(format!(
                "originals can only be dropped at beta = 0 (beta = {})",
                self.beta
            )));
        }
        for layer in &mut self.layers {
            for slot in &mut layer.experts {
                match slot {
                    ExpertSlot::Dense { params, adapter } => {
                        if let Some(ad) = adapter.take() {
                            for kind in WeightKind::ALL {
                                let merged = params.get(kind).add(&ad.get(kind).delta())?;
                                *params.get_mut(kind) = merged;
                            }
                        }
                    }
                    ExpertSlot::Replaced { original, .. } => *original = None,
                }
            }
        }
        Ok(())
    }
}

impl crate::numerics::ParamAccess<ParamKey> for MoeModel<f64> {
    fn param_keys(&self) -> Vec<ParamKey> {
        self.params().into_iter().map(|(k, _)| k).collect()
    }

    fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Matrix<f64>> {
        MoeModel::param_mut(self, key)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn hyper(d_model: usize, num_experts: usize, top_k: usize, num_layers: usize) -> ModelHyper {
        ModelHyper {
            input_dim: 5,
            output_dim: 3,
            d_model,
            d_hidden: 2 * d_model,
            num_experts,
            top_k,
            num_layers,
            loss: LossKind::Mse,
        }
    }
}
