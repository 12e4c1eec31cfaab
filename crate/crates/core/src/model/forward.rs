use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, NodeId, Scalar};
use crate::tasks::Targets;

use super::routing::GatingOutput;
use super::train::TrainableSet;
use super::{ExpertSlot, MoeLayer, MoeModel, ParamKey, WeightKind};

/// A recorded forward pass: the graph plus the per-layer routing decisions.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub graph: Graph<T, ParamKey>,
    /// Prediction node, `tokens × output_dim`.
    pub output: NodeId,
    /// Input hidden state of each MoE layer, `tokens × d_model`.
    pub layer_inputs: Vec<NodeId>,
    /// Dense gate node of each layer (post-softmax).
    pub gate_nodes: Vec<NodeId>,
    pub gatings: Vec<GatingOutput<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn prediction(&self) -> &Matrix<T> {
        self.graph.value(self.output)
    }
}

fn leaf<T: Scalar>(g: &mut Graph<T, ParamKey>, key: ParamKey, value: &Matrix<T>, trainable: &TrainableSet) -> NodeId {
    if trainable.contains(&key) {
        g.param(key, value.clone())
    } else {
        g.constant(value.clone())
    }
}

/// Graph node for the effective weight of one expert matrix.
fn expert_weight_node<T: Scalar>(
    g: &mut Graph<T, ParamKey>,
    l: usize,
    layer: &MoeLayer<T>,
    e: usize,
    kind: WeightKind,
    beta: f64,
    trainable: &TrainableSet,
) -> Result<NodeId> {
    let adapter_node = |g: &mut Graph<T, ParamKey>, ad: &crate::construction::LowRankAdapter<T>| {
        let b = leaf(g, ParamKey::AdapterB { layer: l, expert: e, kind }, &ad.b, trainable);
        let a = leaf(g, ParamKey::AdapterA { layer: l, expert: e, kind }, &ad.a, trainable);
        g.matmul(b, a)
    };
    match &layer.experts[e] {
        ExpertSlot::Dense { params, adapter } => {
            let w = leaf(g, ParamKey::Expert { layer: l, expert: e, kind }, params.get(kind), trainable);
            match adapter {
                None => Ok(w),
                Some(ad) => {
                    let delta = adapter_node(g, ad.get(kind))?;
                    g.add(w, delta)
                }
            }
        }
        ExpertSlot::Replaced {
            group,
            original,
            adapter,
        } => {
            // Same term order as `annealing::effective_weight`.
            let mut acc: Option<NodeId> = None;
            if beta != 0.0 {
                let orig = original.as_ref().ok_or_else(|| {
                    Error::Contract(format!("expert {e} of layer {l} has no original weights but beta = {beta}"))
                })?;
                let w = leaf(g, ParamKey::Original { layer: l, expert: e, kind }, orig.get(kind), trainable);
                acc = Some(g.scale(w, T::from_f64(beta)));
            }
            if let Some(gi) = group {
                if beta != 1.0 {
                    let base = leaf(g, ParamKey::Base { layer: l, group: *gi, kind }, layer.bases[*gi].get(kind), trainable);
                    let scaled = g.scale(base, T::from_f64(1.0 - beta));
                    acc = Some(match acc {
                        Some(a) => g.add(a, scaled)?,
                        None => scaled,
                    });
                }
            }
            let delta = adapter_node(g, adapter.get(kind))?;
            match acc {
                Some(a) => g.add(a, delta),
                None => Ok(delta),
            }
        }
    }
}

/// Records one residual MoE layer: `y = h + Σ_active gate_i · expert_i(h)`.
/// Returns the output node, the dense-gate node and the routing decision.
fn layer_graph<T: Scalar>(
    g: &mut Graph<T, ParamKey>,
    l: usize,
    layer: &MoeLayer<T>,
    h: NodeId,
    top_k: usize,
    beta: f64,
    trainable: &TrainableSet,
) -> Result<(NodeId, NodeId, GatingOutput<T>)> {
    let n = layer.num_experts();
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!("top_k={top_k} must lie in 1..={n}")));
    }
    let router = leaf(g, ParamKey::Router { layer: l }, &layer.router.w_router, trainable);
    let logits = g.matmul(h, router)?;
    let gates = g.softmax_rows(logits)?;
    let gating = GatingOutput::from_parts(g.value(logits).clone(), g.value(gates).clone(), top_k);
    let sparse = g.top_k_renorm(gates, gating.active_indices.clone())?;

    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, idx) in gating.active_indices.iter().enumerate() {
        for &e in idx {
            routed[e].push(t);
        }
    }

    let mut acc = h;
    for (e, rows) in routed.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let w_in = expert_weight_node(g, l, layer, e, WeightKind::In, beta, trainable)?;
        let w_out = expert_weight_node(g, l, layer, e, WeightKind::Out, beta, trainable)?;
        let x = g.gather_rows(h, rows.clone());
        let pre = g.matmul(x, w_in)?;
        let act = g.silu(pre);
        let out = g.matmul(act, w_out)?;
        let gated = g.gate_rows(out, sparse, rows.clone(), e)?;
        acc = g.scatter_add_rows(acc, gated, rows)?;
    }
    Ok((acc, gates, gating))
}

impl<T: Scalar> MoeLayer<T> {
    /// Standalone evaluation of this layer on `x` (`tokens × d_model`).
    pub fn forward(&self, x: &Matrix<T>, top_k: usize, beta: f64) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let h = g.constant(x.clone());
        let (out, _, _) = layer_graph(&mut g, 0, self, h, top_k, beta, &TrainableSet::none())?;
        Ok(g.value(out).clone())
    }
}

impl<T: Scalar> MoeModel<T> {
    /// Records the full forward pass on `x` (`tokens × input_dim`).
    pub fn forward(&self, x: &Matrix<T>, trainable: &TrainableSet) -> Result<ForwardPass<T>> {
        if x.cols() != self.hyper.input_dim {
            return Err(Error::Contract(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.hyper.input_dim
            )));
        }
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let proj = leaf(&mut g, ParamKey::InputProj, &self.input_proj, trainable);
        let mut h = g.matmul(input, proj)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut gate_nodes = Vec::with_capacity(self.layers.len());
        let mut gatings = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(h);
            let (out, gates, gating) = layer_graph(&mut g, l, layer, h, self.hyper.top_k, self.beta, trainable)?;
            gate_nodes.push(gates);
            gatings.push(gating);
            h = out;
        }
        let head = leaf(&mut g, ParamKey::OutputHead, &self.output_head, trainable);
        let output = g.matmul(h, head)?;
        Ok(ForwardPass {
            graph: g,
            output,
            layer_inputs,
            gate_nodes,
            gatings,
        })
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let pass = self.forward(x, &TrainableSet::none())?;
        Ok(pass.prediction().clone())
    }

    /// Adds the task loss on top of a recorded pass.
    pub fn attach_loss(&self, pass: &mut ForwardPass<T>, targets: &Targets<T>) -> Result<NodeId> {
        match targets {
            Targets::Regression(t) => pass.graph.mse(pass.output, t.clone()),
            Targets::Classes(labels) => pass.graph.cross_entropy(pass.output, labels.clone()),
        }
    }

    /// Task loss of the model on one batch, without gradients.
    pub fn loss(&self, x: &Matrix<T>, targets: &Targets<T>) -> Result<f64> {
        let mut pass = self.forward(x, &TrainableSet::none())?;
        let node = self.attach_loss(&mut pass, targets)?;
        Ok(pass.graph.value(node).get(0, 0).as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::LowRankAdapter;
    use crate::model::test_support::hyper;
    use crate::model::{route, ExpertAdapter, ExpertParams, RouterParams};
    use crate::numerics::RandomSource;

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// Evaluates every expert on every token and mixes with the masked,
    /// renormalized gate matrix.
    fn dense_oracle(layer: &MoeLayer<f64>, x: &Matrix<f64>, top_k: usize) -> Matrix<f64> {
        let gating = route(&layer.router, x, top_k).unwrap();
        let gates = gating.sparse_gates();
        let mut y = x.clone();
        for e in 0..layer.num_experts() {
            let w_in = layer.expert_weight(e, WeightKind::In, 1.0).unwrap();
            let w_out = layer.expert_weight(e, WeightKind::Out, 1.0).unwrap();
            let out = x.matmul(&w_in).unwrap().map(silu).matmul(&w_out).unwrap();
            for t in 0..x.rows() {
                for c in 0..x.cols() {
                    y.set(t, c, y.get(t, c) + gates.get(t, e) * out.get(t, c));
                }
            }
        }
        y
    }

    #[test]
    fn sparse_equals_dense_evaluation() {
        let mut rng = RandomSource::new(4);
        let model = MoeModel::<f64>::init(hyper(6, 5, 2, 1), &mut rng).unwrap();
        let x = Matrix::randn(20, 6, 1.0, &mut rng);
        let layer = &model.layers[0];
        let sparse = layer.forward(&x, 2, 1.0).unwrap();
        assert!(sparse.max_abs_diff(&dense_oracle(layer, &x, 2)) < 1e-6);
        let single = model.cast::<f32>();
        let sparse32 = single.layers[0].forward(&x.cast(), 2, 1.0).unwrap();
        assert!(sparse32.cast::<f64>().max_abs_diff(&dense_oracle(layer, &x, 2)) < 1e-5);
    }

    #[test]
    fn zero_experts_leave_residual() {
        let mut rng = RandomSource::new(4);
        let mut model = MoeModel::<f64>::init(hyper(4, 3, 2, 1), &mut rng).unwrap();
        for slot in &mut model.layers[0].experts {
            if let ExpertSlot::Dense { params, .. } = slot {
                params.w_in = Matrix::zeros(4, 8);
                params.w_out = Matrix::zeros(8, 4);
            }
        }
        let x = Matrix::randn(7, 4, 1.0, &mut rng);
        assert_eq!(model.layers[0].forward(&x, 2, 1.0).unwrap(), x);
    }

    #[test]
    fn single_expert_by_hand() {
        // w_in = I, w_out = I on a 2-dim input: y = x + silu(x).
        let layer: MoeLayer<f64> = MoeLayer {
            router: RouterParams {
                w_router: Matrix::from_rows(&[&[0.4], &[-0.1]]),
            },
            experts: vec![ExpertSlot::Dense {
                params: ExpertParams {
                    w_in: Matrix::identity(2),
                    w_out: Matrix::identity(2),
                },
                adapter: None,
            }],
            bases: vec![],
        };
        let x = Matrix::from_rows(&[&[1.0, -2.0]]);
        let y = layer.forward(&x, 1, 1.0).unwrap();
        assert!((y.get(0, 0) - (1.0 + silu(1.0))).abs() < 1e-15);
        assert!((y.get(0, 1) - (-2.0 + silu(-2.0))).abs() < 1e-15);
    }

    #[test]
    fn zero_layer_model_is_linear() {
        let mut rng = RandomSource::new(8);
        let model = MoeModel::<f64>::init(hyper(4, 3, 2, 0), &mut rng).unwrap();
        let x = Matrix::randn(5, 5, 1.0, &mut rng);
        let want = x.matmul(&model.input_proj).unwrap().matmul(&model.output_head).unwrap();
        assert_eq!(model.predict(&x).unwrap(), want);
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let mut rng = RandomSource::new(8);
        let model = MoeModel::<f32>::init(hyper(4, 4, 2, 2), &mut rng).unwrap();
        let x = Matrix::randn(9, 5, 1.0, &mut rng);
        let a = model.predict(&x).unwrap();
        assert_eq!(a.shape(), (9, 3));
        assert_eq!(a, model.predict(&x).unwrap());
    }

    #[test]
    fn replaced_without_original_needs_beta_zero() {
        let mut rng = RandomSource::new(8);
        let mut model = MoeModel::<f64>::init(hyper(4, 2, 2, 1), &mut rng).unwrap();
        model.layers[0].experts[0] = ExpertSlot::Replaced {
            group: None,
            original: None,
            adapter: ExpertAdapter {
                w_in: LowRankAdapter::zeros(4, 8, 1),
                w_out: LowRankAdapter::zeros(8, 4, 1),
            },
        };
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        assert!(model.predict(&x).is_err());
        model.beta = 0.0;
        assert!(model.predict(&x).is_ok());
    }
}
