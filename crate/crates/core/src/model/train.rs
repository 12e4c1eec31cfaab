use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Gradients, Graph, Matrix, NodeId, Scalar};
use crate::tasks::Batch;

use super::{MoeModel, ParamClass, ParamKey};

/// Parameter ids eligible for gradient updates. Everything else is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet(BTreeSet<ParamKey>);

impl TrainableSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all<T: Scalar>(model: &MoeModel<T>) -> Self {
        Self::where_class(model, |_| true)
    }

    /// Every low-rank adapter, retained and replaced experts alike.
    pub fn adapters<T: Scalar>(model: &MoeModel<T>) -> Self {
        Self::where_class(model, |c| c == ParamClass::Adapter)
    }

    /// Adapters of replaced experts only.
    pub fn replaced_adapters<T: Scalar>(model: &MoeModel<T>) -> Self {
        Self(
            model
                .params()
                .into_iter()
                .map(|(k, _)| k)
                .filter(|k| match *k {
                    ParamKey::AdapterA { layer, expert, .. } | ParamKey::AdapterB { layer, expert, .. } => {
                        model.layers[layer].experts[expert].is_replaced()
                    }
                    _ => false,
                })
                .collect(),
        )
    }

    pub fn where_class<T: Scalar>(model: &MoeModel<T>, keep: impl Fn(ParamClass) -> bool) -> Self {
        Self(
            model
                .params()
                .into_iter()
                .map(|(k, _)| k)
                .filter(|k| keep(k.class()))
                .collect(),
        )
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.0.contains(key)
    }

    pub fn insert(&mut self, key: ParamKey) {
        self.0.insert(key);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamKey> {
        self.0.iter()
    }
}

/// One forward/backward/AdamW step restricted to `trainable`.
/// Returns the loss measured before the update.
pub fn train_step<T: Scalar>(
    model: &mut MoeModel<T>,
    batch: &Batch<T>,
    optimizer: &mut AdamW<T, ParamKey>,
    trainable: &TrainableSet,
) -> Result<f64> {
    train_step_with(model, batch, optimizer, trainable, 0.0)
}

/// [`train_step`] with an optional load-balancing penalty
/// `aux_coef · N · Σ_i f_i · P_i` per layer, where `f_i` is the fraction of
/// routing slots taken by expert `i` and `P_i` its mean dense gate.
pub fn train_step_with<T: Scalar>(
    model: &mut MoeModel<T>,
    batch: &Batch<T>,
    optimizer: &mut AdamW<T, ParamKey>,
    trainable: &TrainableSet,
    aux_coef: f64,
) -> Result<f64> {
    let mut pass = model.forward(&batch.inputs, trainable)?;
    let task_loss = model.attach_loss(&mut pass, &batch.targets)?;
    let loss_value = pass.graph.value(task_loss).get(0, 0).as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss_value}")));
    }
    let mut total = task_loss;
    if aux_coef != 0.0 {
        for (gates, gating) in pass.gate_nodes.clone().into_iter().zip(pass.gatings.clone()) {
            let aux = load_balance(&mut pass.graph, gates, &gating.active_indices, model.hyper.num_experts)?;
            let weighted = pass.graph.scale(aux, T::from_f64(aux_coef));
            total = pass.graph.add(total, weighted)?;
        }
    }
    if trainable.is_empty() {
        return Ok(loss_value);
    }
    let grads = pass.graph.backward(total)?;
    for (key, grad) in &grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {key} is not finite")));
        }
    }
    for (key, grad) in grads {
        let param = model
            .param_mut(&key)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {key}")))?;
        optimizer.update(&key, param, &grad);
    }
    Ok(loss_value)
}

/// Task loss on `batch` and its gradients with respect to `trainable`.
pub fn loss_and_gradients<T: Scalar>(
    model: &MoeModel<T>,
    batch: &Batch<T>,
    trainable: &TrainableSet,
) -> Result<(f64, Gradients<T, ParamKey>)> {
    let mut pass = model.forward(&batch.inputs, trainable)?;
    let loss = model.attach_loss(&mut pass, &batch.targets)?;
    let value = pass.graph.value(loss).get(0, 0).as_f64();
    Ok((value, pass.graph.backward(loss)?))
}

fn load_balance<T: Scalar>(
    g: &mut Graph<T, ParamKey>,
    gates: NodeId,
    active: &[Vec<usize>],
    n: usize,
) -> Result<NodeId> {
    let tokens = active.len();
    let mean_row = g.constant(Matrix::filled(1, tokens, T::from_f64(1.0 / tokens as f64)));
    let mean_gate = g.matmul(mean_row, gates)?;
    let slots: usize = active.iter().map(Vec::len).sum();
    let mut frac = Matrix::zeros(n, 1);
    for idx in active {
        for &e in idx {
            frac.set(e, 0, frac.get(e, 0) + T::one());
        }
    }
    let frac = g.constant(frac.scale(T::from_f64(n as f64 / slots as f64)));
    g.matmul(mean_gate, frac)
}
