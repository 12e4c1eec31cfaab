//! Held-out evaluation over a fixed token budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeModel, TrainableSet};
use crate::numerics::Scalar;
use crate::tasks::{Split, Targets, Task};

pub const EVAL_BATCH_TOKENS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Token-weighted mean task loss.
    pub loss: f64,
    /// Fraction of correct argmax predictions (classification only).
    pub accuracy: Option<f64>,
}

/// Loss (and accuracy) over the first `tokens` tokens of the eval split.
pub fn evaluate<T: Scalar>(model: &MoeModel<T>, task: &Task, tokens: usize) -> Result<EvalMetrics> {
    if tokens == 0 {
        return Err(Error::Precondition("evaluation needs at least one token".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut classification = false;
    let mut left = tokens;
    let mut index = 0;
    while left > 0 {
        let n = left.min(EVAL_BATCH_TOKENS);
        let batch = task.batch::<T>(Split::Eval, index, n);
        let mut pass = model.forward(&batch.inputs, &TrainableSet::none())?;
        let node = model.attach_loss(&mut pass, &batch.targets)?;
        loss_sum += pass.graph.value(node).get(0, 0).as_f64() * n as f64;
        let pred = pass.prediction();
        if let Targets::Classes(labels) = &batch.targets {
            classification = true;
            for (t, &label) in labels.iter().enumerate() {
                let row = pred.row(t);
                let arg = (0..row.len())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                    .unwrap_or(0);
                correct += usize::from(arg == label);
            }
        }
        left -= n;
        index += 1;
    }
    let loss = loss_sum / tokens as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("eval loss is {loss}")));
    }
    Ok(EvalMetrics {
        loss,
        accuracy: classification.then(|| correct as f64 / tokens as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, ModelHyper};
    use crate::numerics::RandomSource;
    use crate::tasks::{TaskKind, TaskSpec};

    #[test]
    fn repeated_evaluation_is_identical() {
        let spec = TaskSpec {
            kind: TaskKind::ModularClassification,
            output_dim: 4,
            ..TaskSpec::default()
        };
        let task = Task::new(spec).unwrap();
        let hyper = ModelHyper {
            input_dim: 16,
            output_dim: 4,
            d_model: 8,
            d_hidden: 16,
            num_experts: 4,
            top_k: 2,
            num_layers: 1,
            loss: LossKind::CrossEntropy,
        };
        let model = MoeModel::<f32>::init(hyper, &mut RandomSource::new(0)).unwrap();
        let a = evaluate(&model, &task, 1500).unwrap();
        assert_eq!(a, evaluate(&model, &task, 1500).unwrap());
        let acc = a.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
