//! Adam optimizer and the training loop with early stopping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    accuracy, binary_f1, loss, normalized_adjacency, predict, AblationVariant, EvalMetric,
    Hypformer, HypformerConfig,
};
use crate::autodiff::{backward, SparseMatrix, Tensor};
use crate::blocks::Mode;
use crate::data::GraphDataset;
use crate::error::{Error, Result};

/// One metrics line per epoch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub kappa_hidden: f64,
}

/// History plus the best-validation checkpoint position.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best_test: f64,
}

struct AdamSlot {
    tensor: Tensor,
    m: Array2<f64>,
    v: Array2<f64>,
    lr_scale: f64,
    weight_decay: f64,
}

/// Adam (beta 0.9/0.999, eps 1e-8). Weight decay applies to weight
/// matrices only (names ending in `.w` or `.psi`); curvature scalars
/// (names starting with `kappa`) train at a 10x smaller rate.
pub struct Adam {
    slots: Vec<AdamSlot>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)], lr: f64, weight_decay: f64) -> Adam {
        let slots = params
            .iter()
            .map(|(name, tensor)| {
                let shape = tensor.shape();
                AdamSlot {
                    tensor: tensor.clone(),
                    m: Array2::zeros(shape),
                    v: Array2::zeros(shape),
                    lr_scale: if name.starts_with("kappa") { 0.1 } else { 1.0 },
                    weight_decay: if name.ends_with(".w") || name.ends_with(".psi") {
                        weight_decay
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        Adam {
            slots,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(mut g) = slot.tensor.grad() else {
                continue;
            };
            if slot.weight_decay > 0.0 {
                g = g + slot.weight_decay * &slot.tensor.value();
            }
            slot.m = self.beta1 * &slot.m + (1.0 - self.beta1) * &g;
            slot.v = self.beta2 * &slot.v + (1.0 - self.beta2) * &(&g * &g);
            let lr = self.lr * slot.lr_scale;
            let m_hat = &slot.m / bc1;
            let v_hat = &slot.v / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * lr;
            slot.tensor.update_values(|v| *v -= &update);
            slot.tensor.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.tensor.zero_grad();
        }
    }
}

fn metric_for(
    metric: EvalMetric,
    preds: &[usize],
    labels: &[usize],
    idx: &[usize],
) -> Result<f64> {
    match metric {
        EvalMetric::Accuracy => Ok(accuracy(preds, labels, idx)),
        EvalMetric::BinaryF1 => binary_f1(preds, labels, idx),
    }
}

/// Train with early stopping on the validation metric; the model is left
/// holding the best-validation parameters.
pub fn train(model: &mut Hypformer, dataset: &GraphDataset) -> Result<TrainResult> {
    dataset.validate()?;
    for (name, part) in [
        ("train", &dataset.splits.train),
        ("val", &dataset.splits.val),
        ("test", &dataset.splits.test),
    ] {
        if part.is_empty() {
            return Err(Error::DatasetInvalid {
                code: "empty-split",
                detail: format!("{name} split is empty"),
            });
        }
    }
    let config = model.config().clone();
    if config.eval_metric == EvalMetric::BinaryF1 && dataset.num_classes > 2 {
        return Err(Error::Domain {
            op: "train",
            detail: "binary F1 configured for a non-binary dataset".into(),
        });
    }
    if dataset.feature_dim() != config.d_in {
        return Err(Error::Config(format!(
            "dataset feature dim {} but config d_in {}",
            dataset.feature_dim(),
            config.d_in
        )));
    }
    if dataset.num_classes > config.d_out {
        return Err(Error::Config(format!(
            "dataset has {} classes but config d_out {}",
            dataset.num_classes, config.d_out
        )));
    }

    let adjacency: Option<SparseMatrix> = if model.needs_adjacency() {
        Some(normalized_adjacency(dataset.num_nodes(), &dataset.edges)?)
    } else {
        None
    };
    let features = Tensor::from_array(dataset.features.clone());

    let params = model.parameters();
    let mut optimizer = Adam::new(&params, config.lr, config.weight_decay);
    optimizer.zero_grad();

    let snapshot = |params: &[(String, Tensor)]| -> Vec<Array2<f64>> {
        params.iter().map(|(_, t)| t.value()).collect()
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_test = 0.0f64;
    let mut best_params = snapshot(&params);
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let logits = model.forward(&features, adjacency.as_ref(), Mode::Train)?;
        let train_loss = loss(&logits, &dataset.labels, &dataset.splits.train)?;
        let loss_value = train_loss.item();
        if !loss_value.is_finite() {
            crate::autodiff::clear_tape();
            let stage = model
                .find_nan_stage(&features, adjacency.as_ref())
                .unwrap_or_else(|| "loss".into());
            return Err(Error::Numerical {
                epoch,
                detail: format!("non-finite loss (first bad stage: {stage})"),
            });
        }
        backward(&train_loss)?;
        optimizer.step();

        let kappas = model.curvature_values();
        if kappas.iter().any(|k| !k.is_finite() || *k >= 0.0) {
            return Err(Error::Numerical {
                epoch,
                detail: format!("curvature left the negative half-line: {kappas:?}"),
            });
        }

        let preds = predict(model, dataset, adjacency.as_ref())?;
        let val_metric = metric_for(
            config.eval_metric,
            &preds,
            &dataset.labels,
            &dataset.splits.val,
        )?;
        let test_metric = metric_for(
            config.eval_metric,
            &preds,
            &dataset.labels,
            &dataset.splits.test,
        )?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_value,
            val_metric,
            test_metric,
            kappa_hidden: kappas[1],
        });

        if val_metric > best_val {
            best_val = val_metric;
            best_epoch = epoch;
            best_test = test_metric;
            best_params = snapshot(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    // Restore the best-validation checkpoint.
    for ((_, tensor), values) in params.iter().zip(best_params) {
        tensor.set_values(values);
    }

    Ok(TrainResult {
        history,
        best_epoch,
        best_val,
        best_test,
    })
}

/// Train one ablation variant under the shared protocol; returns the
/// result and the trained model.
pub fn ablate(
    config: HypformerConfig,
    dataset: &GraphDataset,
    variant: AblationVariant,
) -> Result<(TrainResult, Hypformer)> {
    let mut model = Hypformer::with_variant(config, variant)?;
    let result = train(&mut model, dataset)?;
    Ok((result, model))
}
