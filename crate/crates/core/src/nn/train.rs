//! SGD training loop and intervened evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::intervene::InterventionPlan;
use crate::rng::stream;

use super::layers::batch_metrics;
use super::model::{Mode, Model};

/// Examples per forward pass during evaluation. Results never depend on this
/// (noise streams are derived per example), it only bounds memory.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Classical momentum on the gradient (0 = plain SGD). The velocity is
    /// accumulated in the training loop; the parameter update itself is
    /// always `p -= lr * v`.
    #[serde(default)]
    pub momentum: f64,
    /// Recorded alongside the architecture; consumed by the model builders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub batchnorm: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "dropout probability must be in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Metrics recorded at the end of each epoch. Train loss/accuracy are the
/// running averages over that epoch's train-mode batches; test metrics are an
/// eval-mode pass over the attached test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Observer verdict after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainFlow {
    Continue,
    /// Stop after the current epoch; training returns normally.
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Train with plain SGD. Deterministic given `config.seed`: initialization
/// is the model's concern, data order and dropout masks are drawn from the
/// seed here. Divergence (non-finite loss) aborts with the epoch index.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    train_with_observer(model, train_set, test_set, config, |_, _| TrainFlow::Continue)
}

/// [`train`] with a per-epoch observer. The observer sees the model in eval
/// mode (read-only snapshot semantics: it must not mutate) and may stop the
/// run early.
pub fn train_with_observer(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut observer: impl FnMut(&Model, &EpochMetrics) -> TrainFlow,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut shuffle_rng = stream(config.seed, "shuffle");
    let mut dropout_rng = stream(config.seed, "dropout");
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut velocity: Option<crate::nn::Gradients> = None;

    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch_indices in order.chunks(config.batch_size) {
            let (batch, labels) = train_set.batch(batch_indices);
            let trace = model.forward_train(&batch, &labels, &mut dropout_rng)?;
            let loss = trace.loss.expect("train forward computes loss");
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}: loss is not finite"
                )));
            }
            let (batch_correct, _) = batch_metrics(trace.logits(), &labels);
            loss_sum += loss * batch_indices.len() as f64;
            correct += batch_correct;

            let grads = model.backward(&trace, &labels)?;
            if config.momentum > 0.0 {
                let v = match velocity.as_mut() {
                    Some(v) => {
                        v.momentum_update(config.momentum, &grads)?;
                        v
                    }
                    None => velocity.insert(grads),
                };
                model.sgd_step(v, config.lr)?;
            } else {
                model.sgd_step(&grads, config.lr)?;
            }
        }
        model.set_mode(Mode::Eval);

        let (test_loss, test_acc) = match test_set {
            Some(test) => {
                let eval = evaluate(model, test, None, None)?;
                (Some(eval.mean_loss), Some(eval.accuracy))
            }
            None => (None, None),
        };
        let record = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_loss,
            test_acc,
        };
        let flow = observer(model, &record);
        metrics.push(record);
        if flow == TrainFlow::Stop {
            break;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(metrics)
}

/// Accuracy and mean loss over a dataset, optionally under an intervention.
/// `noise_seed` overrides the plan's noise seed when given; evaluation
/// without noise is seed-independent.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    plan: Option<&InterventionPlan>,
    noise_seed: Option<u64>,
) -> Result<Evaluation> {
    if model.mode != Mode::Eval {
        return Err(Error::State("evaluate requires an eval-mode model".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }

    // Rebind the noise seed if requested.
    let reseeded;
    let plan = match (plan, noise_seed) {
        (Some(p), Some(seed)) if p.noise.is_some() => {
            let mut p2 = p.clone();
            if let Some(noise) = &mut p2.noise {
                noise.seed = seed;
            }
            reseeded = p2;
            Some(&reseeded)
        }
        (p, _) => p,
    };

    let n = dataset.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (batch, labels) = dataset.batch(&indices);
        let trace = model.forward_eval(&batch, None, plan, start)?;
        let (batch_correct, batch_loss) = batch_metrics(trace.logits(), &labels);
        correct += batch_correct;
        loss_sum += batch_loss;
        start = end;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            batch_size: 16,
            epochs,
            seed,
            momentum: 0.0,
            dropout: None,
            batchnorm: false,
        }
    }

    #[test]
    fn zero_epochs_leaves_model_at_init() {
        let data = synthetic_blobs(8, 2, 4, 3.0, 1).unwrap();
        let mut model = Model::mlp(&[4], &[8], 2, None, 42).unwrap();
        let init = model.clone();
        let metrics = train(&mut model, &data, None, &config(0, 1)).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(model, init);
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = synthetic_blobs(50, 2, 2, 10.0, 2).unwrap();
        let mut model = Model::mlp(&[2], &[16], 2, None, 3).unwrap();
        train(&mut model, &data, None, &config(50, 4)).unwrap();
        let eval = evaluate(&model, &data, None, None).unwrap();
        assert!(eval.accuracy >= 0.99, "accuracy {}", eval.accuracy);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let data = synthetic_blobs(20, 3, 5, 2.0, 7).unwrap();
        let run = || {
            let mut model = Model::mlp(&[5], &[12], 3, Some(0.2), 9).unwrap();
            train(&mut model, &data, None, &config(5, 11)).unwrap();
            model
        };
        let a = run();
        let b = run();
        for ((_, _, pa), (_, _, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert!(pa.bit_eq(pb));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let data = synthetic_blobs(4, 2, 2, 1.0, 1).unwrap();
        let mut model = Model::mlp(&[2], &[4], 2, None, 1).unwrap();
        let mut bad = config(1, 1);
        bad.lr = 0.0;
        assert!(matches!(
            train(&mut model, &data, None, &bad),
            Err(Error::Config(_))
        ));
        let mut bad = config(1, 1);
        bad.batch_size = 0;
        assert!(train(&mut model, &data, None, &bad).is_err());
    }

    #[test]
    fn observer_can_stop_early() {
        let data = synthetic_blobs(10, 2, 3, 5.0, 1).unwrap();
        let mut model = Model::mlp(&[3], &[8], 2, None, 2).unwrap();
        let metrics = train_with_observer(&mut model, &data, None, &config(100, 3), |_, m| {
            if m.epoch >= 4 {
                TrainFlow::Stop
            } else {
                TrainFlow::Continue
            }
        })
        .unwrap();
        assert_eq!(metrics.len(), 5);
    }

    #[test]
    fn test_metrics_recorded_when_attached() {
        let data = synthetic_blobs(20, 2, 3, 4.0, 5).unwrap();
        let parts = crate::data::split(&data, &[0.75, 0.25], 6).unwrap();
        let mut model = Model::mlp(&[3], &[8], 2, None, 7).unwrap();
        let metrics = train(&mut model, &parts[0], Some(&parts[1]), &config(3, 8)).unwrap();
        assert_eq!(metrics.len(), 3);
        assert!(metrics.iter().all(|m| m.test_loss.is_some() && m.test_acc.is_some()));
    }
}
