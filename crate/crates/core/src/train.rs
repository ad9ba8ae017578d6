//! Mini-batch SGD for one encoder/decoder, with step decay and early stopping
//! on validation accuracy.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights};
use crate::model::{prediction_from_probs, EncoderDecoder};
use crate::nn::{Pass, SgdConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub sgd: SgdConfig,
    /// Epoch (0-based) from which the rate is multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Center learning rate as a multiple of the network rate.
    pub center_lr_factor: f64,
}

impl Schedule {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(e) if epoch >= e => self.sgd.learning_rate * self.decay_factor,
            _ => self.sgd.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (the last one without early stopping).
    pub best_epoch: usize,
    pub best_validation_accuracy: Option<f64>,
    /// Loss terms summed over the final epoch.
    pub final_terms: LossTerms,
}

/// Accuracy and summed cross-entropy of the softmax head.
pub fn evaluate(model: &EncoderDecoder, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let (out, _) = model.encode(x, Pass::Eval)?;
    let pred = prediction_from_probs(out.softmax.view());
    let correct = pred.labels.iter().zip(labels).filter(|(p, t)| p == t).count();
    let ce = losses::cross_entropy(out.softmax.view(), labels)?.loss;
    Ok((correct as f64 / labels.len() as f64, ce))
}

/// Trains `model` in place on the columns of `x`. `targets[j]` is the label of
/// column `j` or `None` for an unlabeled column.
///
/// With a validation set and a patience, the parameters of the best epoch
/// (highest accuracy, then lowest validation cross-entropy) are restored at
/// the end.
pub fn train(
    model: &mut EncoderDecoder,
    x: ArrayView2<f64>,
    targets: &[Option<usize>],
    weights: &LossWeights,
    schedule: &Schedule,
    validation: Option<(ArrayView2<f64>, &[usize])>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    schedule.sgd.validate()?;
    if x.ncols() != targets.len() {
        return Err(Error::shape("training targets", x.ncols(), targets.len()));
    }
    let mut report = TrainReport::default();
    if x.ncols() == 0 {
        return Ok(report);
    }
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    let mut best: Option<(f64, f64, EncoderDecoder)> = None;
    let mut since_best = 0usize;

    for epoch in 0..schedule.sgd.max_epochs {
        let lr = schedule.learning_rate(epoch);
        let center_lr = lr * schedule.center_lr_factor;
        order.shuffle(rng);
        let mut terms = LossTerms::default();
        for batch in order.chunks(schedule.sgd.batch_size) {
            let xb = x.select(Axis(1), batch);
            let tb: Vec<Option<usize>> = batch.iter().map(|&j| targets[j]).collect();
            let grads = model.loss_and_gradients(xb.view(), &tb, weights, Pass::Train(rng))?;
            terms += grads.terms;
            model.apply_gradients(&grads, lr, center_lr)?;
        }
        report.epochs_run = epoch + 1;
        report.best_epoch = epoch;
        report.final_terms = terms;

        if let (Some((vx, vy)), Some(patience)) = (validation, schedule.patience) {
            let (acc, ce) = evaluate(model, vx, vy)?;
            let improved = match &best {
                None => true,
                Some((best_acc, best_ce, _)) => acc > *best_acc || (acc == *best_acc && ce < *best_ce),
            };
            if improved {
                best = Some((acc, ce, model.clone()));
                report.best_validation_accuracy = Some(acc);
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= patience {
                break;
            }
        }
    }
    if let Some((acc, _, snapshot)) = best {
        *model = snapshot;
        report.best_validation_accuracy = Some(acc);
        report.best_epoch = report.epochs_run - 1 - since_best;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::seeds;
    use ndarray::Array2;
    use rand::Rng;

    fn blobs(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seeds::stream(seed, "blobs");
        let labels: Vec<usize> = (0..60).map(|j| j % 3).collect();
        let x = Array2::from_shape_fn((4, 60), |(i, j)| {
            (if i == labels[j] { 3.0 } else { 0.0 }) + rng.gen_range(-0.5..0.5)
        });
        (x, labels)
    }

    fn schedule(epochs: usize) -> Schedule {
        Schedule {
            sgd: SgdConfig {
                learning_rate: 1e-2,
                batch_size: 16,
                max_epochs: epochs,
                seed: 0,
            },
            decay_epoch: None,
            decay_factor: 0.1,
            patience: None,
            center_lr_factor: 5.0,
        }
    }

    #[test]
    fn learns_separable_blobs() {
        let (x, labels) = blobs(1);
        let targets: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
        let mut model = init_model(4, 3, 1, &ModelConfig { hidden: 16, dropout: 0.1 }).unwrap();
        model.init_centers(x.view(), &labels).unwrap();
        let mut rng = seeds::stream(1, seeds::DROPOUT);
        let before = evaluate(&model, x.view(), &labels).unwrap();
        train(&mut model, x.view(), &targets, &LossWeights::default(), &schedule(60), None, &mut rng).unwrap();
        let after = evaluate(&model, x.view(), &labels).unwrap();
        assert!(after.0 >= 0.95, "accuracy {after:?}");
        assert!(after.1 < before.1);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, labels) = blobs(2);
        let targets: Vec<Option<usize>> = labels.iter().enumerate().map(|(j, &l)| (j % 2 == 0).then_some(l)).collect();
        let run = || {
            let mut model = init_model(4, 3, 5, &ModelConfig { hidden: 8, dropout: 0.3 }).unwrap();
            let mut rng = seeds::stream(5, seeds::DROPOUT);
            train(&mut model, x.view(), &targets, &LossWeights::default(), &schedule(5), None, &mut rng).unwrap();
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let (x, labels) = blobs(3);
        let targets: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
        let mut model = init_model(4, 3, 2, &ModelConfig { hidden: 8, dropout: 0.0 }).unwrap();
        let mut rng = seeds::stream(2, seeds::DROPOUT);
        let mut sched = schedule(500);
        sched.patience = Some(3);
        let report = train(
            &mut model,
            x.view(),
            &targets,
            &LossWeights::default(),
            &sched,
            Some((x.view(), &labels)),
            &mut rng,
        )
        .unwrap();
        assert!(report.epochs_run < 500);
        assert_eq!(report.epochs_run, report.best_epoch + 4);
        let (acc, _) = evaluate(&model, x.view(), &labels).unwrap();
        assert_eq!(Some(acc), report.best_validation_accuracy);
    }

    #[test]
    fn step_decay() {
        let mut s = schedule(10);
        s.decay_epoch = Some(100);
        assert_eq!(s.learning_rate(99), 1e-2);
        assert!((s.learning_rate(100) - 1e-3).abs() < 1e-18);
    }
}
