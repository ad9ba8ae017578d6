//! Iterative pseudo-labeling: train per-modality models on the labeled data,
//! accept unlabeled pairs whose active-modality prediction is confident and
//! agrees with the nearest class mean, fine-tune on the enlarged set, repeat
//! until the pool size stops changing.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, Partition};
use crate::error::{Error, Result};
use crate::eval::per_class_accuracy;
use crate::losses::LossWeights;
use crate::model::{init_model, EncoderDecoder, ModelConfig};
use crate::seeds;
use crate::train::{self, Schedule, TrainReport};

/// Per-modality class means (`C × d_t`) of the original labeled features.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFeatureBank {
    pub means: [Array2<f64>; 2],
}

impl MeanFeatureBank {
    pub fn num_classes(&self) -> usize {
        self.means[0].nrows()
    }

    /// Nearest-mean labels for every column of `x`.
    pub fn predict_batch(&self, modality: usize, x: ArrayView2<f64>) -> Vec<usize> {
        x.columns().into_iter().map(|c| mean_feature_predict(self, c, modality)).collect()
    }
}

/// Class means per modality from the columns of `views` with `labels`.
pub fn compute_class_means(views: [ArrayView2<f64>; 2], labels: &[usize], classes: usize) -> Result<MeanFeatureBank> {
    let mut counts = vec![0usize; classes];
    for (j, &k) in labels.iter().enumerate() {
        if k >= classes {
            return Err(Error::LabelOutOfRange { sample: j, label: k, classes });
        }
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    let means = views.map(|v| {
        let mut m = Array2::<f64>::zeros((classes, v.nrows()));
        for (col, &k) in v.columns().into_iter().zip(labels) {
            let mut row = m.row_mut(k);
            row += &col;
        }
        for (mut row, &n) in m.rows_mut().into_iter().zip(&counts) {
            row /= n as f64;
        }
        m
    });
    for (t, v) in views.iter().enumerate() {
        if v.ncols() != labels.len() {
            return Err(Error::shape(format!("modality {} features", t + 1), labels.len(), v.ncols()));
        }
    }
    Ok(MeanFeatureBank { means })
}

/// Class whose mean is nearest in squared Euclidean distance; ties go to the
/// lowest index.
pub fn mean_feature_predict(bank: &MeanFeatureBank, sample: ArrayView1<f64>, modality: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, mu) in bank.means[modality].rows().into_iter().enumerate() {
        let d: f64 = mu.iter().zip(sample).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Fraction of validation samples whose predicted label is correct.
pub fn validation_accuracy(model: &EncoderDecoder, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let pred = model.predict_label(x)?;
    let correct = pred.labels.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Modality1,
    Modality2,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Modality1 => 0,
            Side::Modality2 => 1,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintDecision {
    pub active: Side,
    pub cf: [f64; 2],
    pub tau: f64,
}

/// Modality 1's conditions are in force when `cf_1 >= cf_2`.
pub fn build_constraint_set(cf1: f64, cf2: f64, tau: f64) -> ConstraintDecision {
    ConstraintDecision {
        active: if cf1 >= cf2 { Side::Modality1 } else { Side::Modality2 },
        cf: [cf1, cf2],
        tau,
    }
}

/// Predictions for one unlabeled pair from both encoders and both mean banks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence {
    pub encoder_label: [usize; 2],
    pub confidence: [f64; 2],
    pub mean_label: [usize; 2],
}

impl Evidence {
    pub fn accepted(&self, decision: &ConstraintDecision) -> bool {
        let t = decision.active.index();
        self.confidence[t] >= decision.tau && self.mean_label[t] == self.encoder_label[t]
    }

    pub fn assigned_label(&self, decision: &ConstraintDecision) -> usize {
        self.encoder_label[decision.active.index()]
    }
}

/// Evaluates both models and the mean bank on paired unlabeled columns.
pub fn gather_evidence(
    models: [&EncoderDecoder; 2],
    bank: &MeanFeatureBank,
    unlabeled: [ArrayView2<f64>; 2],
) -> Result<Vec<Evidence>> {
    if unlabeled[0].ncols() != unlabeled[1].ncols() {
        return Err(Error::Alignment {
            what: format!(
                "unlabeled modality 1 has {} samples, modality 2 has {}",
                unlabeled[0].ncols(),
                unlabeled[1].ncols()
            ),
        });
    }
    let preds = [models[0].predict_label(unlabeled[0])?, models[1].predict_label(unlabeled[1])?];
    let means = [bank.predict_batch(0, unlabeled[0]), bank.predict_batch(1, unlabeled[1])];
    Ok((0..unlabeled[0].ncols())
        .map(|j| Evidence {
            encoder_label: [preds[0].labels[j], preds[1].labels[j]],
            confidence: [preds[0].confidences[j], preds[1].confidences[j]],
            mean_label: [means[0][j], means[1][j]],
        })
        .collect())
}

/// Accepted positions (into the evidence slice) with their assigned labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn select_from_evidence(evidence: &[Evidence], decision: &ConstraintDecision) -> Selection {
    let mut sel = Selection::default();
    for (j, e) in evidence.iter().enumerate() {
        if e.accepted(decision) {
            sel.positions.push(j);
            sel.labels.push(e.assigned_label(decision));
        }
    }
    sel
}

pub fn select_pseudo_labels(
    models: [&EncoderDecoder; 2],
    bank: &MeanFeatureBank,
    unlabeled: [ArrayView2<f64>; 2],
    decision: &ConstraintDecision,
) -> Result<Selection> {
    let evidence = gather_evidence(models, bank, unlabeled)?;
    Ok(select_from_evidence(&evidence, decision))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpfConfig {
    pub tau: f64,
    pub max_iterations: usize,
}

impl Default for LpfConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            max_iterations: 10,
        }
    }
}

impl LpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything [`run_lpf`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LpfSettings {
    pub lpf: LpfConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub initial: Schedule,
    pub finetune: Schedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cf: [f64; 2],
    pub active: Side,
    pub selected: usize,
    /// Fraction of selected samples whose assigned label is the true label;
    /// `None` for an empty selection.
    pub accuracy: Option<f64>,
    /// Selected samples whose true class is outside the training classes.
    pub contaminated: usize,
    /// Per modality, per class accuracy of the encoder on in-class unlabeled samples.
    pub per_class: [Vec<Option<f64>>; 2],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelPool {
    /// Dataset indices of the selected unlabeled samples, ascending.
    pub selected: Vec<usize>,
    pub labels: Vec<usize>,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct LpfOutcome {
    pub models: [EncoderDecoder; 2],
    pub bank: MeanFeatureBank,
    pub pool: PseudoLabelPool,
    pub initial_reports: [TrainReport; 2],
    /// `X^tr` followed by the final pool, as dataset indices.
    pub expanded_indices: Vec<usize>,
    pub expanded_labels: Vec<usize>,
}

/// Runs the pseudo-labeling loop on `dataset` (already normalised).
///
/// Labels of `partition.unlabeled` are only read to score the selections.
/// Labels `>= num_classes` mark out-of-class samples.
pub fn run_lpf(
    dataset: &PairedDataset,
    partition: &Partition,
    num_classes: usize,
    settings: &LpfSettings,
    seed: u64,
) -> Result<LpfOutcome> {
    settings.lpf.validate()?;
    settings.weights.validate()?;
    let train_set = dataset.select(&partition.train);
    let val_set = dataset.select(&partition.validation);
    let unl_set = dataset.select(&partition.unlabeled);
    if val_set.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let labeled = dataset.select(&partition.labeled());
    let bank = compute_class_means([labeled.view(0), labeled.view(1)], &labeled.labels, num_classes)?;

    let mut models = Vec::with_capacity(2);
    let mut reports = Vec::with_capacity(2);
    let mut rngs = Vec::with_capacity(2);
    let train_targets: Vec<Option<usize>> = train_set.labels.iter().copied().map(Some).collect();
    for t in 0..2 {
        let mut model = init_model(
            dataset.dims()[t],
            num_classes,
            seeds::derive(seed, &format!("{}/{}", seeds::INIT, t + 1)),
            &settings.model,
        )?;
        model.init_centers(train_set.view(t), &train_set.labels)?;
        let mut rng = seeds::stream(seed, &format!("{}/{}", seeds::DROPOUT, t + 1));
        let report = train::train(
            &mut model,
            train_set.view(t),
            &train_targets,
            &settings.weights,
            &settings.initial,
            Some((val_set.view(t), &val_set.labels)),
            &mut rng,
        )?;
        log::info!(
            "modality {}: initial training stopped after {} epochs (best {:?})",
            t + 1,
            report.epochs_run,
            report.best_validation_accuracy
        );
        models.push(model);
        reports.push(report);
        rngs.push(rng);
    }
    let mut models: [EncoderDecoder; 2] = models.try_into().expect("two models");
    let initial_reports: [TrainReport; 2] = reports.try_into().expect("two reports");

    let mut pool = PseudoLabelPool::default();
    let in_class: Vec<usize> = (0..unl_set.len()).filter(|&j| unl_set.labels[j] < num_classes).collect();
    let mut previous: Option<usize> = None;
    if !unl_set.is_empty() {
        for iteration in 1..=settings.lpf.max_iterations {
            let cf = [
                validation_accuracy(&models[0], val_set.view(0), &val_set.labels)?,
                validation_accuracy(&models[1], val_set.view(1), &val_set.labels)?,
            ];
            let decision = build_constraint_set(cf[0], cf[1], settings.lpf.tau);
            let evidence = gather_evidence([&models[0], &models[1]], &bank, [unl_set.view(0), unl_set.view(1)])?;
            let selection = select_from_evidence(&evidence, &decision);

            let truth: Vec<usize> = selection.positions.iter().map(|&j| unl_set.labels[j]).collect();
            let correct = truth.iter().zip(&selection.labels).filter(|(a, b)| a == b).count();
            let contaminated = truth.iter().filter(|&&k| k >= num_classes).count();
            let per_class = [0, 1].map(|t| {
                let predicted: Vec<usize> = in_class.iter().map(|&j| evidence[j].encoder_label[t]).collect();
                let actual: Vec<usize> = in_class.iter().map(|&j| unl_set.labels[j]).collect();
                per_class_accuracy(&predicted, &actual, num_classes)
            });
            let count = selection.positions.len();
            pool.history.push(IterationRecord {
                iteration,
                cf,
                active: decision.active,
                selected: count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
                contaminated,
                per_class,
            });
            pool.selected = selection.positions.iter().map(|&j| partition.unlabeled[j]).collect();
            pool.labels = selection.labels.clone();
            log::info!(
                "iteration {iteration}: cf=({:.4}, {:.4}) active={} selected={count}",
                cf[0],
                cf[1],
                decision.active.number()
            );
            if previous == Some(count) {
                break;
            }
            previous = Some(count);

            let mut chosen = vec![None; unl_set.len()];
            for (&j, &l) in selection.positions.iter().zip(&selection.labels) {
                chosen[j] = Some(l);
            }
            let targets: Vec<Option<usize>> = train_targets.iter().copied().chain(chosen).collect();
            for (t, (model, rng)) in models.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let x = ndarray::concatenate(Axis(1), &[train_set.view(t), unl_set.view(t)])
                    .map_err(|e| Error::Config(format!("fine-tune assembly: {e}")))?;
                train::train(model, x.view(), &targets, &settings.weights, &settings.finetune, None, rng)?;
            }
        }
    }

    let expanded_indices: Vec<usize> = partition.train.iter().chain(&pool.selected).copied().collect();
    let expanded_labels: Vec<usize> = train_set.labels.iter().chain(&pool.labels).copied().collect();
    Ok(LpfOutcome {
        models,
        bank,
        pool,
        initial_reports,
        expanded_indices,
        expanded_labels,
    })
}
