//! Classification, center, entropy and reconstruction losses.
//!
//! All losses are sums over the batch columns. Gradients are returned w.r.t.
//! the pre-softmax logits for the probability-based terms.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_ce: f64,
    pub alpha_c: f64,
    pub alpha_ent: f64,
    pub alpha_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ce: 1.0,
            alpha_c: 0.5,
            alpha_ent: 1.0,
            alpha_r: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_ce, self.alpha_c, self.alpha_ent, self.alpha_r];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// Unweighted values of the four terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub center: f64,
    pub entropy: f64,
    pub reconstruction: f64,
}

impl LossTerms {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        total_loss(self, weights)
    }
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, rhs: Self) {
        self.ce += rhs.ce;
        self.center += rhs.center;
        self.entropy += rhs.entropy;
        self.reconstruction += rhs.reconstruction;
    }
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.alpha_ce * terms.ce + w.alpha_c * terms.center + w.alpha_ent * terms.entropy + w.alpha_r * terms.reconstruction
}

#[derive(Debug, Clone)]
pub struct ScalarWithGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// `−Σ log p[label]`; gradient w.r.t. logits is `p − onehot`.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<ScalarWithGrad> {
    if probs.ncols() != labels.len() {
        return Err(Error::shape("cross-entropy labels", probs.ncols(), labels.len()));
    }
    let classes = probs.nrows();
    let mut grad = probs.to_owned();
    let mut loss = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                sample: j,
                label,
                classes,
            });
        }
        loss -= probs[[label, j]].max(PROB_FLOOR).ln();
        grad[[label, j]] -= 1.0;
    }
    Ok(ScalarWithGrad { loss, grad })
}

#[derive(Debug, Clone)]
pub struct CenterLossOutput {
    pub loss: f64,
    /// Gradient w.r.t. the tapped features, `2 (x − c_label)`.
    pub feature_grad: Array2<f64>,
    /// Per-class `Σ (c_k − x_j) / (1 + n_k)`; apply as `c ← c − lr′ · delta`.
    pub center_deltas: Array2<f64>,
}

/// Class centers in the tapped feature space, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers(pub Array2<f64>);

impl Centers {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Centers(Array2::zeros((classes, dim)))
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn apply_deltas(&mut self, deltas: &Array2<f64>, center_lr: f64) {
        self.0.scaled_add(-center_lr, deltas);
    }
}

pub fn center_loss(features: ArrayView2<f64>, labels: &[usize], centers: &Centers) -> Result<CenterLossOutput> {
    if features.ncols() != labels.len() {
        return Err(Error::shape("center-loss labels", features.ncols(), labels.len()));
    }
    if features.nrows() != centers.dim() {
        return Err(Error::shape("center-loss feature dimension", centers.dim(), features.nrows()));
    }
    let classes = centers.classes();
    let mut loss = 0.0;
    let mut feature_grad = Array2::zeros(features.raw_dim());
    let mut deltas = Array2::zeros(centers.0.raw_dim());
    let mut counts = vec![0usize; classes];
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                sample: j,
                label,
                classes,
            });
        }
        let diff = &features.column(j) - &centers.0.row(label);
        loss += diff.dot(&diff);
        feature_grad.column_mut(j).assign(&(&diff * 2.0));
        let mut delta = deltas.row_mut(label);
        delta -= &diff;
        counts[label] += 1;
    }
    for (mut row, &n) in deltas.rows_mut().into_iter().zip(&counts) {
        row /= 1.0 + n as f64;
    }
    Ok(CenterLossOutput {
        loss,
        feature_grad,
        center_deltas: deltas,
    })
}

/// Shannon entropy summed over columns; gradient w.r.t. logits is
/// `−p_k (log p_k + H)` per column.
pub fn entropy_regularization(probs: ArrayView2<f64>) -> ScalarWithGrad {
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for (mut g, p) in grad.columns_mut().into_iter().zip(probs.columns()) {
        let logs: Array1<f64> = p.mapv(|v| v.max(PROB_FLOOR).ln());
        let h = -p.dot(&logs);
        loss += h;
        Zip::from(&mut g)
            .and(&p)
            .and(&logs)
            .for_each(|g, &p, &lp| *g = -p * (lp + h));
    }
    ScalarWithGrad { loss, grad }
}

/// `Σ ||x − x̂||²`; gradient w.r.t. the reconstruction is `2 (x̂ − x)`.
pub fn reconstruction(inputs: ArrayView2<f64>, reconstructions: ArrayView2<f64>) -> Result<ScalarWithGrad> {
    if inputs.raw_dim() != reconstructions.raw_dim() {
        return Err(Error::shape(
            "reconstruction",
            format!("{:?}", inputs.dim()),
            format!("{:?}", reconstructions.dim()),
        ));
    }
    let diff = &reconstructions - &inputs;
    let loss = diff.iter().map(|d| d * d).sum();
    Ok(ScalarWithGrad { loss, grad: diff * 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_columns;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_fixed_points() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cross_entropy(p.view(), &[0, 1]).unwrap().loss, 0.0);
        let u = array![[0.5], [0.5]];
        assert_abs_diff_eq!(cross_entropy(u.view(), &[1]).unwrap().loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_hand_batch() {
        let p = array![[0.7, 0.1, 0.2], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]];
        let out = cross_entropy(p.view(), &[0, 1, 1]).unwrap();
        let expected = -(0.7f64.ln() + 0.6f64.ln() + 0.2f64.ln());
        assert_abs_diff_eq!(out.loss, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out.grad[[0, 0]], -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out.grad[[1, 2]], 0.2 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range_names_sample() {
        let p = array![[0.5, 0.5], [0.5, 0.5]];
        match cross_entropy(p.view(), &[0, 2]) {
            Err(Error::LabelOutOfRange { sample, .. }) => assert_eq!(sample, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn center_loss_single_sample() {
        let x = array![[1.0], [0.0]];
        let c = Centers(array![[0.0, 0.0]]);
        let out = center_loss(x.view(), &[0], &c).unwrap();
        assert_eq!(out.loss, 1.0);
        assert_eq!(out.feature_grad, array![[2.0], [0.0]]);
        assert_eq!(out.center_deltas, array![[-0.5, 0.0]]);
    }

    #[test]
    fn center_loss_at_centers_and_symmetric_pairs() {
        let c = Centers(array![[1.0, 2.0], [-1.0, 0.5]]);
        let x = array![[1.0, -1.0], [2.0, 0.5]];
        let out = center_loss(x.view(), &[0, 1], &c).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.center_deltas.iter().all(|&v| v == 0.0));

        let sym = array![[2.0, 0.0], [3.0, 1.0]];
        let out = center_loss(sym.view(), &[0, 0], &c).unwrap();
        assert!(out.center_deltas.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_loss_empty_batch() {
        let c = Centers::zeros(3, 2);
        let x = Array2::zeros((2, 0));
        let out = center_loss(x.view(), &[], &c).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.center_deltas.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_update_moves_toward_class_mean() {
        let mut c = Centers(array![[0.0, 0.0]]);
        let x = array![[2.0, 4.0], [1.0, 3.0]];
        let mean = array![3.0, 2.0];
        let before = (&c.0.row(0) - &mean).mapv(|v| v * v).sum();
        let out = center_loss(x.view(), &[0, 0], &c).unwrap();
        c.apply_deltas(&out.center_deltas, 0.5);
        let after = (&c.0.row(0) - &mean).mapv(|v| v * v).sum();
        assert!(after < before);
    }

    #[test]
    fn entropy_values() {
        let one_hot = array![[0.0], [1.0], [0.0]];
        assert_eq!(entropy_regularization(one_hot.view()).loss, 0.0);
        let uniform = Array2::from_elem((8, 1), 1.0 / 8.0);
        assert_abs_diff_eq!(entropy_regularization(uniform.view()).loss, 8f64.ln(), epsilon = 1e-12);
        let p = array![[0.9], [0.1]];
        let expected = -0.9 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert_abs_diff_eq!(entropy_regularization(p.view()).loss, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.3251, epsilon = 1e-4);
    }

    #[test]
    fn reconstruction_values() {
        let x = array![[1.0], [1.0]];
        let z = array![[0.0], [0.0]];
        assert_eq!(reconstruction(x.view(), x.view()).unwrap().loss, 0.0);
        assert_eq!(reconstruction(x.view(), z.view()).unwrap().loss, 2.0);
        assert!(reconstruction(x.view(), Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn reconstruction_matches_elementwise_sum() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.0);
        let y = Array2::from_shape_fn((4, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                brute += (x[[i, j]] - y[[i, j]]).powi(2);
            }
        }
        assert_abs_diff_eq!(reconstruction(x.view(), y.view()).unwrap().loss, brute, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let ones = LossTerms {
            ce: 1.0,
            center: 1.0,
            entropy: 1.0,
            reconstruction: 1.0,
        };
        assert_abs_diff_eq!(total_loss(&ones, &LossWeights::default()), 2.51, epsilon = 1e-15);
        let zero = LossWeights {
            alpha_ce: 0.0,
            alpha_c: 0.0,
            alpha_ent: 0.0,
            alpha_r: 0.0,
        };
        assert_eq!(total_loss(&ones, &zero), 0.0);
        let terms = LossTerms {
            ce: 0.3,
            center: 2.0,
            entropy: 1.5,
            reconstruction: 10.0,
        };
        let w = LossWeights {
            alpha_ce: 2.0,
            alpha_c: 0.1,
            alpha_ent: 0.0,
            alpha_r: 0.5,
        };
        assert_abs_diff_eq!(total_loss(&terms, &w), 0.6 + 0.2 + 0.0 + 5.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_columns_are_distributions(logits in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let z = Array2::from_shape_vec((4, 3), logits).unwrap();
            let p = softmax_columns(z.view());
            for col in p.columns() {
                prop_assert!(col.iter().all(|&v| v >= 0.0));
                prop_assert!((col.sum() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn uniform_maximises_entropy(logits in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let z = Array2::from_shape_vec((6, 1), logits).unwrap();
            let p = softmax_columns(z.view());
            let h = entropy_regularization(p.view()).loss;
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 6f64.ln() + 1e-12);
        }
    }
}
