//! Retrieval metrics and the built-in supervised cross-modal retriever.

use std::sync::Arc;

use nalgebra::{DMatrix, SVD};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::registry::Registry;

/// Average precision of one ranked list as an exact fraction. Zero when
/// nothing in the list is relevant.
pub fn average_precision_exact(relevant: &[bool]) -> BigRational {
    let mut hits = 0u64;
    let mut sum = BigRational::zero();
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += BigRational::new(BigInt::from(hits), BigInt::from(r as u64 + 1));
        }
    }
    if hits == 0 {
        sum
    } else {
        sum / BigInt::from(hits)
    }
}

/// [`average_precision_exact`] rounded to the nearest `f64`.
pub fn average_precision(relevant: &[bool]) -> f64 {
    to_f64(&average_precision_exact(relevant))
}

fn to_f64(v: &BigRational) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Modality 1 queries against modality 2 items.
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }

    pub fn query_modality(self) -> usize {
        match self {
            Direction::ImageToText => 0,
            Direction::TextToImage => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// Ranked database indices per query; relevance is label equality.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_labels: Vec<usize>,
    pub database_labels: Vec<usize>,
    pub rankings: Vec<Vec<usize>>,
}

/// Mean over queries of the average precision of each top-`r` list, computed
/// exactly and rounded once.
pub fn map_at_r(run: &RetrievalRun, r: usize) -> Result<f64> {
    if run.rankings.len() != run.query_labels.len() {
        return Err(Error::shape("retrieval queries", run.query_labels.len(), run.rankings.len()));
    }
    if run.rankings.is_empty() {
        return Err(Error::shape("retrieval queries", ">= 1", 0));
    }
    let mut total = BigRational::zero();
    for (q, (ranking, &label)) in run.rankings.iter().zip(&run.query_labels).enumerate() {
        if ranking.len() < r {
            return Err(Error::shape(format!("ranked list of query {q}"), format!(">= {r} items"), ranking.len()));
        }
        let flags: Vec<bool> = ranking[..r]
            .iter()
            .map(|&i| run.database_labels[i] == label)
            .collect();
        total += average_precision_exact(&flags);
    }
    Ok(to_f64(&(total / BigInt::from(run.rankings.len()))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub lists: Vec<Vec<usize>>,
    /// Number of zero-norm embeddings (queries plus database items) met.
    pub zero_norm: usize,
}

fn unit_columns(m: ArrayView2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut out = m.to_owned();
    let mut valid = Vec::with_capacity(m.ncols());
    for mut col in out.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 && norm.is_finite() {
            col /= norm;
            valid.push(true);
        } else {
            valid.push(false);
        }
    }
    (out, valid)
}

/// Database indices per query by descending cosine similarity, ties by
/// ascending index. Zero-norm vectors score `−∞`. Lists are cut to `limit`.
pub fn rank_by_similarity(queries: ArrayView2<f64>, database: ArrayView2<f64>, limit: Option<usize>) -> Result<Ranking> {
    if queries.nrows() != database.nrows() {
        return Err(Error::shape("embedding dimension", queries.nrows(), database.nrows()));
    }
    let (q, q_ok) = unit_columns(queries);
    let (d, d_ok) = unit_columns(database);
    let zero_norm = q_ok.iter().chain(&d_ok).filter(|ok| !**ok).count();
    if zero_norm > 0 {
        log::warn!("{zero_norm} zero-norm embeddings ranked last");
    }
    let sims = q.t().dot(&d);
    let keep = limit.unwrap_or(database.ncols()).min(database.ncols());
    let lists = sims
        .axis_iter(Axis(0))
        .zip(&q_ok)
        .map(|(row, &qv)| {
            let score = |i: usize| {
                if qv && d_ok[i] {
                    row[i]
                } else {
                    f64::NEG_INFINITY
                }
            };
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            idx.truncate(keep);
            idx
        })
        .collect();
    Ok(Ranking { lists, zero_norm })
}

/// Maps each modality's features into a shared space in which cross-modal
/// cosine ranking is done.
pub trait FittedRetriever: Send + Sync {
    fn embed(&self, modality: usize, features: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// A supervised cross-modal retrieval method trained on labeled pairs.
pub trait Retriever: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(&self, views: [ArrayView2<f64>; 2], labels: &[usize], classes: usize) -> Result<Box<dyn FittedRetriever>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub name: String,
    pub ridge: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            name: LinearLabelRetriever::NAME.into(),
            ridge: 1e-3,
        }
    }
}

pub type RetrieverFactory = dyn Fn(&RetrieverConfig) -> Box<dyn Retriever> + Send + Sync;

pub fn retriever_registry() -> Registry<RetrieverFactory> {
    let mut reg: Registry<RetrieverFactory> = Registry::new("retriever");
    reg.register(
        LinearLabelRetriever::NAME,
        Arc::new(|cfg: &RetrieverConfig| Box::new(LinearLabelRetriever { ridge: cfg.ridge }) as Box<dyn Retriever>),
    );
    reg
}

/// Ridge regression from features (plus a constant row) onto one-hot labels,
/// one map per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLabelRetriever {
    pub ridge: f64,
}

impl LinearLabelRetriever {
    pub const NAME: &'static str = "linear-label";
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLabelMaps {
    /// `C × (d_t + 1)`; the last column multiplies the constant feature.
    pub maps: [Array2<f64>; 2],
}

fn with_bias_row(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows() + 1, x.ncols()));
    out.slice_mut(ndarray::s![..x.nrows(), ..]).assign(&x);
    out
}

fn ridge_map(x: ArrayView2<f64>, labels: &[usize], classes: usize, ridge: f64) -> Result<Array2<f64>> {
    let xb = with_bias_row(x);
    let d = xb.nrows();
    let mut y = Array2::<f64>::zeros((classes, xb.ncols()));
    for (j, &k) in labels.iter().enumerate() {
        if k >= classes {
            return Err(Error::LabelOutOfRange {
                sample: j,
                label: k,
                classes,
            });
        }
        y[[k, j]] = 1.0;
    }
    let mut gram = xb.dot(&xb.t());
    for i in 0..d {
        gram[[i, i]] += ridge;
    }
    let rhs = xb.dot(&y.t());
    let a = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    let b = DMatrix::from_fn(d, classes, |i, j| rhs[[i, j]]);
    let solution = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => SVD::new(a, true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Config(format!("ridge solve failed: {e}")))?,
    };
    Ok(Array2::from_shape_fn((classes, d), |(k, i)| solution[(i, k)]))
}

pub fn fit_linear_label_retriever(
    views: [ArrayView2<f64>; 2],
    labels: &[usize],
    classes: usize,
    ridge: f64,
) -> Result<LinearLabelMaps> {
    for (t, v) in views.iter().enumerate() {
        if v.ncols() != labels.len() {
            return Err(Error::shape(format!("retriever training modality {}", t + 1), labels.len(), v.ncols()));
        }
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    Ok(LinearLabelMaps {
        maps: [
            ridge_map(views[0], labels, classes, ridge)?,
            ridge_map(views[1], labels, classes, ridge)?,
        ],
    })
}

impl FittedRetriever for LinearLabelMaps {
    fn embed(&self, modality: usize, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let map = &self.maps[modality];
        if features.nrows() + 1 != map.ncols() {
            return Err(Error::shape("retriever input dimension", map.ncols() - 1, features.nrows()));
        }
        Ok(map.dot(&with_bias_row(features)))
    }
}

impl Retriever for LinearLabelRetriever {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn fit(&self, views: [ArrayView2<f64>; 2], labels: &[usize], classes: usize) -> Result<Box<dyn FittedRetriever>> {
        Ok(Box::new(fit_linear_label_retriever(views, labels, classes, self.ridge)?))
    }
}

/// MAP@R of a fitted retriever on a paired test set; the database for each
/// direction is the whole opposite-modality test set.
pub fn evaluate_retrieval(fitted: &dyn FittedRetriever, test: &PairedDataset, r: usize) -> Result<[f64; 2]> {
    let emb = [fitted.embed(0, test.view(0))?, fitted.embed(1, test.view(1))?];
    let mut out = [0.0; 2];
    for (slot, dir) in out.iter_mut().zip(Direction::ALL) {
        let q = dir.query_modality();
        let ranking = rank_by_similarity(emb[q].view(), emb[1 - q].view(), Some(r))?;
        let run = RetrievalRun {
            query_labels: test.labels.clone(),
            database_labels: test.labels.clone(),
            rankings: ranking.lists,
        };
        *slot = map_at_r(&run, r)?;
    }
    Ok(out)
}

/// Accuracy per true class; `None` for classes with no samples.
pub fn per_class_accuracy(predicted: &[usize], truth: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t < classes {
            total[t] += 1;
            if p == t {
                hit[t] += 1;
            }
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}
