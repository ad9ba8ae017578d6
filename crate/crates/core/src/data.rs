//! Paired two-modality datasets: file ingestion, z-scoring, labeled/unlabeled
//! splits (including out-of-class contamination) and a synthetic generator.
//!
//! Feature files are comma-separated text with one row per feature dimension
//! and one column per sample; `#` starts a comment line. Label files hold one
//! 0-based class index per line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Standard deviations below this are treated as this value.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    /// `d_t × N` per modality; column `j` of both views is one pair.
    pub views: [Array2<f64>; 2],
    pub labels: Vec<usize>,
}

impl PairedDataset {
    pub fn new(view1: Array2<f64>, view2: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if view1.ncols() != view2.ncols() {
            return Err(Error::Alignment {
                what: format!("modality 1 has {} samples, modality 2 has {}", view1.ncols(), view2.ncols()),
            });
        }
        if labels.len() != view1.ncols() {
            return Err(Error::Alignment {
                what: format!("{} samples but {} labels", view1.ncols(), labels.len()),
            });
        }
        Ok(Self {
            views: [view1, view2],
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.views[0].nrows(), self.views[1].nrows()]
    }

    /// One more than the largest label present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn view(&self, modality: usize) -> ArrayView2<'_, f64> {
        self.views[modality].view()
    }

    /// Columns `indices` of both views, in that order.
    pub fn select(&self, indices: &[usize]) -> PairedDataset {
        PairedDataset {
            views: [
                self.views[0].select(Axis(1), indices),
                self.views[1].select(Axis(1), indices),
            ],
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_members(&self, classes: usize) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); classes];
        for (j, &k) in self.labels.iter().enumerate() {
            if k < classes {
                members[k].push(j);
            }
        }
        members
    }

    pub fn save(&self, files: &DatasetFiles) -> Result<()> {
        write_matrix(&files.view1, self.views[0].view())?;
        write_matrix(&files.view2, self.views[1].view())?;
        write_labels(&files.labels, &self.labels)
    }
}

/// The three files making up one stored dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub view1: PathBuf,
    pub view2: PathBuf,
    pub labels: PathBuf,
}

impl DatasetFiles {
    /// `<dir>/<prefix>_view1.csv`, `..._view2.csv`, `..._labels.csv`.
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        Self {
            view1: dir.join(format!("{prefix}_view1.csv")),
            view2: dir.join(format!("{prefix}_view2.csv")),
            labels: dir.join(format!("{prefix}_labels.csv")),
        }
    }
}

pub fn load_dataset(files: &DatasetFiles) -> Result<PairedDataset> {
    let v1 = read_matrix(&files.view1)?;
    let v2 = read_matrix(&files.view2)?;
    let labels = read_labels(&files.labels)?;
    PairedDataset::new(v1, v2, labels)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Malformed {
            path: path.to_path_buf(),
            message: format!("line {line}: {other:?}"),
        },
    }
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv_reader(path)?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let expected = *cols.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        for cell in record.iter() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                path: path.to_path_buf(),
                line,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        message: "no data rows".into(),
    })?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv_reader(path)?;
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 1 {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: 1,
                found: record.len(),
            });
        }
        let cell = &record[0];
        labels.push(cell.parse().map_err(|_| Error::NonNumeric {
            path: path.to_path_buf(),
            line,
            cell: cell.to_string(),
        })?);
    }
    Ok(labels)
}

pub fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-dimension statistics of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub stats: [ZScoreStats; 2],
}

impl ZScore {
    /// Population mean and standard deviation over the `source` columns.
    pub fn fit(dataset: &PairedDataset, source: &[usize]) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Config("normalization source partition is empty".into()));
        }
        let fit_one = |view: &Array2<f64>| {
            let cols = view.select(Axis(1), source);
            let mean = cols.mean_axis(Axis(1)).expect("non-empty");
            let std = cols.std_axis(Axis(1), 0.0).mapv(|s| s.max(STD_FLOOR));
            ZScoreStats { mean, std }
        };
        Ok(Self {
            stats: [fit_one(&dataset.views[0]), fit_one(&dataset.views[1])],
        })
    }

    pub fn apply(&self, dataset: &PairedDataset) -> Result<PairedDataset> {
        let apply_one = |view: &Array2<f64>, s: &ZScoreStats| -> Result<Array2<f64>> {
            if view.nrows() != s.mean.len() {
                return Err(Error::shape("normalization dimension", s.mean.len(), view.nrows()));
            }
            let mean = s.mean.view().insert_axis(Axis(1));
            let std = s.std.view().insert_axis(Axis(1));
            Ok((view - &mean) / std)
        };
        Ok(PairedDataset {
            views: [
                apply_one(&dataset.views[0], &self.stats[0])?,
                apply_one(&dataset.views[1], &self.stats[1])?,
            ],
            labels: dataset.labels.clone(),
        })
    }
}

/// Fits statistics on the `source` columns (the labeled-train partition) and
/// applies them to every sample.
pub fn zscore_normalize(dataset: &PairedDataset, source: &[usize]) -> Result<(PairedDataset, ZScore)> {
    let z = ZScore::fit(dataset, source)?;
    Ok((z.apply(dataset)?, z))
}

/// Disjoint index sets over a training dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Samples withheld from every role (unused out-of-class samples).
    pub excluded: Vec<usize>,
}

impl Partition {
    /// Train and validation together, sorted.
    pub fn labeled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        all.sort_unstable();
        all
    }

    /// True when the four sets are pairwise disjoint and cover `0..n`.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.unlabeled)
            .chain(&self.excluded)
        {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Index lists as `role,index` rows for reproducibility.
    pub fn to_index_rows(&self) -> String {
        let mut out = String::from("role,index\n");
        for (role, idx) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("unlabeled", &self.unlabeled),
            ("excluded", &self.excluded),
        ] {
            for i in idx {
                let _ = writeln!(out, "{role},{i}");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Labeled fraction of the training data, in `(0, 1]`.
    pub rho: f64,
    /// Share of the labeled portion held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    pub open_set: Option<OpenSetSpec>,
}

impl SplitSpec {
    pub fn new(rho: f64, seed: u64) -> Self {
        Self {
            rho,
            validation_fraction: 0.2,
            seed,
            open_set: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if let Some(open) = &self.open_set {
            if open.unseen.is_empty() {
                return Err(Error::Config("open-set split needs at least one unseen class".into()));
            }
            if open.seen.iter().any(|c| open.unseen.contains(c)) {
                return Err(Error::Config("seen and unseen class sets overlap".into()));
            }
            if !(open.kappa >= 0.0 && open.kappa.is_finite()) {
                return Err(Error::Config(format!("kappa must be >= 0, got {}", open.kappa)));
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `round(fraction · Σ sizes)` items,
/// never exceeding any group's size. Ties go to the lower group index.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = ((fraction * total as f64).round() as usize).min(total);
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut counts: Vec<usize> = exact.iter().zip(sizes).map(|(e, &n)| (e.floor() as usize).min(n)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if assigned >= target {
            break;
        }
        if counts[g] < sizes[g] {
            counts[g] += 1;
            assigned += 1;
        }
    }
    counts
}

/// Class-stratified labeled/validation/unlabeled split over the given class
/// member lists. Consumes `rng` class by class, in list order.
fn stratified<R: Rng + ?Sized>(
    members: &[(usize, Vec<usize>)],
    rho: f64,
    validation_fraction: f64,
    rng: &mut R,
) -> Result<Partition> {
    let sizes: Vec<usize> = members.iter().map(|(_, m)| m.len()).collect();
    let labeled = apportion(&sizes, rho);
    let validation = apportion(&labeled, validation_fraction);
    let mut part = Partition::default();
    for (((class, idx), &n_lab), &n_val) in members.iter().zip(&labeled).zip(&validation) {
        if n_lab < 2 {
            return Err(Error::TooFewLabeled {
                class: *class,
                count: n_lab,
            });
        }
        let n_val = n_val.min(n_lab - 1);
        let mut shuffled = idx.clone();
        shuffled.shuffle(rng);
        part.validation.extend_from_slice(&shuffled[..n_val]);
        part.train.extend_from_slice(&shuffled[n_val..n_lab]);
        part.unlabeled.extend_from_slice(&shuffled[n_lab..]);
    }
    part.train.sort_unstable();
    part.validation.sort_unstable();
    part.unlabeled.sort_unstable();
    Ok(part)
}

/// Labeled portion is class-stratified at rate `rho` and then split into
/// train/validation; everything else is unlabeled.
pub fn make_splits(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let mut members: Vec<(usize, Vec<usize>)> = (0..num_classes).map(|k| (k, Vec::new())).collect();
    for (j, &k) in labels.iter().enumerate() {
        if k >= num_classes {
            return Err(Error::LabelOutOfRange {
                sample: j,
                label: k,
                classes: num_classes,
            });
        }
        members[k].1.push(j);
    }
    let mut rng = seeds::stream(spec.seed, seeds::SPLITS);
    stratified(&members, spec.rho, spec.validation_fraction, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetSplit {
    pub partition: Partition,
    /// Seen classes in ascending order; position is the class index the
    /// models are trained on.
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub in_class_unlabeled: usize,
    pub out_of_class_unlabeled: usize,
    pub requested_kappa: f64,
    pub effective_kappa: f64,
    /// Set when there were not enough unseen-class samples for the requested ratio.
    pub warning: Option<String>,
}

impl OpenSetSplit {
    /// Seen classes map to `0..|C^s|`; unseen ones to `|C^s|..` in ascending order.
    pub fn remap_labels(&self, labels: &[usize]) -> Vec<usize> {
        let mut map = std::collections::HashMap::new();
        for (i, &c) in self.seen.iter().chain(&self.unseen).enumerate() {
            map.insert(c, i);
        }
        labels.iter().map(|l| map.get(l).copied().unwrap_or(usize::MAX)).collect()
    }
}

/// Labeled data drawn from the seen classes only; the unlabeled pool holds the
/// remaining seen-class samples plus `round(κ · n_in)` unseen-class samples.
/// With `κ = 0` this is identical to [`make_splits`] on the seen classes.
pub fn make_open_set_splits(labels: &[usize], spec: &SplitSpec) -> Result<OpenSetSplit> {
    spec.validate()?;
    let open = spec
        .open_set
        .as_ref()
        .ok_or_else(|| Error::Config("open-set split requested without seen/unseen classes".into()))?;
    let mut seen = open.seen.clone();
    seen.sort_unstable();
    seen.dedup();
    let mut unseen = open.unseen.clone();
    unseen.sort_unstable();
    unseen.dedup();

    let mut members: Vec<(usize, Vec<usize>)> = seen.iter().map(|&k| (k, Vec::new())).collect();
    let mut unseen_pool = Vec::new();
    let mut excluded = Vec::new();
    for (j, &k) in labels.iter().enumerate() {
        if let Ok(pos) = seen.binary_search(&k) {
            members[pos].1.push(j);
        } else if unseen.binary_search(&k).is_ok() {
            unseen_pool.push(j);
        } else {
            excluded.push(j);
        }
    }
    let mut rng = seeds::stream(spec.seed, seeds::SPLITS);
    let mut partition = stratified(&members, spec.rho, spec.validation_fraction, &mut rng)?;
    let n_in = partition.unlabeled.len();
    let wanted = (open.kappa * n_in as f64).round() as usize;
    let taken = wanted.min(unseen_pool.len());
    let warning = (taken < wanted).then(|| {
        format!(
            "kappa capped: requested {} out-of-class samples (kappa {}), only {} available",
            wanted,
            open.kappa,
            unseen_pool.len()
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    if taken > 0 {
        unseen_pool.shuffle(&mut rng);
    }
    partition.unlabeled.extend_from_slice(&unseen_pool[..taken]);
    excluded.extend_from_slice(&unseen_pool[taken..]);
    partition.unlabeled.sort_unstable();
    excluded.sort_unstable();
    partition.excluded = excluded;
    let effective_kappa = if n_in == 0 { 0.0 } else { taken as f64 / n_in as f64 };
    Ok(OpenSetSplit {
        partition,
        seen,
        unseen,
        in_class_unlabeled: n_in,
        out_of_class_unlabeled: taken,
        requested_kappa: open.kappa,
        effective_kappa,
        warning,
    })
}

/// Picks `count` unseen classes uniformly at random; returns `(seen, unseen)`.
pub fn choose_unseen_classes<R: Rng + ?Sized>(num_classes: usize, count: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut all: Vec<usize> = (0..num_classes).collect();
    all.shuffle(rng);
    let mut unseen = all[..count.min(num_classes)].to_vec();
    let mut seen = all[count.min(num_classes)..].to_vec();
    unseen.sort_unstable();
    seen.sort_unstable();
    (seen, unseen)
}

/// Synthetic paired benchmark: per class and modality a random anchor, and
/// every sample is its class anchor plus isotropic Gaussian noise drawn
/// independently for the two views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dims: [usize; 2],
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Expected anchor norm per modality.
    pub separation: [f64; 2],
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            dims: [16, 24],
            train_per_class: 200,
            test_per_class: 100,
            separation: [4.0, 4.0],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::TooFewClasses(self.classes));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("synthetic feature dimensions must be >= 1".into()));
        }
        if !self.separation.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("separation must be positive, got {:?}", self.separation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Training and held-out test data sharing one set of class anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: PairedDataset,
    pub test: PairedDataset,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = seeds::stream(spec.seed, seeds::SYNTH);
    let anchors: Vec<Array2<f64>> = (0..2)
        .map(|t| {
            let d = spec.dims[t];
            let scale = spec.separation[t] / (d as f64).sqrt();
            Array2::from_shape_simple_fn((d, spec.classes), || scale * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let sample = |per_class: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let n = per_class * spec.classes;
        let labels: Vec<usize> = (0..n).map(|j| j / per_class).collect();
        let views: Vec<Array2<f64>> = (0..2)
            .map(|t| {
                let mut v = Array2::zeros((spec.dims[t], n));
                for (j, &k) in labels.iter().enumerate() {
                    for i in 0..spec.dims[t] {
                        let eps: f64 = rng.sample(StandardNormal);
                        v[[i, j]] = anchors[t][[i, k]] + spec.noise * eps;
                    }
                }
                v
            })
            .collect();
        let [a, b]: [Array2<f64>; 2] = views.try_into().expect("two views");
        PairedDataset::new(a, b, labels)
    };
    let train = sample(spec.train_per_class, &mut rng)?;
    let test = sample(spec.test_per_class, &mut rng)?;
    Ok(Benchmark { train, test })
}
