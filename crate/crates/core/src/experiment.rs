//! Repeated f / l / ss comparisons. Each training regime is a [`TrainingMode`]
//! registered by name; the runner only sees the trait.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    choose_unseen_classes, load_dataset, make_open_set_splits, make_splits, synth_generate, Benchmark, OpenSetSpec,
    PairedDataset, Partition, SplitSpec, ZScore,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, retriever_registry, Direction};
use crate::lpf::{run_lpf, IterationRecord, LpfOutcome};
use crate::registry::Registry;
use crate::report::{self, HistoryRow, MapRow, OpenSetRow};
use crate::seeds;

/// Normalised training data of one repetition, with access tracking so the
/// runner can tell which parts a mode looked at.
pub struct ModeContext<'a> {
    dataset: &'a PairedDataset,
    partition: &'a Partition,
    num_classes: usize,
    config: &'a ExperimentConfig,
    seed: u64,
    read_unlabeled: Cell<bool>,
}

impl<'a> ModeContext<'a> {
    pub fn new(
        dataset: &'a PairedDataset,
        partition: &'a Partition,
        num_classes: usize,
        config: &'a ExperimentConfig,
        seed: u64,
    ) -> Self {
        Self {
            dataset,
            partition,
            num_classes,
            config,
            seed,
            read_unlabeled: Cell::new(false),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Train and validation samples with their labels.
    pub fn labeled(&self) -> PairedDataset {
        self.dataset.select(&self.partition.labeled())
    }

    /// Every training-class sample with its true label, unlabeled ones included.
    pub fn fully_labeled(&self) -> PairedDataset {
        self.read_unlabeled.set(true);
        let idx: Vec<usize> = (0..self.dataset.len())
            .filter(|&j| self.dataset.labels[j] < self.num_classes)
            .collect();
        self.dataset.select(&idx)
    }

    /// The full dataset and partition, for algorithms that use unlabeled data.
    pub fn with_unlabeled(&self) -> (&'a PairedDataset, &'a Partition) {
        self.read_unlabeled.set(true);
        (self.dataset, self.partition)
    }

    pub fn read_unlabeled(&self) -> bool {
        self.read_unlabeled.get()
    }
}

/// Retriever training data produced by a mode.
pub struct ModeOutput {
    pub training: PairedDataset,
    pub lpf: Option<LpfOutcome>,
}

pub trait TrainingMode: Send + Sync {
    fn name(&self) -> &'static str;

    fn prepare(&self, ctx: &ModeContext<'_>) -> Result<ModeOutput>;
}

/// Fully supervised: every training label.
pub struct FullySupervised;

/// Only the labeled fraction.
pub struct LabeledOnly;

/// Labeled fraction plus the pseudo-labeled pool.
pub struct SemiSupervised;

impl TrainingMode for FullySupervised {
    fn name(&self) -> &'static str {
        "f"
    }

    fn prepare(&self, ctx: &ModeContext<'_>) -> Result<ModeOutput> {
        Ok(ModeOutput {
            training: ctx.fully_labeled(),
            lpf: None,
        })
    }
}

impl TrainingMode for LabeledOnly {
    fn name(&self) -> &'static str {
        "l"
    }

    fn prepare(&self, ctx: &ModeContext<'_>) -> Result<ModeOutput> {
        Ok(ModeOutput {
            training: ctx.labeled(),
            lpf: None,
        })
    }
}

impl TrainingMode for SemiSupervised {
    fn name(&self) -> &'static str {
        "ss"
    }

    fn prepare(&self, ctx: &ModeContext<'_>) -> Result<ModeOutput> {
        let (dataset, partition) = ctx.with_unlabeled();
        let settings = ctx.config().lpf_settings(ctx.seed());
        let outcome = run_lpf(dataset, partition, ctx.num_classes(), &settings, ctx.seed())?;
        let mut idx = partition.labeled();
        idx.extend_from_slice(&outcome.pool.selected);
        let mut training = dataset.select(&idx);
        let n_lab = training.len() - outcome.pool.labels.len();
        training.labels[n_lab..].copy_from_slice(&outcome.pool.labels);
        Ok(ModeOutput {
            training,
            lpf: Some(outcome),
        })
    }
}

pub fn mode_registry() -> Registry<dyn TrainingMode> {
    let mut reg: Registry<dyn TrainingMode> = Registry::new("training mode");
    reg.register("f", Arc::new(FullySupervised));
    reg.register("l", Arc::new(LabeledOnly));
    reg.register("ss", Arc::new(SemiSupervised));
    reg
}

/// Data of one repetition after class selection, splitting and z-scoring.
pub struct PreparedRepetition {
    pub seed: u64,
    pub train: PairedDataset,
    pub test: PairedDataset,
    pub partition: Partition,
    pub num_classes: usize,
    pub open_set: Option<OpenSetRow>,
}

pub fn repetition_seed(config: &ExperimentConfig, repetition: usize) -> u64 {
    config.experiment.seed.wrapping_add(repetition as u64)
}

pub fn load_benchmark(config: &ExperimentConfig, seed: u64) -> Result<Benchmark> {
    match config.data.source {
        DataSource::Synthetic => {
            let mut spec = config.data.synthetic.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            synth_generate(&spec)
        }
        DataSource::Files => {
            let missing = || Error::Config("data.source = \"files\" needs [data.train] and [data.test]".into());
            let train = load_dataset(config.data.train.as_ref().ok_or_else(missing)?)?;
            let test = load_dataset(config.data.test.as_ref().ok_or_else(missing)?)?;
            if train.dims() != test.dims() {
                return Err(Error::shape("test feature dimensions", format!("{:?}", train.dims()), format!("{:?}", test.dims())));
            }
            Ok(Benchmark { train, test })
        }
    }
}

pub fn prepare_repetition(config: &ExperimentConfig, bench: &Benchmark, seed: u64) -> Result<PreparedRepetition> {
    let classes = bench.train.num_classes().max(bench.test.num_classes());
    let split = &config.split;
    let mut spec = SplitSpec::new(split.rho, seed);
    spec.validation_fraction = split.validation_fraction;
    let (train, test, partition, num_classes, open_set) = if split.unseen_classes == 0 {
        let partition = make_splits(&bench.train.labels, classes, &spec)?;
        (bench.train.clone(), bench.test.clone(), partition, classes, None)
    } else {
        if split.unseen_classes + 2 > classes {
            return Err(Error::Config(format!(
                "{} unseen classes leave fewer than 2 of {classes} classes seen",
                split.unseen_classes
            )));
        }
        let mut rng = seeds::stream(seed, "classes");
        let (seen, unseen) = choose_unseen_classes(classes, split.unseen_classes, &mut rng);
        spec.open_set = Some(OpenSetSpec {
            seen,
            unseen,
            kappa: split.kappa,
        });
        let open = make_open_set_splits(&bench.train.labels, &spec)?;
        let mut train = bench.train.clone();
        train.labels = open.remap_labels(&train.labels);
        let seen_count = open.seen.len();
        let test_labels = open.remap_labels(&bench.test.labels);
        let keep: Vec<usize> = (0..test_labels.len()).filter(|&j| test_labels[j] < seen_count).collect();
        let mut test = bench.test.select(&keep);
        test.labels = keep.iter().map(|&j| test_labels[j]).collect();
        let row = OpenSetRow {
            seed,
            seen: open.seen.clone(),
            unseen: open.unseen.clone(),
            in_class: open.in_class_unlabeled,
            out_of_class: open.out_of_class_unlabeled,
            requested_kappa: open.requested_kappa,
            effective_kappa: open.effective_kappa,
        };
        (train, test, open.partition, seen_count, Some(row))
    };
    let z = ZScore::fit(&train, &partition.train)?;
    Ok(PreparedRepetition {
        seed,
        train: z.apply(&train)?,
        test: z.apply(&test)?,
        partition,
        num_classes,
        open_set,
    })
}

/// MAP of one mode in one repetition, plus what the mode touched.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: String,
    pub map: [f64; 2],
    pub read_unlabeled: bool,
    pub history: Option<Vec<IterationRecord>>,
    pub training_size: usize,
}

#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub seed: u64,
    pub partition: Partition,
    pub modes: Vec<ModeResult>,
    pub open_set: Option<OpenSetRow>,
}

pub fn run_repetition(
    config: &ExperimentConfig,
    prepared: &PreparedRepetition,
    modes: &Registry<dyn TrainingMode>,
) -> Result<RepetitionResult> {
    let retriever = (retriever_registry().get(&config.retriever.name)?)(&config.retriever);
    let mut results = Vec::new();
    for name in &config.experiment.modes {
        let mode = modes.get(name)?;
        let ctx = ModeContext::new(
            &prepared.train,
            &prepared.partition,
            prepared.num_classes,
            config,
            prepared.seed,
        );
        let out = mode.prepare(&ctx)?;
        let fitted = retriever.fit(
            [out.training.view(0), out.training.view(1)],
            &out.training.labels,
            prepared.num_classes,
        )?;
        let map = evaluate_retrieval(fitted.as_ref(), &prepared.test, config.experiment.map_r)?;
        log::info!(
            "seed {} mode {}: MAP@{} i2t {:.4} t2i {:.4}",
            prepared.seed,
            name,
            config.experiment.map_r,
            map[0],
            map[1]
        );
        results.push(ModeResult {
            mode: name.clone(),
            map,
            read_unlabeled: ctx.read_unlabeled(),
            history: out.lpf.map(|o| o.pool.history),
            training_size: out.training.len(),
        });
    }
    Ok(RepetitionResult {
        seed: prepared.seed,
        partition: prepared.partition.clone(),
        modes: results,
        open_set: prepared.open_set.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub map_r: usize,
    pub repetitions: Vec<RepetitionResult>,
}

impl ExperimentResult {
    pub fn map_rows(&self) -> Vec<MapRow> {
        let mut rows = Vec::new();
        for rep in &self.repetitions {
            for m in &rep.modes {
                for (dir, value) in Direction::ALL.into_iter().zip(m.map) {
                    rows.push(MapRow {
                        mode: m.mode.clone(),
                        direction: dir,
                        r: self.map_r,
                        map: value,
                        seed: rep.seed,
                    });
                }
            }
        }
        rows
    }

    pub fn history_rows(&self) -> Vec<HistoryRow> {
        let mut rows = Vec::new();
        for rep in &self.repetitions {
            for h in rep.modes.iter().filter_map(|m| m.history.as_ref()).flatten() {
                rows.push(HistoryRow::from_record(rep.seed, h));
            }
        }
        rows
    }

    pub fn open_set_rows(&self) -> Vec<OpenSetRow> {
        self.repetitions.iter().filter_map(|r| r.open_set.clone()).collect()
    }
}

/// Runs every repetition; the configuration is validated before any data is read.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let modes = mode_registry();
    for name in &config.experiment.modes {
        modes.get(name)?;
    }
    retriever_registry().get(&config.retriever.name)?;
    let mut repetitions = Vec::with_capacity(config.experiment.repetitions);
    for r in 0..config.experiment.repetitions {
        let seed = repetition_seed(config, r);
        let context = |e: Error| Error::Config(format!("repetition {r} (seed {seed}): {e}"));
        let bench = load_benchmark(config, seed).map_err(context)?;
        let prepared = prepare_repetition(config, &bench, seed).map_err(context)?;
        repetitions.push(run_repetition(config, &prepared, &modes).map_err(context)?);
    }
    Ok(ExperimentResult {
        map_r: config.experiment.map_r,
        repetitions,
    })
}

/// Writes `config.toml`, `map.tsv`, `history.tsv`, `per_class.tsv`,
/// `open_set.tsv` (open-set runs only), `splits/seed_<s>.csv` and `summary.txt`.
pub fn write_artifacts(result: &ExperimentResult, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    std::fs::create_dir_all(dir.join("splits")).map_err(|e| Error::io(dir, e))?;
    write("config.toml", config.to_toml_string()?)?;
    let maps = result.map_rows();
    let history = result.history_rows();
    let open = result.open_set_rows();
    write(report::MAP_FILE, report::format_map_rows(&maps))?;
    write(report::HISTORY_FILE, report::format_history_rows(&history))?;
    let mut per_class = String::from("seed\titeration\tmodality\tclass\taccuracy\n");
    for rep in &result.repetitions {
        for h in rep.modes.iter().filter_map(|m| m.history.as_ref()).flatten() {
            for (t, accs) in h.per_class.iter().enumerate() {
                for (k, a) in accs.iter().enumerate() {
                    let _ = writeln!(
                        per_class,
                        "{}\t{}\t{}\t{}\t{}",
                        rep.seed,
                        h.iteration,
                        t + 1,
                        k,
                        report::fmt_opt(*a)
                    );
                }
            }
        }
    }
    write("per_class.tsv", per_class)?;
    if !open.is_empty() {
        write(report::OPEN_SET_FILE, report::format_open_set_rows(&open))?;
    }
    for rep in &result.repetitions {
        write(&format!("splits/seed_{}.csv", rep.seed), rep.partition.to_index_rows())?;
    }
    write(report::SUMMARY_FILE, report::render(&maps, &history, &open))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synthetic.classes = 3;
        cfg.data.synthetic.dims = [4, 5];
        cfg.data.synthetic.train_per_class = 40;
        cfg.data.synthetic.test_per_class = 20;
        cfg.split.rho = 0.25;
        cfg.network.hidden = 8;
        cfg.optim.epochs = 5;
        cfg.optim.finetune_epochs = 1;
        cfg.lpf.max_iterations = 2;
        cfg.experiment.repetitions = 1;
        cfg.experiment.map_r = 10;
        cfg
    }

    #[test]
    fn modes_touch_only_their_data() {
        let result = run_experiment(&tiny()).unwrap();
        let modes = &result.repetitions[0].modes;
        let get = |n: &str| modes.iter().find(|m| m.mode == n).unwrap();
        assert!(!get("l").read_unlabeled && get("l").history.is_none());
        assert!(get("f").history.is_none());
        assert!(get("ss").read_unlabeled && get("ss").history.is_some());
        assert_eq!(get("f").training_size, 120);
        assert_eq!(get("l").training_size, 30);
        assert!(get("ss").training_size >= 30);
    }

    #[test]
    fn labeled_only_run_has_no_history() {
        let mut cfg = tiny();
        cfg.experiment.modes = vec!["l".into()];
        let result = run_experiment(&cfg).unwrap();
        assert!(result.history_rows().is_empty());
        assert_eq!(result.map_rows().len(), 2);
    }

    #[test]
    fn unknown_names_fail_before_any_work() {
        let mut cfg = tiny();
        cfg.experiment.modes = vec!["l".into(), "semi".into()];
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.contains("semi") && err.contains("f, l, ss"), "{err}");
        let mut cfg = tiny();
        cfg.retriever.name = "cca".into();
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn open_set_rows_and_remapped_test_set() {
        let mut cfg = tiny();
        cfg.data.synthetic.classes = 4;
        cfg.split.unseen_classes = 1;
        cfg.split.kappa = 0.2;
        let bench = load_benchmark(&cfg, 0).unwrap();
        let prepared = prepare_repetition(&cfg, &bench, 0).unwrap();
        assert_eq!(prepared.num_classes, 3);
        assert!(prepared.test.labels.iter().all(|&l| l < 3));
        assert_eq!(prepared.test.len(), 60);
        let row = prepared.open_set.unwrap();
        assert_eq!(row.out_of_class, (0.2 * row.in_class as f64).round() as usize);
        let text = report::format_open_set_rows(&[row]);
        assert_eq!(text.lines().count(), 2);
    }
}
