use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lpf_core::config::ExperimentConfig;
use lpf_core::data::{synth_generate, DatasetFiles};
use lpf_core::{diagnostics, experiment, report};

#[derive(Parser)]
#[command(name = "lpf", version, about = "Semi-supervised cross-modal retrieval experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override a configuration key, e.g. `--set split.rho=0.3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        config: PathBuf,
        /// Artifact directory; overrides `experiment.output`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the summary tables of a finished run.
    Report { dir: PathBuf },
    /// Write the synthetic benchmark as feature and label files.
    GenSynth {
        /// Configuration whose `[data.synthetic]` section is used; defaults apply without one.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory for `train_*.csv` and `test_*.csv`.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the gradient, loss, precision and selection self-checks.
    Check,
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p, overrides).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::from_toml_str("", overrides)?,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Run {
            config,
            output,
            overrides,
        } => {
            let mut cfg = load_config(Some(&config), &overrides.set)?;
            if let Some(out) = output {
                cfg.experiment.output = out;
            }
            let result = experiment::run_experiment(&cfg)?;
            let dir = &cfg.experiment.output;
            experiment::write_artifacts(&result, &cfg, dir)?;
            print!("{}", report::report_dir(dir)?);
            println!("\nartifacts written to {}", dir.display());
        }
        Command::Report { dir } => {
            print!("{}", report::report_dir(&dir).with_context(|| format!("reading artifacts in {}", dir.display()))?);
        }
        Command::GenSynth {
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides.set)?;
            let bench = synth_generate(&cfg.data.synthetic)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            bench.train.save(&DatasetFiles::in_dir(&out, "train"))?;
            bench.test.save(&DatasetFiles::in_dir(&out, "test"))?;
            println!(
                "wrote {} training and {} test pairs to {}",
                bench.train.len(),
                bench.test.len(),
                out.display()
            );
        }
        Command::Check => {
            let results = diagnostics::run_checks()?;
            let failed = results.iter().filter(|c| !c.passed).count();
            for c in &results {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
    }
    Ok(())
}
