use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use segcn_core::config::load_config;
use segcn_core::data::{load_bundle, write_bundle};
use segcn_core::model::Checkpoint;
use segcn_core::node5::build_node5;
use segcn_core::suite::{run_suite, write_summary_csv, SuiteName};
use segcn_core::train::{
    evaluate, export_embeddings, metrics_line, train_with, Layer, Mode, PreparedGraph, Subset,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "segcn",
    version,
    about = "Self-ensembling GCN training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Baseline,
    Segcn,
}

impl From<Preset> for Mode {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Baseline => Mode::Baseline,
            Preset::Segcn => Mode::Segcn,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting defaults before the config file and overrides.
    #[arg(long, value_enum, default_value = "segcn")]
    preset: Preset,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set schedules.total_epochs=400`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        Ok(load_config(
            self.preset.into(),
            self.config.as_deref(),
            &overrides,
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset bundle; overrides `dataset` in the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-epoch metric lines on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Report the accuracy of a checkpoint on one subset of the split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split settings are read from the same config sources as `train`.
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Run a named benchmark grid and write a CSV summary.
    Suite {
        #[arg(value_parser = parse_suite)]
        name: SuiteName,
        /// Directory holding `<dataset>.segb` bundles.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Runs per cell; defaults to 20 for random splits and 5 otherwise.
        #[arg(long)]
        runs: Option<usize>,
        /// First seed; run `i` uses `first_seed + i`.
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Extra settings applied to both the baseline and SEGCN presets.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
    /// Write one layer's activations as tab-separated rows.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// 1 for the hidden layer, 2 for the output logits.
        #[arg(long, default_value_t = 2)]
        layer: u8,
        #[arg(long)]
        no_row_normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the Node5 toy bundle from a Cora bundle.
    MakeNode5 {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_suite(s: &str) -> Result<SuiteName, String> {
    s.parse().map_err(|e: segcn_core::Error| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            dataset,
            out,
            quiet,
        } => {
            let mut config = config.resolve()?;
            if dataset.is_some() {
                config.dataset = dataset;
            }
            if out.is_some() {
                config.output_dir = out;
            }
            let Some(path) = config.dataset.clone() else {
                bail!("no dataset given; pass --dataset or set `dataset` in the config");
            };
            let bundle =
                load_bundle(&path).with_context(|| format!("loading {}", path.display()))?;
            let run = train_with(&config, &bundle, |record| {
                if !quiet {
                    println!("{}", metrics_line(record));
                }
            })?;
            eprintln!(
                "best epoch {}: teacher test accuracy {:.4}, student {:.4}",
                run.best_epoch, run.test_accuracy, run.student_test_accuracy
            );
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            config,
            subset,
        } => {
            let config = config.resolve()?;
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let bundle = load_bundle(&dataset)?;
            let split = config.resolve_split(&bundle)?;
            let prepared = PreparedGraph::new(&bundle, config.row_normalize)?;
            let acc = evaluate(
                &checkpoint.params,
                &prepared,
                &split,
                subset.parse::<Subset>()?,
            )?;
            println!("{acc:.6}");
        }
        Command::Suite {
            name,
            data_dir,
            runs,
            first_seed,
            overrides,
            out,
        } => {
            let segcn = load_config(Mode::Segcn, None, &overrides)?;
            let baseline = load_config(Mode::Baseline, None, &overrides)?;
            let runs = runs.unwrap_or(name.default_runs());
            let seeds: Vec<u64> = (first_seed..first_seed + runs as u64).collect();
            let rows = run_suite(name, &data_dir, &seeds, &segcn, &baseline, |row| {
                eprintln!(
                    "{} {} {}: {:.2} ± {:.2}",
                    row.dataset,
                    row.setting,
                    row.variant,
                    100.0 * row.mean,
                    100.0 * row.std_error
                );
            })?;
            write_summary_csv(&rows, &out)?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            layer,
            no_row_normalize,
            out,
        } => {
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let bundle = load_bundle(&dataset)?;
            let prepared = PreparedGraph::new(&bundle, !no_row_normalize)?;
            export_embeddings(&checkpoint.params, &prepared, Layer::try_from(layer)?, &out)?;
        }
        Command::MakeNode5 { source, out } => {
            let bundle = load_bundle(&source)?;
            write_bundle(&build_node5(&bundle)?, &out)?;
        }
    }
    Ok(())
}
