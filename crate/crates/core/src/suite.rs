//! Named grids of training runs summarized as mean ± standard error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_bundle, GraphBundle};
use crate::error::{Error, Result};
use crate::train::{train, Perturbations, SelfTraining, SplitMode, TrainConfig};

pub const DATASETS: [&str; 3] = ["citeseer", "cora", "pubmed"];
pub const PUBMED_LABEL_COUNTS: [usize; 3] = [50, 100, 200];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    FixedSplits,
    RandomSplits,
    PubmedLabels,
    AblationCora,
}

impl SuiteName {
    pub fn default_runs(self) -> usize {
        match self {
            SuiteName::RandomSplits => 20,
            _ => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteName::FixedSplits => "fixed-splits",
            SuiteName::RandomSplits => "random-splits",
            SuiteName::PubmedLabels => "pubmed-labels",
            SuiteName::AblationCora => "ablation-cora",
        }
    }
}

impl std::str::FromStr for SuiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SuiteName::FixedSplits,
            SuiteName::RandomSplits,
            SuiteName::PubmedLabels,
            SuiteName::AblationCora,
        ]
        .into_iter()
        .find(|name| name.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}")))
    }
}

/// One cell of a suite: a dataset, a split setting, and a model variant.
#[derive(Clone, Debug)]
pub struct Cell {
    pub dataset: String,
    pub setting: String,
    pub variant: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub suite: String,
    pub dataset: String,
    pub setting: String,
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Mean and standard error of the mean (sample deviation over `sqrt(n)`).
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Rows of the ablation table, in order, each derived from `segcn`.
pub fn ablation_variants(
    segcn: &TrainConfig,
    baseline: &TrainConfig,
) -> Vec<(&'static str, TrainConfig)> {
    let consistency_only = |edge_drop, high_dropout, feature_erase| TrainConfig {
        self_training: SelfTraining::Off,
        perturbations: Perturbations {
            edge_drop,
            high_dropout,
            feature_erase,
            ..segcn.perturbations.clone()
        },
        ..segcn.clone()
    };
    vec![
        ("baseline", baseline.clone()),
        ("feature-erase", consistency_only(false, false, true)),
        ("edge-drop", consistency_only(true, false, false)),
        ("high-dropout", consistency_only(false, true, false)),
        (
            "edge-drop+high-dropout",
            consistency_only(true, true, false),
        ),
        (
            "teacher-self-training",
            TrainConfig {
                self_training: SelfTraining::TeacherOnly,
                ..consistency_only(true, true, false)
            },
        ),
        (
            "dual-self-training",
            TrainConfig {
                self_training: SelfTraining::Dual,
                ..consistency_only(true, true, false)
            },
        ),
    ]
}

/// Expands a suite into cells. `segcn` and `baseline` are the two base
/// configurations every variant is derived from.
pub fn suite_cells(name: SuiteName, segcn: &TrainConfig, baseline: &TrainConfig) -> Vec<Cell> {
    let pair = |dataset: &str, setting: &str, split: SplitMode| {
        [("baseline", baseline), ("segcn", segcn)].map(|(variant, base)| Cell {
            dataset: dataset.into(),
            setting: setting.into(),
            variant: variant.into(),
            config: TrainConfig {
                split: split.clone(),
                ..base.clone()
            },
        })
    };
    match name {
        SuiteName::FixedSplits => DATASETS
            .iter()
            .flat_map(|d| pair(d, "fixed", SplitMode::Fixed))
            .collect(),
        SuiteName::RandomSplits => DATASETS
            .iter()
            .flat_map(|d| pair(d, "random", SplitMode::Random { seed: None }))
            .collect(),
        SuiteName::PubmedLabels => PUBMED_LABEL_COUNTS
            .iter()
            .flat_map(|&k| {
                pair(
                    "pubmed",
                    &format!("k={k}"),
                    SplitMode::LabelCount { k, seed: None },
                )
            })
            .collect(),
        SuiteName::AblationCora => ablation_variants(segcn, baseline)
            .into_iter()
            .map(|(variant, config)| Cell {
                dataset: "cora".into(),
                setting: "fixed".into(),
                variant: variant.into(),
                config: TrainConfig {
                    split: SplitMode::Fixed,
                    ..config
                },
            })
            .collect(),
    }
}

/// Test accuracies of one cell, one run per seed.
pub fn run_cell(cell: &Cell, bundle: &GraphBundle, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let config = TrainConfig {
                seed,
                output_dir: None,
                ..cell.config.clone()
            };
            train(&config, bundle).map(|run| run.test_accuracy)
        })
        .collect()
}

/// Runs every cell of the suite with bundles loaded from
/// `data_dir/<dataset>.segb`, calling `progress` after each cell.
pub fn run_suite(
    name: SuiteName,
    data_dir: &Path,
    seeds: &[u64],
    segcn: &TrainConfig,
    baseline: &TrainConfig,
    mut progress: impl FnMut(&SummaryRow),
) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut loaded: Option<(String, GraphBundle)> = None;
    for cell in suite_cells(name, segcn, baseline) {
        if loaded.as_ref().is_none_or(|(d, _)| *d != cell.dataset) {
            let bundle = load_bundle(data_dir.join(format!("{}.segb", cell.dataset)))?;
            loaded = Some((cell.dataset.clone(), bundle));
        }
        let bundle = &loaded.as_ref().expect("bundle loaded above").1;
        let accs = run_cell(&cell, bundle, seeds)?;
        let (mean, std_error) = mean_and_std_error(&accs);
        let row = SummaryRow {
            suite: name.as_str().into(),
            dataset: cell.dataset,
            setting: cell.setting,
            variant: cell.variant,
            runs: accs.len(),
            mean,
            std_error,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "suite,dataset,setting,variant,runs,mean,std_error").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            r.suite, r.dataset, r.setting, r.variant, r.runs, r.mean, r.std_error
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
