//! The student/teacher training loop, evaluation, and embedding export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_label_count_split, make_random_split, row_normalize_features, GraphBundle, SplitSpec,
};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, perturb_graph, NormalizedAdjacency, PerturbConfig};
use crate::losses::{
    combine, cross_entropy, cross_entropy_with, kl_consistency_with, LossReport, NodeMask,
    Reduction,
};
use crate::model::{
    backward, forward, hidden_activations, predict, predict_many, Checkpoint, GcnParams, Role,
    DEFAULT_HIDDEN,
};
use crate::numerics::{stream_rng, CsrMatrix, DenseMatrix};
use crate::optim::{adam_step, ema_update, eval_schedules, AdamConfig, AdamState, Schedules};
use crate::self_training::{select_with_rule, PseudoLabelSet, SelectionRule};

const TAG_SPLIT: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_PERTURB: u64 = 4;
const TAG_ERASE: u64 = 5;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitMode {
    #[default]
    Fixed,
    Random {
        seed: Option<u64>,
    },
    LabelCount {
        k: usize,
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain GCN: no consistency term, no teacher averaging, no perturbation,
    /// no pseudo-labels.
    Baseline,
    #[default]
    Segcn,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Segcn => "segcn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfTraining {
    Off,
    TeacherOnly,
    #[default]
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbations {
    /// Edge dropping on the student's consistency pass.
    pub edge_drop: bool,
    /// Raised dropout on the student's consistency pass.
    pub high_dropout: bool,
    /// Bernoulli zeroing of raw feature entries on the consistency pass.
    pub feature_erase: bool,
    pub feature_erase_rate: f64,
}

impl Default for Perturbations {
    fn default() -> Self {
        Self {
            edge_drop: true,
            high_dropout: true,
            feature_erase: false,
            feature_erase_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub split: SplitMode,
    pub mode: Mode,
    pub schedules: Schedules,
    pub adam: AdamConfig,
    pub hidden: usize,
    pub student_dropout: f64,
    pub perturbed_dropout: f64,
    pub teacher_dropout: f64,
    pub perturb: PerturbConfig,
    pub perturbations: Perturbations,
    pub self_training: SelfTraining,
    /// Keep earlier pseudo-labels instead of re-selecting from scratch.
    pub accumulate_pseudo_labels: bool,
    /// Whether test nodes may receive pseudo-labels.
    pub pseudo_label_test_nodes: bool,
    pub row_normalize: bool,
    /// Aggregation of per-node loss terms in both the supervised and the
    /// consistency term.
    pub loss_reduction: Reduction,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            split: SplitMode::Fixed,
            mode: Mode::Segcn,
            schedules: Schedules::default(),
            adam: AdamConfig::default(),
            hidden: DEFAULT_HIDDEN,
            student_dropout: 0.5,
            perturbed_dropout: 0.8,
            teacher_dropout: 0.0,
            perturb: PerturbConfig::default(),
            perturbations: Perturbations::default(),
            self_training: SelfTraining::Dual,
            accumulate_pseudo_labels: false,
            pseudo_label_test_nodes: true,
            row_normalize: true,
            loss_reduction: Reduction::Mean,
            seed: 0,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    /// Vanilla GCN over 200 epochs.
    pub fn baseline() -> Self {
        Self {
            mode: Mode::Baseline,
            self_training: SelfTraining::Off,
            perturbations: Perturbations {
                edge_drop: false,
                high_dropout: false,
                ..Default::default()
            },
            schedules: Schedules {
                total_epochs: 200,
                ramp_length: 200,
                self_training_start: 200,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn segcn() -> Self {
        Self::default()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        self.perturb.validate()?;
        if self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "hidden width must be positive".into(),
            ));
        }
        for (name, rate) in [
            ("student_dropout", self.student_dropout),
            ("perturbed_dropout", self.perturbed_dropout),
            ("teacher_dropout", self.teacher_dropout),
            ("feature_erase_rate", self.perturbations.feature_erase_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if self.teacher_dropout > self.student_dropout {
            return Err(Error::InvalidArgument(format!(
                "teacher dropout {} exceeds student dropout {}",
                self.teacher_dropout, self.student_dropout
            )));
        }
        if self.mode == Mode::Baseline
            && (self.self_training != SelfTraining::Off
                || self.perturbations.edge_drop
                || self.perturbations.high_dropout
                || self.perturbations.feature_erase)
        {
            return Err(Error::InvalidArgument(
                "baseline mode excludes perturbations and self-training".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve_split(&self, bundle: &GraphBundle) -> Result<SplitSpec> {
        let split = match &self.split {
            SplitMode::Fixed => bundle.fixed_split.clone(),
            SplitMode::Random { seed } => make_random_split(
                bundle,
                &mut stream_rng(seed.unwrap_or(self.seed), TAG_SPLIT),
            )?,
            SplitMode::LabelCount { k, seed } => make_label_count_split(
                bundle,
                *k,
                &mut stream_rng(seed.unwrap_or(self.seed), TAG_SPLIT),
            )?,
        };
        split.validate(bundle.num_nodes())?;
        if split.train.is_empty() {
            return Err(Error::EmptyMask("training split"));
        }
        Ok(split)
    }
}

/// Features and propagation operator derived from a bundle.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub features: CsrMatrix,
    pub a_hat: NormalizedAdjacency,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl PreparedGraph {
    pub fn new(bundle: &GraphBundle, row_normalize: bool) -> Result<Self> {
        let features = if row_normalize {
            row_normalize_features(&bundle.features)?
        } else {
            bundle.features.clone()
        };
        Ok(Self {
            features,
            a_hat: normalize_adjacency(&bundle.graph),
            labels: bundle.labels.clone(),
            num_classes: bundle.num_classes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::InvalidArgument(format!("unknown subset {other:?}"))),
        }
    }
}

impl SplitSpec {
    pub fn subset(&self, which: Subset) -> &[usize] {
        match which {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }
}

pub fn accuracy(probs: &DenseMatrix, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::EmptyMask("accuracy"));
    }
    let predicted = probs.argmax_rows();
    let hits = nodes.iter().filter(|&&i| predicted[i] == labels[i]).count();
    Ok(hits as f64 / nodes.len() as f64)
}

/// Accuracy of dropout-free predictions on the complete graph.
pub fn evaluate(
    params: &GcnParams,
    prepared: &PreparedGraph,
    split: &SplitSpec,
    which: Subset,
) -> Result<f64> {
    let probs = predict(params, &prepared.a_hat, &prepared.features)?;
    accuracy(&probs, &prepared.labels, split.subset(which))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub lambda: f64,
    pub total_loss: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub student_val_acc: Option<f64>,
    pub teacher_val_acc: Option<f64>,
    pub teacher_val_loss: Option<f64>,
    /// Pseudo-labels used in this epoch's supervised term.
    pub pseudo_labels: usize,
    /// Agreement of those pseudo-labels with ground truth; diagnostic only.
    pub pseudo_precision: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub records: Vec<EpochRecord>,
    pub split: SplitSpec,
    pub best_epoch: usize,
    pub best_teacher: Checkpoint,
    pub best_student: Checkpoint,
    pub final_teacher: GcnParams,
    pub final_student: GcnParams,
    /// Teacher accuracy on the test set at the selected epoch.
    pub test_accuracy: f64,
    pub student_test_accuracy: f64,
}

impl RunArtifacts {
    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for record in &self.records {
            writeln!(out, "{}", metrics_line(record)).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes metrics, both peak checkpoints, and a summary into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_metrics(dir.join("metrics.jsonl"))?;
        self.best_teacher.save(dir.join("teacher.json"))?;
        self.best_student.save(dir.join("student.json"))?;
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "test_accuracy": self.test_accuracy,
            "student_test_accuracy": self.student_test_accuracy,
            "epochs": self.records.len(),
        });
        let path = dir.join("summary.json");
        fs::write(&path, format!("{summary:#}\n")).map_err(|e| Error::io(&path, e))
    }
}

pub fn metrics_line(record: &EpochRecord) -> String {
    serde_json::to_string(record).expect("epoch records always serialize")
}

fn erase_features<R: Rng + ?Sized>(x: &CsrMatrix, rate: f64, rng: &mut R) -> CsrMatrix {
    let values = x
        .values()
        .iter()
        .map(|&v| if rng.random::<f64>() < rate { 0.0 } else { v })
        .collect();
    x.with_values(values)
}

fn diverged(epoch: usize, report: &LossReport) -> Error {
    Error::Diverged {
        epoch,
        detail: format!(
            "sup_loss={} unsup_loss={} lambda={} total={}",
            report.sup_loss, report.unsup_loss, report.lambda, report.total
        ),
    }
}

struct Peak {
    epoch: usize,
    acc: f64,
    loss: f64,
    teacher: GcnParams,
    student: GcnParams,
}

pub fn train(config: &TrainConfig, bundle: &GraphBundle) -> Result<RunArtifacts> {
    train_with(config, bundle, |_| {})
}

/// Runs the loop, passing every epoch record to `observe` as it is produced.
pub fn train_with(
    config: &TrainConfig,
    bundle: &GraphBundle,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<RunArtifacts> {
    config.validate()?;
    bundle.validate()?;
    let split = config.resolve_split(bundle)?;
    let prepared = PreparedGraph::new(bundle, config.row_normalize)?;
    let n = bundle.num_nodes();
    let x = &prepared.features;
    let a_hat = &prepared.a_hat;
    let baseline = config.mode == Mode::Baseline;
    let sched = &config.schedules;

    let mut student = GcnParams::glorot(
        x.cols(),
        config.hidden,
        bundle.num_classes,
        &mut stream_rng(config.seed, TAG_INIT),
    );
    let mut teacher = student.clone();
    let mut adam = AdamState::new(&student, config.adam.clone());

    let mut dropout_rng = stream_rng(config.seed, TAG_DROPOUT);
    let mut perturb_rng = stream_rng(config.perturb.seed.unwrap_or(config.seed), TAG_PERTURB);
    let mut erase_rng = stream_rng(config.seed, TAG_ERASE);

    let train_mask = NodeMask::from_indices(n, &split.train);
    let all_nodes = NodeMask::all(n);
    let mut eligible = NodeMask::all(n);
    split
        .train
        .iter()
        .chain(&split.val)
        .for_each(|&i| eligible.set(i, false));
    if !config.pseudo_label_test_nodes {
        split.test.iter().for_each(|&i| eligible.set(i, false));
    }
    let val_mask = (!split.val.is_empty()).then(|| NodeMask::from_indices(n, &split.val));

    let use_edge_drop = !baseline && config.perturbations.edge_drop;
    let fixed_perturbed = if use_edge_drop && !config.perturb.resample_each_epoch {
        Some(normalize_adjacency(&perturb_graph(
            &bundle.graph,
            &config.perturb,
            &mut perturb_rng,
        )?))
    } else {
        None
    };
    let consistency_rate = if config.perturbations.high_dropout {
        config.perturbed_dropout
    } else {
        config.student_dropout
    };

    let mut teacher_probs = predict(&teacher, a_hat, x)?;
    let mut pseudo = PseudoLabelSet::default();
    let mut records = Vec::with_capacity(sched.total_epochs);
    let mut peak: Option<Peak> = None;

    for epoch in 0..sched.total_epochs {
        let values = eval_schedules(epoch, sched);
        let lambda = if baseline { 0.0 } else { values.lambda };

        let mut sup_mask = train_mask.clone();
        let mut targets = prepared.labels.clone();
        for (i, c) in pseudo.iter() {
            sup_mask.set(i, true);
            targets[i] = c;
        }
        let (clean_probs, clean_trace) =
            forward(&student, a_hat, x, config.student_dropout, &mut dropout_rng)?;
        let (sup_loss, grad_sup) =
            cross_entropy_with(&clean_probs, &targets, &sup_mask, config.loss_reduction)?;
        let mut grads = backward(&clean_trace, &student, a_hat, x, &grad_sup)?;

        let mut unsup_loss = 0.0;
        if !baseline {
            let sampled;
            let a_cons = if let Some(fixed) = &fixed_perturbed {
                fixed
            } else if use_edge_drop {
                sampled = normalize_adjacency(&perturb_graph(
                    &bundle.graph,
                    &config.perturb,
                    &mut perturb_rng,
                )?);
                &sampled
            } else {
                a_hat
            };
            let erased;
            let x_cons = if config.perturbations.feature_erase {
                let raw = erase_features(
                    &bundle.features,
                    config.perturbations.feature_erase_rate,
                    &mut erase_rng,
                );
                erased = if config.row_normalize {
                    row_normalize_features(&raw)?
                } else {
                    raw
                };
                &erased
            } else {
                x
            };
            let (cons_probs, cons_trace) =
                forward(&student, a_cons, x_cons, consistency_rate, &mut dropout_rng)?;
            let noisy_teacher;
            let target = if config.teacher_dropout > 0.0 {
                noisy_teacher =
                    forward(&teacher, a_hat, x, config.teacher_dropout, &mut dropout_rng)?.0;
                &noisy_teacher
            } else {
                &teacher_probs
            };
            let (kl, grad_kl) =
                kl_consistency_with(target, &cons_probs, &all_nodes, config.loss_reduction)?;
            unsup_loss = kl;
            if lambda > 0.0 {
                let g = backward(&cons_trace, &student, a_cons, x_cons, &grad_kl)?;
                grads.add_scaled(&g, lambda)?;
            }
        }

        let report = combine(sup_loss, unsup_loss, lambda);
        if !report.total.is_finite() {
            return Err(diverged(epoch, &report));
        }
        adam_step(&mut student, &grads, &mut adam).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { epoch, detail },
            other => other,
        })?;
        if baseline {
            teacher = student.clone();
        } else {
            ema_update(&mut teacher, &student, values.alpha)?;
        }

        let [t_probs, student_probs]: [DenseMatrix; 2] =
            predict_many(&[&teacher, &student], a_hat, x)?
                .try_into()
                .expect("one result per parameter set");
        teacher_probs = t_probs;

        let (student_val_acc, teacher_val_acc, teacher_val_loss) = match &val_mask {
            Some(mask) => (
                Some(accuracy(&student_probs, &prepared.labels, &split.val)?),
                Some(accuracy(&teacher_probs, &prepared.labels, &split.val)?),
                Some(cross_entropy(&teacher_probs, &prepared.labels, mask)?.0),
            ),
            None => (None, None, None),
        };

        let record = EpochRecord {
            epoch,
            sup_loss: report.sup_loss,
            unsup_loss: report.unsup_loss,
            lambda: report.lambda,
            total_loss: report.total,
            alpha: if baseline { 0.0 } else { values.alpha },
            threshold: values.threshold,
            student_val_acc,
            teacher_val_acc,
            teacher_val_loss,
            pseudo_labels: pseudo.len(),
            pseudo_precision: pseudo.precision(&prepared.labels),
        };
        observe(&record);
        records.push(record);

        if let (Some(acc), Some(loss)) = (teacher_val_acc, teacher_val_loss) {
            let better = match &peak {
                None => true,
                Some(p) => acc > p.acc || (acc == p.acc && loss < p.loss),
            };
            if better {
                peak = Some(Peak {
                    epoch,
                    acc,
                    loss,
                    teacher: teacher.clone(),
                    student: student.clone(),
                });
            }
        }

        if !baseline
            && config.self_training != SelfTraining::Off
            && epoch >= sched.self_training_start
        {
            let rule = match config.self_training {
                SelfTraining::TeacherOnly => SelectionRule::TeacherOnly,
                _ => SelectionRule::DualAgreement,
            };
            let mut selected = select_with_rule(
                Some(&student_probs),
                &teacher_probs,
                values.threshold,
                &eligible,
                rule,
            )?;
            selected.epoch = epoch;
            if config.accumulate_pseudo_labels {
                pseudo.merge(&selected);
            } else {
                pseudo = selected;
            }
        }
    }

    let last_epoch = sched.total_epochs.saturating_sub(1);
    let peak = peak.unwrap_or_else(|| Peak {
        epoch: last_epoch,
        acc: f64::NAN,
        loss: f64::NAN,
        teacher: teacher.clone(),
        student: student.clone(),
    });
    let test_accuracy = evaluate(&peak.teacher, &prepared, &split, Subset::Test)?;
    let student_test_accuracy = evaluate(&peak.student, &prepared, &split, Subset::Test)?;
    let artifacts = RunArtifacts {
        records,
        split,
        best_epoch: peak.epoch,
        best_teacher: Checkpoint::new(Role::Teacher, peak.epoch, peak.teacher),
        best_student: Checkpoint::new(Role::Student, peak.epoch, peak.student),
        final_teacher: teacher,
        final_student: student,
        test_accuracy,
        student_test_accuracy,
    };
    if let Some(dir) = &config.output_dir {
        artifacts.save(dir)?;
    }
    Ok(artifacts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Hidden,
    Output,
}

impl TryFrom<u8> for Layer {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            1 => Ok(Layer::Hidden),
            2 => Ok(Layer::Output),
            other => Err(Error::InvalidArgument(format!(
                "layer must be 1 or 2, got {other}"
            ))),
        }
    }
}

/// Dropout-free activations of the chosen layer: the post-ReLU hidden layer,
/// or the output logits.
pub fn embeddings(
    params: &GcnParams,
    prepared: &PreparedGraph,
    layer: Layer,
) -> Result<DenseMatrix> {
    match layer {
        Layer::Hidden => hidden_activations(params, &prepared.a_hat, &prepared.features),
        Layer::Output => {
            let mut unused = stream_rng(0, 0);
            forward(
                params,
                &prepared.a_hat,
                &prepared.features,
                0.0,
                &mut unused,
            )
            .map(|(_, trace)| trace.logits)
        }
    }
}

/// Tab-separated rows of `node id`, `label`, then the layer's activations.
pub fn export_embeddings(
    params: &GcnParams,
    prepared: &PreparedGraph,
    layer: Layer,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let values = embeddings(params, prepared, layer)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for i in 0..values.rows() {
        let mut line = format!("{i}\t{}", prepared.labels[i]);
        for v in values.row(i) {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
