//! Helpers shared by the integration test targets.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod props;

use rand::Rng;
use segcn_core::graph::{normalize_adjacency, perturb_graph, PerturbConfig, UndirectedGraph};
use segcn_core::losses::{combine, cross_entropy, kl_consistency, NodeMask};
use segcn_core::model::{backward, forward, GcnParams, GradParams};
use segcn_core::numerics::{stream_rng, CsrMatrix, DenseMatrix, SeededRng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const TINY: f64 = 1e-8;

/// Erdős–Rényi graph on `n` nodes with edge probability `p`.
pub fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> UndirectedGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    UndirectedGraph::from_edges(n, edges).unwrap()
}

/// Sparse non-negative features with at least one entry per row.
pub fn random_features(n: usize, f: usize, density: f64, rng: &mut impl Rng) -> CsrMatrix {
    let mut dense = DenseMatrix::zeros(n, f);
    for i in 0..n {
        let forced = rng.random_range(0..f);
        for j in 0..f {
            if j == forced || rng.random::<f64>() < density {
                dense.set(i, j, rng.random_range(0.1..1.0));
            }
        }
    }
    CsrMatrix::from_dense(&dense)
}

pub fn random_params(f: usize, h: usize, c: usize, rng: &mut impl Rng) -> GcnParams {
    let mut fill = |r: usize, k: usize| {
        let values = (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(r, k, values).unwrap()
    };
    let theta0 = fill(f, h);
    let theta1 = fill(h, c);
    GcnParams::new(theta0, theta1).unwrap()
}

pub fn random_probs(n: usize, c: usize, rng: &mut impl Rng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = row.iter().sum();
        for (j, v) in row.into_iter().enumerate() {
            m.set(i, j, v / total);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Consistency,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::CrossEntropy,
        LossKind::Consistency,
        LossKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Consistency => "consistency",
            LossKind::Combined => "combined",
        }
    }
}

/// A small training problem: a clean pass on the full graph for the
/// supervised term and a perturbed pass for the consistency term, each with
/// its own fixed dropout stream.
pub struct GradInstance {
    pub params: GcnParams,
    pub x: CsrMatrix,
    pub graph: UndirectedGraph,
    pub collapsed: UndirectedGraph,
    pub labels: Vec<usize>,
    pub train: NodeMask,
    pub teacher: DenseMatrix,
    pub lambda: f64,
    pub clean_rate: f64,
    pub perturbed_rate: f64,
    pub seed: u64,
}

impl GradInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 101);
        let n = rng.random_range(4..=10);
        let f = rng.random_range(2..=8);
        let h = rng.random_range(2..=5);
        let c = rng.random_range(2..=4);
        let graph = random_graph(n, 0.4, &mut rng);
        let collapsed = perturb_graph(
            &graph,
            &PerturbConfig {
                edge_drop_prob: 0.3,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut train = NodeMask::none(n);
        for i in 0..n {
            if i == 0 || rng.random::<f64>() < 0.5 {
                train.set(i, true);
            }
        }
        Self {
            params: random_params(f, h, c, &mut rng),
            x: random_features(n, f, 0.5, &mut rng),
            graph,
            collapsed,
            labels,
            train,
            teacher: random_probs(n, c, &mut rng),
            lambda: rng.random_range(0.5..2.0),
            clean_rate: 0.5,
            perturbed_rate: 0.8,
            seed,
        }
    }

    fn clean_rng(&self) -> SeededRng {
        stream_rng(self.seed, 3)
    }

    fn perturbed_rng(&self) -> SeededRng {
        stream_rng(self.seed, 4)
    }

    pub fn loss(&self, kind: LossKind, params: &GcnParams) -> f64 {
        self.loss_and_grad(kind, params).0
    }

    pub fn loss_and_grad(&self, kind: LossKind, params: &GcnParams) -> (f64, GradParams) {
        let mut grad = GradParams::zeros_like(params);
        let (mut sup, mut unsup) = (0.0, 0.0);
        if kind != LossKind::Consistency {
            let a = normalize_adjacency(&self.graph);
            let (probs, trace) =
                forward(params, &a, &self.x, self.clean_rate, &mut self.clean_rng()).unwrap();
            let (loss, g) = cross_entropy(&probs, &self.labels, &self.train).unwrap();
            sup = loss;
            grad.add_scaled(&backward(&trace, params, &a, &self.x, &g).unwrap(), 1.0)
                .unwrap();
        }
        if kind != LossKind::CrossEntropy {
            let a = normalize_adjacency(&self.collapsed);
            let (probs, trace) = forward(
                params,
                &a,
                &self.x,
                self.perturbed_rate,
                &mut self.perturbed_rng(),
            )
            .unwrap();
            let all = NodeMask::all(self.x.rows());
            let (loss, g) = kl_consistency(&self.teacher, &probs, &all).unwrap();
            unsup = loss;
            let scale = if kind == LossKind::Combined {
                self.lambda
            } else {
                1.0
            };
            grad.add_scaled(&backward(&trace, params, &a, &self.x, &g).unwrap(), scale)
                .unwrap();
        }
        let total = match kind {
            LossKind::CrossEntropy => sup,
            LossKind::Consistency => unsup,
            LossKind::Combined => combine(sup, unsup, self.lambda).total,
        };
        (total, grad)
    }

    /// Smallest |pre-activation| over both passes; finite differences are
    /// only meaningful away from ReLU kinks.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (graph, rate, mut rng) in [
            (&self.graph, self.clean_rate, self.clean_rng()),
            (&self.collapsed, self.perturbed_rate, self.perturbed_rng()),
        ] {
            let a = normalize_adjacency(graph);
            let (_, trace) = forward(&self.params, &a, &self.x, rate, &mut rng).unwrap();
            for &v in trace.hidden_pre.values() {
                margin = margin.min(v.abs());
            }
        }
        margin
    }
}

/// Relative error per entry, absolute for entries where both values are
/// below [`TINY`].
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < TINY {
        diff
    } else {
        diff / scale
    }
}

/// Largest entry error between the analytic gradient and central differences.
pub fn gradient_check(instance: &GradInstance, kind: LossKind) -> f64 {
    let (_, grad) = instance.loss_and_grad(kind, &instance.params);
    let mut worst: f64 = 0.0;
    for layer in 0..2 {
        let len = match layer {
            0 => instance.params.theta0.values().len(),
            _ => instance.params.theta1.values().len(),
        };
        for k in 0..len {
            let shifted = |delta: f64| {
                let mut p = instance.params.clone();
                let m = if layer == 0 {
                    &mut p.theta0
                } else {
                    &mut p.theta1
                };
                m.values_mut()[k] += delta;
                instance.loss(kind, &p)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic = match layer {
                0 => grad.grad_theta0.values()[k],
                _ => grad.grad_theta1.values()[k],
            };
            worst = worst.max(entry_error(analytic, numeric));
        }
    }
    worst
}

/// The first `count` random instances whose pre-activations stay clear of
/// the ReLU kink by more than the finite-difference reach.
pub fn gradient_instances(count: usize) -> Vec<GradInstance> {
    (0..)
        .map(GradInstance::random)
        .filter(|inst| inst.kink_margin() > 1e-3)
        .take(count)
        .collect()
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// A prepared dataset bundle, or `None` (with a note on stderr) when the data
/// directory has not been populated.
pub fn dataset(name: &str) -> Option<segcn_core::data::GraphBundle> {
    let path = data_dir().join(format!("{name}.segb"));
    if !path.exists() {
        eprintln!("skipping: {} not found", path.display());
        return None;
    }
    Some(segcn_core::data::load_bundle(&path).unwrap())
}

/// A small planted-partition graph: `classes` communities of `per_class`
/// nodes, denser inside than across, with noisy class-indicative features.
/// Two labeled nodes per class, a quarter of each class for validation and
/// the rest for testing.
pub fn toy_bundle(classes: usize, per_class: usize, seed: u64) -> segcn_core::data::GraphBundle {
    use segcn_core::data::{FeatureEncoding, GraphBundle, SplitSpec};
    let mut rng = stream_rng(seed, 13);
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { 0.15 } else { 0.01 };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = UndirectedGraph::from_edges(n, edges).unwrap();
    let dims = 4 * classes;
    let mut dense = DenseMatrix::zeros(n, dims);
    for i in 0..n {
        for j in 0..dims {
            let signal = j / 4 == labels[i];
            if rng.random::<f64>() < if signal { 0.5 } else { 0.15 } {
                dense.set(i, j, 1.0);
            }
        }
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        match i / classes {
            k if k < 2 => train.push(i),
            k if k < 2 + per_class / 4 => val.push(i),
            _ => test.push(i),
        }
    }
    let bundle = GraphBundle {
        name: "toy".into(),
        features: CsrMatrix::from_dense(&dense),
        feature_encoding: FeatureEncoding::Sparse,
        labels,
        num_classes: classes,
        graph,
        fixed_split: SplitSpec { train, val, test },
    };
    bundle.validate().unwrap();
    bundle
}

/// The SEGCN preset shortened to `epochs` epochs with every phase active.
pub fn short_segcn(epochs: usize) -> segcn_core::train::TrainConfig {
    let mut config = segcn_core::train::TrainConfig::segcn();
    config.schedules.total_epochs = epochs;
    config.schedules.ramp_length = epochs / 4;
    config.schedules.self_training_start = epochs / 2;
    config.schedules.t_start = 0.6;
    config.schedules.t_end = 0.4;
    config
}

pub fn short_baseline(epochs: usize) -> segcn_core::train::TrainConfig {
    let mut config = segcn_core::train::TrainConfig::baseline();
    config.schedules.total_epochs = epochs;
    config.schedules.ramp_length = epochs.min(config.schedules.ramp_length);
    config.schedules.self_training_start = epochs.min(config.schedules.self_training_start);
    config
}
