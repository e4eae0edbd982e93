//! Randomized invariants of the graph and numerics kernels, usable both from
//! `proptest!` blocks and from a plain `TestRunner`.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use segcn_core::graph::{normalize_adjacency, perturb_graph, PerturbConfig, UndirectedGraph};
use segcn_core::numerics::{
    apply_dropout, row_softmax, spmm, stream_rng, CsrMatrix, DenseMatrix, DropoutMask,
};

pub fn graph(max_nodes: usize) -> impl Strategy<Value = UndirectedGraph> {
    (1..=max_nodes, 0.0..0.3f64, any::<u64>())
        .prop_map(|(n, p, seed)| super::random_graph(n, p, &mut stream_rng(seed, 7)))
}

fn dense(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    proptest::collection::vec(-10.0..10.0f64, rows * cols)
        .prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

/// A sparse square matrix (about 30% fill) and a dense right-hand side.
pub fn spmm_instance() -> impl Strategy<Value = (CsrMatrix, DenseMatrix)> {
    (1..=50usize, 1..=8usize).prop_flat_map(|(n, f)| {
        let sparse =
            proptest::collection::vec(prop_oneof![7 => Just(0.0), 3 => -5.0..5.0f64], n * n)
                .prop_map(move |v| CsrMatrix::from_dense(&DenseMatrix::from_vec(n, n, v).unwrap()));
        (sparse, dense(n, f))
    })
}

pub fn logits() -> impl Strategy<Value = DenseMatrix> {
    (1..=6usize, 1..=6usize).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6..1e6f64, r * c)
            .prop_map(move |v| DenseMatrix::from_vec(r, c, v).unwrap())
    })
}

pub fn dropout_instance() -> impl Strategy<Value = (DenseMatrix, f64, u64)> {
    (1..=20usize, 1..=20usize).prop_flat_map(|(r, c)| (dense(r, c), 0.0..0.95f64, any::<u64>()))
}

pub fn dense_oracle(g: &UndirectedGraph) -> Vec<Vec<f64>> {
    let n = g.num_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for (u, v) in g.edges() {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] / d[i].sqrt() / d[j].sqrt();
        }
    }
    out
}

pub fn check_normalization(g: &UndirectedGraph) -> Result<(), TestCaseError> {
    let a = normalize_adjacency(g);
    let m = a.matrix();
    let oracle = dense_oracle(g);
    let dense = m.to_dense();
    for i in 0..g.num_nodes() {
        prop_assert!(m.get(i, i) > 0.0);
        for j in 0..g.num_nodes() {
            prop_assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            prop_assert!((dense.get(i, j) - oracle[i][j]).abs() <= 1e-12);
            let stored = i == j || g.has_edge(i, j);
            prop_assert_eq!(dense.get(i, j) != 0.0, stored);
        }
    }
    prop_assert_eq!(m.nnz(), 2 * g.num_edges() + g.num_nodes());
    prop_assert!(m.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    Ok(())
}

pub fn check_perturbation(g: &UndirectedGraph, p: f64, seed: u64) -> Result<(), TestCaseError> {
    let cfg = PerturbConfig {
        edge_drop_prob: p,
        ..Default::default()
    };
    let out = perturb_graph(g, &cfg, &mut stream_rng(seed, 4)).unwrap();
    let again = perturb_graph(g, &cfg, &mut stream_rng(seed, 4)).unwrap();
    prop_assert_eq!(&out, &again);
    prop_assert_eq!(out.num_nodes(), g.num_nodes());
    for (u, v) in out.edges() {
        prop_assert!(g.has_edge(u, v));
    }
    for u in 0..g.num_nodes() {
        if g.degree(u) > 0 {
            prop_assert!(out.degree(u) > 0, "node {} isolated", u);
        }
    }
    if g.min_degree() >= 1 {
        prop_assert!(out.min_degree() >= 1);
    }
    Ok(())
}

pub fn check_spmm(a: &CsrMatrix, x: &DenseMatrix) -> Result<(), TestCaseError> {
    let got = spmm(a, x).unwrap();
    let dense = a.to_dense();
    for i in 0..a.rows() {
        for j in 0..x.cols() {
            let want: f64 = (0..a.cols()).map(|k| dense.get(i, k) * x.get(k, j)).sum();
            prop_assert!((got.get(i, j) - want).abs() <= 1e-12);
        }
    }
    Ok(())
}

pub fn check_softmax(logits: &DenseMatrix) -> Result<(), TestCaseError> {
    let p = row_softmax(logits);
    prop_assert!(p.is_finite());
    for i in 0..p.rows() {
        let row = p.row(i);
        prop_assert!(row.iter().all(|&v| v >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    Ok(())
}

pub fn check_mask_reuse(x: &DenseMatrix, rate: f64, seed: u64) -> Result<(), TestCaseError> {
    let (out, mask) = apply_dropout(x, rate, &mut stream_rng(seed, 3)).unwrap();
    let replay = mask.apply(x).unwrap();
    let bits = |m: &DenseMatrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    prop_assert_eq!(bits(&out), bits(&replay));
    let resampled = DropoutMask::sample(x.values().len(), rate, &mut stream_rng(seed, 3)).unwrap();
    prop_assert_eq!(resampled.keep(), mask.keep());
    Ok(())
}

/// Mean fraction of edges kept by the drop step over `draws` perturbations
/// of a graph dense enough that the repair step almost never fires.
pub fn surviving_fraction(p: f64, draws: usize) -> f64 {
    let g = super::random_graph(150, 0.2, &mut stream_rng(11, 7));
    let cfg = PerturbConfig {
        edge_drop_prob: p,
        ..Default::default()
    };
    let mut rng = stream_rng(12, 4);
    let total: f64 = (0..draws)
        .map(|_| perturb_graph(&g, &cfg, &mut rng).unwrap().num_edges() as f64)
        .sum();
    total / draws as f64 / g.num_edges() as f64
}

/// Runs every property over `cases` generated instances; returns the name
/// and outcome of each.
pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    fn run<S: Strategy>(
        cases: u32,
        strategy: S,
        check: impl Fn(S::Value) -> Result<(), TestCaseError>,
    ) -> Result<(), String> {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        runner.run(&strategy, check).map_err(|e| e.to_string())
    }
    let mut results = vec![
        (
            "normalization vs dense oracle",
            run(cases, graph(200), |g| check_normalization(&g)),
        ),
        (
            "perturbation subset, degree, determinism",
            run(
                cases,
                (graph(120), 0.0..=1.0f64, any::<u64>()),
                |(g, p, s)| check_perturbation(&g, p, s),
            ),
        ),
        (
            "spmm vs dense oracle",
            run(cases, spmm_instance(), |(a, x)| check_spmm(&a, &x)),
        ),
        (
            "softmax stability",
            run(cases, logits(), |l| check_softmax(&l)),
        ),
        (
            "dropout mask reuse",
            run(cases, dropout_instance(), |(x, r, s)| {
                check_mask_reuse(&x, r, s)
            }),
        ),
    ];
    let fractions: Vec<(f64, f64)> = [0.1, 0.3, 0.5]
        .into_iter()
        .map(|p| (p, surviving_fraction(p, 1000)))
        .collect();
    let surviving = match fractions.iter().find(|(p, f)| (f - (1.0 - p)).abs() > 0.02) {
        Some((p, f)) => Err(format!("p = {p}: kept fraction {f:.4}")),
        None => Ok(()),
    };
    results.push(("surviving edge fraction", surviving));
    results
}
