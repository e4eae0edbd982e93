#![allow(clippy::needless_range_loop)]

mod common;

use common::props::*;
use proptest::prelude::*;
use segcn_core::graph::{normalize_adjacency, UndirectedGraph};
use segcn_core::model::{predict, GcnParams};
use segcn_core::numerics::{stream_rng, CsrMatrix, DenseMatrix};

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalization_matches_dense_oracle(g in graph(200)) {
        check_normalization(&g)?;
    }

    #[test]
    fn perturbation_keeps_subset_and_degrees(g in graph(120), p in 0.0..=1.0f64, seed in any::<u64>()) {
        check_perturbation(&g, p, seed)?;
    }

    #[test]
    fn spmm_matches_dense_oracle((a, x) in spmm_instance()) {
        check_spmm(&a, &x)?;
    }

    #[test]
    fn softmax_is_stable_for_huge_logits(l in logits()) {
        check_softmax(&l)?;
    }

    #[test]
    fn dropout_mask_replays_bitwise((x, rate, seed) in dropout_instance()) {
        check_mask_reuse(&x, rate, seed)?;
    }

    #[test]
    fn forward_is_permutation_equivariant(g in graph(30), seed in any::<u64>()) {
        let n = g.num_nodes();
        let mut rng = stream_rng(seed, 9);
        let x = common::random_features(n, 5, 0.4, &mut rng);
        let params = common::random_params(5, 4, 3, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);

        let permuted_graph = g.permuted(&perm).unwrap();
        let dense = x.to_dense();
        let mut moved = DenseMatrix::zeros(n, 5);
        for old in 0..n {
            moved.row_mut(perm[old]).copy_from_slice(dense.row(old));
        }
        let moved = CsrMatrix::from_dense(&moved);

        let p = predict(&params, &normalize_adjacency(&g), &x).unwrap();
        let q = predict(&params, &normalize_adjacency(&permuted_graph), &moved).unwrap();
        for old in 0..n {
            for c in 0..3 {
                prop_assert!((p.get(old, c) - q.get(perm[old], c)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn surviving_edges_match_drop_probability() {
    for p in [0.1, 0.3, 0.5] {
        let kept = surviving_fraction(p, 1000);
        assert!((kept - (1.0 - p)).abs() <= 0.02, "p = {p}: kept {kept}");
    }
}

#[test]
fn forward_without_dropout_is_pure() {
    let mut rng = stream_rng(5, 9);
    let g: UndirectedGraph = common::random_graph(12, 0.3, &mut rng);
    let x = common::random_features(12, 6, 0.5, &mut rng);
    let params = GcnParams::glorot(6, 4, 3, &mut rng);
    let a = normalize_adjacency(&g);
    let first = predict(&params, &a, &x).unwrap();
    let second = predict(&params, &a, &x).unwrap();
    assert_eq!(first, second);
}
