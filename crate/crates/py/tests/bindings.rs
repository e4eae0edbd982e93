use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;
use pyo3::types::PyDict;
use segcn::segcn;

use segcn_core::data::{write_bundle, FeatureEncoding, GraphBundle, SplitSpec};
use segcn_core::graph::UndirectedGraph;
use segcn_core::numerics::CsrMatrix;

fn interpreter() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(segcn);
        Python::initialize();
    });
}

/// Runs `code` with `segcn` imported and `extra` bound as globals.
fn run(code: &str, extra: &[(&str, String)]) {
    interpreter();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals
            .set_item("segcn", py.import("segcn").unwrap())
            .unwrap();
        for (k, v) in extra {
            globals.set_item(k, v).unwrap();
        }
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

/// Two cliques of six joined by one edge, one feature per class.
fn two_cliques() -> GraphBundle {
    let mut edges = vec![(5, 6)];
    for block in [0, 6] {
        for u in 0..6 {
            for v in u + 1..6 {
                edges.push((block + u, block + v));
            }
        }
    }
    let features = CsrMatrix::from_parts(
        12,
        2,
        (0..=12).collect(),
        (0..12).map(|i| i / 6).collect(),
        vec![1.0; 12],
    )
    .unwrap();
    GraphBundle {
        name: "cliques".into(),
        features,
        feature_encoding: FeatureEncoding::Sparse,
        labels: (0..12).map(|i| i / 6).collect(),
        num_classes: 2,
        graph: UndirectedGraph::from_edges(12, edges).unwrap(),
        fixed_split: SplitSpec {
            train: vec![0, 6],
            val: vec![1, 7],
            test: vec![2, 3, 4, 8, 9, 10],
        },
    }
}

#[test]
fn graph_helpers() {
    run(
        r#"
entries = segcn.normalize_adjacency(2, [(0, 1)])
assert [(i, j) for i, j, _ in sorted(entries)] == [(0, 0), (0, 1), (1, 0), (1, 1)]
assert all(abs(v - 0.5) < 1e-15 for _, _, v in entries)
g = segcn.Graph(4, [(0, 1), (1, 2), (2, 3)])
assert g.num_edges == 3 and g.degree(1) == 2
p = g.perturbed(1.0, 7)
assert set(p.edges()) <= set(g.edges())
assert all(p.degree(i) > 0 for i in range(4))
assert p.edges() == g.perturbed(1.0, 7).edges()
try:
    segcn.Graph(2, [(0, 0)])
    raise AssertionError("self-loop accepted")
except ValueError:
    pass
"#,
        &[],
    );
}

#[test]
fn config_layers() {
    run(
        r#"
c = segcn.Config("segcn", overrides=["schedules.total_epochs=300", "seed=4"])
d = c.to_dict()
assert d["schedules"]["total_epochs"] == 300 and c.seed == 4 and c.mode == "segcn"
c2 = c.with_overrides(["schedules.lambda_max=1.0"]).with_seed(9)
assert c2.to_dict()["schedules"]["lambda_max"] == 1.0
assert c2.to_dict()["schedules"]["total_epochs"] == 300 and c2.seed == 9
b = segcn.Config("baseline", toml="seed = 3\n")
assert b.mode == "baseline" and b.seed == 3
for bad in (lambda: segcn.Config("gat"), lambda: segcn.Config(overrides=["nope=1"])):
    try:
        bad()
        raise AssertionError("bad config accepted")
    except ValueError:
        pass
"#,
        &[],
    );
}

#[test]
fn train_evaluate_and_save() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cliques.segb");
    write_bundle(&two_cliques(), &path).unwrap();
    run(
        r#"
import os
bundle = segcn.Bundle.load(path)
assert (bundle.num_nodes, bundle.num_edges, bundle.num_classes) == (12, 31, 2)
assert segcn.Bundle.from_bytes(bundle.to_bytes()).labels == bundle.labels
config = segcn.Config(overrides=[
    "schedules.total_epochs=40", "schedules.ramp_length=10",
    "schedules.self_training_start=20", "row_normalize=false"])
seen = []
run = segcn.train(config, bundle, on_epoch=seen.append)
assert len(seen) == 40 and seen == run.records()
assert seen[0]["epoch"] == 0 and "teacher_val_acc" in seen[0]
quiet = segcn.train(config, bundle)
assert quiet.records() == run.records()
teacher = run.teacher
assert teacher.shape == (2, 16, 2) and teacher.epoch == run.best_epoch
assert abs(teacher.evaluate(bundle, "test", config) - run.test_accuracy) < 1e-12
probs = teacher.predict(bundle, row_normalize=False)
assert len(probs) == 12 and all(abs(sum(r) - 1) < 1e-9 for r in probs)
assert len(teacher.embeddings(bundle, 1, False)[0]) == 16
run.save(os.path.join(out, "run"))
again = segcn.Params.load(os.path.join(out, "run", "teacher.json"))
assert again.theta0 == teacher.theta0 and again.theta1 == teacher.theta1

def stop(record):
    raise RuntimeError("stop")
try:
    segcn.train(config, bundle, on_epoch=stop)
    raise AssertionError("callback error swallowed")
except RuntimeError:
    pass
try:
    segcn.Bundle.load(os.path.join(out, "missing.segb"))
    raise AssertionError("missing file accepted")
except OSError:
    pass
"#,
        &[
            ("path", path.to_str().unwrap().to_string()),
            ("out", dir.path().to_str().unwrap().to_string()),
        ],
    );
}
