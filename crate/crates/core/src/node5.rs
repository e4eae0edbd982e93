//! Node5: a 35-node toy graph of seven five-node class components cut out of
//! Cora.
//!
//! Local vertex 1 of each component is the only labeled node; vertex 5 sits
//! farthest from it, reachable through four distinct simple paths.

use crate::data::{GraphBundle, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::UndirectedGraph;
use crate::numerics::CsrMatrix;

pub const NODES_PER_CLASS: usize = 5;

/// Edges between local vertices `1..=5` of one class component.
pub const COMPONENT_EDGES: [(usize, usize); 6] = [(1, 2), (2, 3), (3, 4), (4, 5), (2, 4), (3, 5)];

/// Global id of local vertex `local` (1-based) in the component of `class`.
pub fn node_id(class: usize, local: usize) -> usize {
    class * NODES_PER_CLASS + local - 1
}

pub fn build_node5(source: &GraphBundle) -> Result<GraphBundle> {
    let classes = source.num_classes;
    let mut picked = Vec::with_capacity(classes * NODES_PER_CLASS);
    for class in 0..classes {
        let members: Vec<usize> = (0..source.num_nodes())
            .filter(|&i| source.labels[i] == class)
            .take(NODES_PER_CLASS)
            .collect();
        if members.len() < NODES_PER_CLASS {
            return Err(Error::InvalidArgument(format!(
                "class {class} has only {} nodes, {NODES_PER_CLASS} required",
                members.len()
            )));
        }
        picked.extend(members);
    }

    let mut offsets = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for &src in &picked {
        let (cols, vals) = source.features.row(src);
        indices.extend_from_slice(cols);
        values.extend_from_slice(vals);
        offsets.push(indices.len());
    }
    let features = CsrMatrix::from_parts(
        picked.len(),
        source.features.cols(),
        offsets,
        indices,
        values,
    )?;

    let edges = (0..classes).flat_map(|class| {
        COMPONENT_EDGES
            .iter()
            .map(move |&(a, b)| (node_id(class, a), node_id(class, b)))
    });
    let graph = UndirectedGraph::from_edges(picked.len(), edges)?;

    let train: Vec<usize> = (0..classes).map(|c| node_id(c, 1)).collect();
    let test: Vec<usize> = (0..classes)
        .flat_map(|c| (2..=NODES_PER_CLASS).map(move |local| node_id(c, local)))
        .collect();

    let bundle = GraphBundle {
        name: "node5".into(),
        features,
        feature_encoding: source.feature_encoding,
        labels: picked.iter().map(|&i| source.labels[i]).collect(),
        num_classes: classes,
        graph,
        fixed_split: SplitSpec {
            train,
            val: Vec::new(),
            test,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}
