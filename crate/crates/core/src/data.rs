//! Graph bundles: the on-disk unit of a dataset, plus splits and feature
//! preprocessing.
//!
//! Bundle layout (little-endian throughout):
//!
//! ```text
//! magic        5 bytes   "SEGB1"
//! name         u16 length + UTF-8 bytes
//! N, F, C      u32 each
//! edges        u64       number of unordered pairs
//! adjacency    (N+1) x u64 offsets, 2*edges x u32 columns (sorted per row)
//! encoding     u8        0 = dense features, 1 = CSR features
//!   dense      N*F x f64 row-major
//!   csr        (N+1) x u64 offsets, nnz x u32 columns, nnz x f64 values
//! labels       N x u16
//! splits       train, validation, test: u64 length + u32 indices each
//! checksum     u32       CRC-32 (IEEE) of every preceding byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::UndirectedGraph;
use crate::numerics::CsrMatrix;

pub const BUNDLE_MAGIC: &[u8; 5] = b"SEGB1";
pub const VALIDATION_SIZE: usize = 500;
pub const TEST_SIZE: usize = 1000;
pub const TRAIN_PER_CLASS: usize = 20;

/// Expected shape of the public benchmarks: (name, nodes, unordered edges,
/// classes, feature dimension).
pub const KNOWN_DATASETS: [(&str, usize, usize, usize, usize); 3] = [
    ("citeseer", 3327, 4552, 6, 3703),
    ("cora", 2708, 5278, 7, 1433),
    ("pubmed", 19717, 44324, 3, 500),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureEncoding {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Indices must be in range and the three sets pairwise disjoint.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.train.len() + self.val.len() + self.test.len());
        for (name, set) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &i in set.iter() {
                if i >= num_nodes {
                    return Err(Error::Malformed(format!(
                        "{name} index {i} out of range for {num_nodes} nodes"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Malformed(format!(
                        "node {i} appears twice across splits"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mask(indices: &[usize], num_nodes: usize) -> Vec<bool> {
        let mut mask = vec![false; num_nodes];
        indices.iter().for_each(|&i| mask[i] = true);
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub name: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub num_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle {
    pub name: String,
    /// Raw (unnormalized) node features, `N x F`.
    pub features: CsrMatrix,
    pub feature_encoding: FeatureEncoding,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub graph: UndirectedGraph,
    pub fixed_split: SplitSpec,
}

impl GraphBundle {
    pub fn metadata(&self) -> BundleMetadata {
        BundleMetadata {
            name: self.name.clone(),
            num_nodes: self.graph.num_nodes(),
            num_edges: self.graph.num_edges(),
            num_classes: self.num_classes,
            num_features: self.features.cols(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Internal consistency: array sizes agree, labels in range, split valid.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(Error::shape(
                "GraphBundle features",
                n,
                self.features.rows(),
            ));
        }
        if self.labels.len() != n {
            return Err(Error::shape("GraphBundle labels", n, self.labels.len()));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return Err(Error::Malformed(format!(
                "invalid class count {}",
                self.num_classes
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.num_classes)
        {
            return Err(Error::Malformed(format!(
                "label {l} of node {i} outside [0, {})",
                self.num_classes
            )));
        }
        if self.features.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bundle features".into()));
        }
        self.fixed_split.validate(n)
    }

    /// Checks the shape of a named public benchmark against its known
    /// statistics. Unknown names pass.
    pub fn check_known_statistics(&self) -> Result<()> {
        let Some(&(name, nodes, edges, classes, features)) = KNOWN_DATASETS
            .iter()
            .find(|(name, ..)| name.eq_ignore_ascii_case(&self.name))
        else {
            return Ok(());
        };
        let meta = self.metadata();
        let mut diffs = Vec::new();
        for (what, want, got) in [
            ("nodes", nodes, meta.num_nodes),
            ("edges", edges, meta.num_edges),
            ("classes", classes, meta.num_classes),
            ("features", features, meta.num_features),
            (
                "validation size",
                VALIDATION_SIZE,
                self.fixed_split.val.len(),
            ),
            ("test size", TEST_SIZE, self.fixed_split.test.len()),
        ] {
            if want != got {
                diffs.push(format!("{what}: expected {want}, got {got}"));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Stats {
                dataset: name.to_string(),
                detail: diffs.join("; "),
            })
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = decode(bytes)?;
        bundle.validate()?;
        bundle.check_known_statistics()?;
        Ok(bundle)
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<GraphBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GraphBundle::from_bytes(&bytes)
}

pub fn write_bundle(bundle: &GraphBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidArgument(format!("{what} {value} exceeds u32")))
}

fn encode(bundle: &GraphBundle) -> Result<Vec<u8>> {
    let n = bundle.num_nodes();
    let f = bundle.features.cols();
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    let name = bundle.name.as_bytes();
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::InvalidArgument("bundle name longer than 65535 bytes".into()))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&to_u32(n, "node count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(f, "feature dimension")?.to_le_bytes());
    out.extend_from_slice(&to_u32(bundle.num_classes, "class count")?.to_le_bytes());
    out.extend_from_slice(&(bundle.graph.num_edges() as u64).to_le_bytes());

    for &o in bundle.graph.offsets() {
        out.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in bundle.graph.neighbor_array() {
        out.extend_from_slice(&to_u32(c, "node id")?.to_le_bytes());
    }

    match bundle.feature_encoding {
        FeatureEncoding::Dense => {
            out.push(0);
            let dense = bundle.features.to_dense();
            for &v in dense.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        FeatureEncoding::Sparse => {
            out.push(1);
            for &o in bundle.features.offsets() {
                out.extend_from_slice(&(o as u64).to_le_bytes());
            }
            for &c in bundle.features.indices() {
                out.extend_from_slice(&to_u32(c, "feature index")?.to_le_bytes());
            }
            for &v in bundle.features.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    for &l in &bundle.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for set in [
        &bundle.fixed_split.train,
        &bundle.fixed_split.val,
        &bundle.fixed_split.test,
    ] {
        out.extend_from_slice(&(set.len() as u64).to_le_bytes());
        for &i in set.iter() {
            out.extend_from_slice(&to_u32(i, "split index")?.to_le_bytes());
        }
    }
    let checksum = crc32fast::hash(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("truncated while reading {what}")))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // every counted element occupies at least one remaining byte
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("implausible {what} {v}")))
    }

    fn u64_array(&mut self, count: usize, what: &str) -> Result<Vec<usize>> {
        let raw = self.take(count.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }

    fn u32_array(&mut self, count: usize, what: &str) -> Result<Vec<usize>> {
        let raw = self.take(count.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }

    fn f64_array(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode(bytes: &[u8]) -> Result<GraphBundle> {
    if bytes.len() < BUNDLE_MAGIC.len() + 4 {
        return Err(Error::Malformed("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(5, "magic")? != BUNDLE_MAGIC {
        return Err(Error::Malformed("bad magic (expected SEGB1)".into()));
    }
    let name_len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "name")?)
        .map_err(|_| Error::Malformed("dataset name is not UTF-8".into()))?
        .to_string();
    let n = r.u32("node count")? as usize;
    let f = r.u32("feature dimension")? as usize;
    let c = r.u32("class count")? as usize;
    let edges = r.len("edge count")?;

    let adj_offsets = r.u64_array(n + 1, "adjacency offsets")?;
    let adj_len = *adj_offsets.last().unwrap();
    if adj_len != 2 * edges {
        return Err(Error::Stats {
            dataset: name,
            detail: format!("header declares {edges} edges but adjacency stores {adj_len} entries"),
        });
    }
    let adj_cols = r.u32_array(adj_len, "adjacency columns")?;
    let graph = UndirectedGraph::from_csr(n, adj_offsets, adj_cols)?;

    let (features, feature_encoding) = match r.u8("feature encoding")? {
        0 => {
            let values = r.f64_array(n.saturating_mul(f), "dense features")?;
            let mut offsets = Vec::with_capacity(n + 1);
            let mut indices = Vec::new();
            let mut kept = Vec::new();
            offsets.push(0);
            for row in values.chunks(f.max(1)).take(n) {
                for (j, &v) in row.iter().enumerate() {
                    // keep signed zeros so re-encoding is byte-identical
                    if v.to_bits() != 0 {
                        indices.push(j);
                        kept.push(v);
                    }
                }
                offsets.push(indices.len());
            }
            offsets.resize(n + 1, indices.len());
            (
                CsrMatrix::from_parts(n, f, offsets, indices, kept)?,
                FeatureEncoding::Dense,
            )
        }
        1 => {
            let offsets = r.u64_array(n + 1, "feature offsets")?;
            let nnz = *offsets.last().unwrap();
            let indices = r.u32_array(nnz, "feature columns")?;
            let values = r.f64_array(nnz, "feature values")?;
            (
                CsrMatrix::from_parts(n, f, offsets, indices, values)?,
                FeatureEncoding::Sparse,
            )
        }
        other => {
            return Err(Error::Malformed(format!(
                "unknown feature encoding {other}"
            )))
        }
    };

    let labels_raw = r.take(n * 2, "labels")?;
    let labels = labels_raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();

    let mut sets = Vec::with_capacity(3);
    for what in ["train indices", "validation indices", "test indices"] {
        let len = r.len(what)?;
        sets.push(r.u32_array(len, what)?);
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        )));
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();

    Ok(GraphBundle {
        name,
        features,
        feature_encoding,
        labels,
        num_classes: c,
        graph,
        fixed_split: SplitSpec { train, val, test },
    })
}

/// Scales each row to sum to one; all-zero rows stay zero.
pub fn row_normalize_features(x: &CsrMatrix) -> Result<CsrMatrix> {
    if x.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "row normalization expects non-negative features".into(),
        ));
    }
    let mut values = x.values().to_vec();
    for i in 0..x.rows() {
        let range = x.offsets()[i]..x.offsets()[i + 1];
        let sum: f64 = values[range.clone()].iter().sum();
        if sum > 0.0 {
            values[range].iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(x.with_values(values))
}

/// Uniform (unstratified) split with the fixed-split sizes: `20 * C` train,
/// 500 validation, 1000 test.
pub fn make_random_split<R: Rng + ?Sized>(bundle: &GraphBundle, rng: &mut R) -> Result<SplitSpec> {
    let n = bundle.num_nodes();
    let train_size = TRAIN_PER_CLASS * bundle.num_classes;
    let needed = train_size + VALIDATION_SIZE + TEST_SIZE;
    if n < needed {
        return Err(Error::InvalidArgument(format!(
            "random split needs {needed} nodes, bundle has {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitSpec {
        train: sorted(&order[..train_size]),
        val: sorted(&order[train_size..train_size + VALIDATION_SIZE]),
        test: sorted(&order[train_size + VALIDATION_SIZE..needed]),
    })
}

/// Draws 500 validation and 1000 test nodes uniformly, then exactly
/// `labels_per_class` training nodes of every class from what remains.
pub fn make_label_count_split<R: Rng + ?Sized>(
    bundle: &GraphBundle,
    labels_per_class: usize,
    rng: &mut R,
) -> Result<SplitSpec> {
    let n = bundle.num_nodes();
    let held_out = VALIDATION_SIZE + TEST_SIZE;
    if n < held_out {
        return Err(Error::InvalidArgument(format!(
            "label-count split needs at least {held_out} nodes, bundle has {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut val = order[..VALIDATION_SIZE].to_vec();
    let mut test = order[VALIDATION_SIZE..held_out].to_vec();

    let mut by_class = vec![Vec::new(); bundle.num_classes];
    for &i in &order[held_out..] {
        by_class[bundle.labels[i]].push(i);
    }
    let mut train = Vec::with_capacity(labels_per_class * bundle.num_classes);
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < labels_per_class {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} nodes outside validation/test, {labels_per_class} required",
                pool.len()
            )));
        }
        // pool is already in shuffled order
        train.extend_from_slice(&pool[..labels_per_class]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec { train, val, test })
}
