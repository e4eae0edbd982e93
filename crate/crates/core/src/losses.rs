//! Supervised cross-entropy, teacher-to-student KL consistency, and their
//! weighted sum. Each loss returns its value together with the gradient with
//! respect to the logits that produced the (student) probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-node membership flags for a loss term.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeMask(Vec<bool>);

impl NodeMask {
    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut mask = vec![false; len];
        indices.iter().for_each(|&i| mask[i] = true);
        Self(mask)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn contains(&self, node: usize) -> bool {
        self.0[node]
    }

    pub fn set(&mut self, node: usize, value: bool) {
        self.0[node] = value;
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl From<Vec<bool>> for NodeMask {
    fn from(value: Vec<bool>) -> Self {
        Self(value)
    }
}

/// How per-node terms are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn weight(self, count: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_mask(mask: &NodeMask, rows: usize, what: &'static str) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::shape(what, rows, mask.len()));
    }
    match mask.count() {
        0 => Err(Error::EmptyMask(what)),
        n => Ok(n),
    }
}

pub fn cross_entropy(
    probs: &DenseMatrix,
    labels: &[usize],
    mask: &NodeMask,
) -> Result<(f64, DenseMatrix)> {
    cross_entropy_with(probs, labels, mask, Reduction::Mean)
}

/// `-log p(label)` over masked nodes; the logit gradient is the usual
/// softmax/cross-entropy composite `probs - onehot`, scaled by the reduction.
pub fn cross_entropy_with(
    probs: &DenseMatrix,
    labels: &[usize],
    mask: &NodeMask,
    reduction: Reduction,
) -> Result<(f64, DenseMatrix)> {
    let count = check_mask(mask, probs.rows(), "cross-entropy mask")?;
    if labels.len() != probs.rows() {
        return Err(Error::shape(
            "cross-entropy labels",
            probs.rows(),
            labels.len(),
        ));
    }
    let weight = reduction.weight(count);
    let mut grad = DenseMatrix::zeros(probs.rows(), probs.cols());
    let mut total = 0.0;
    for i in mask.indices() {
        let label = labels[i];
        if label >= probs.cols() {
            return Err(Error::InvalidArgument(format!(
                "label {label} of node {i} outside [0, {})",
                probs.cols()
            )));
        }
        total -= probs.get(i, label).max(PROB_FLOOR).ln();
        let row = grad.row_mut(i);
        row.copy_from_slice(probs.row(i));
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g *= weight);
    }
    Ok((total * weight, grad))
}

pub fn kl_consistency(
    p_teacher: &DenseMatrix,
    p_student: &DenseMatrix,
    mask: &NodeMask,
) -> Result<(f64, DenseMatrix)> {
    kl_consistency_with(p_teacher, p_student, mask, Reduction::Mean)
}

/// `KL(teacher || student)` over masked nodes. The teacher is a constant: the
/// returned gradient is with respect to the student logits only,
/// `p_student - p_teacher` per row.
pub fn kl_consistency_with(
    p_teacher: &DenseMatrix,
    p_student: &DenseMatrix,
    mask: &NodeMask,
    reduction: Reduction,
) -> Result<(f64, DenseMatrix)> {
    if p_teacher.shape() != p_student.shape() {
        return Err(Error::shape(
            "kl_consistency",
            format!("{:?}", p_teacher.shape()),
            format!("{:?}", p_student.shape()),
        ));
    }
    let count = check_mask(mask, p_student.rows(), "consistency mask")?;
    let weight = reduction.weight(count);
    let mut grad = DenseMatrix::zeros(p_student.rows(), p_student.cols());
    let mut total = 0.0;
    for i in mask.indices() {
        let (t, s) = (p_teacher.row(i), p_student.row(i));
        for (&pt, &ps) in t.iter().zip(s) {
            if pt > 0.0 {
                total += pt * (pt.max(PROB_FLOOR).ln() - ps.max(PROB_FLOOR).ln());
            }
        }
        for ((g, &pt), &ps) in grad.row_mut(i).iter_mut().zip(t).zip(s) {
            *g = (ps - pt) * weight;
        }
    }
    Ok((total * weight, grad))
}

pub fn combine(sup: f64, unsup: f64, lambda: f64) -> LossReport {
    debug_assert!(lambda >= 0.0, "consistency weight must be non-negative");
    LossReport {
        sup_loss: sup,
        unsup_loss: unsup,
        lambda,
        total: sup + lambda * unsup,
    }
}
