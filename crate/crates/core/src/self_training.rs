//! Pseudo-label selection for unlabeled nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NodeMask;
use crate::numerics::DenseMatrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub epoch: usize,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.classes.iter().copied())
    }

    /// Fraction of assigned classes that match `labels`; `None` when empty.
    pub fn precision(&self, labels: &[usize]) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let hits = self.iter().filter(|&(i, c)| labels[i] == c).count();
        Some(hits as f64 / self.len() as f64)
    }

    /// Add the entries of `other` for nodes not already present; existing
    /// assignments are kept.
    pub fn merge(&mut self, other: &PseudoLabelSet) {
        let mut present: std::collections::HashSet<usize> = self.indices.iter().copied().collect();
        for (i, c) in other.iter() {
            if present.insert(i) {
                self.indices.push(i);
                self.classes.push(c);
            }
        }
        let mut pairs: Vec<(usize, usize)> = self.iter().collect();
        pairs.sort_unstable();
        (self.indices, self.classes) = pairs.into_iter().unzip();
        self.epoch = other.epoch;
        self.threshold = other.threshold;
    }
}

/// Which models must be confident for a node to be selected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    #[default]
    DualAgreement,
    TeacherOnly,
}

fn peak(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// Nodes where student and teacher share the same argmax class and both
/// exceed `threshold` on it.
pub fn select_pseudo_labels(
    p_student: &DenseMatrix,
    p_teacher: &DenseMatrix,
    threshold: f64,
    eligible: &NodeMask,
) -> Result<PseudoLabelSet> {
    select_with_rule(
        Some(p_student),
        p_teacher,
        threshold,
        eligible,
        SelectionRule::DualAgreement,
    )
}

pub fn select_teacher_only(
    p_teacher: &DenseMatrix,
    threshold: f64,
    eligible: &NodeMask,
) -> Result<PseudoLabelSet> {
    select_with_rule(
        None,
        p_teacher,
        threshold,
        eligible,
        SelectionRule::TeacherOnly,
    )
}

pub fn select_with_rule(
    p_student: Option<&DenseMatrix>,
    p_teacher: &DenseMatrix,
    threshold: f64,
    eligible: &NodeMask,
    rule: SelectionRule,
) -> Result<PseudoLabelSet> {
    if eligible.len() != p_teacher.rows() {
        return Err(Error::shape(
            "pseudo-label mask",
            p_teacher.rows(),
            eligible.len(),
        ));
    }
    let student = match (rule, p_student) {
        (SelectionRule::DualAgreement, None) => {
            return Err(Error::InvalidArgument(
                "dual-agreement selection needs student probabilities".into(),
            ))
        }
        (SelectionRule::DualAgreement, Some(s)) => Some(s),
        (SelectionRule::TeacherOnly, _) => None,
    };
    if let Some(s) = student {
        if s.shape() != p_teacher.shape() {
            return Err(Error::shape(
                "select_pseudo_labels",
                format!("{:?}", p_teacher.shape()),
                format!("{:?}", s.shape()),
            ));
        }
    }
    let mut set = PseudoLabelSet {
        threshold,
        ..Default::default()
    };
    if p_teacher.cols() == 0 {
        return Ok(set);
    }
    for i in eligible.indices() {
        let (class, pt) = peak(p_teacher.row(i));
        if pt <= threshold {
            continue;
        }
        if let Some(s) = student {
            let (cs, ps) = peak(s.row(i));
            if cs != class || ps <= threshold {
                continue;
            }
        }
        set.indices.push(i);
        set.classes.push(class);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn agreement_above_threshold_selected() {
        let s = probs(&[vec![0.02, 0.03, 0.95]]);
        let t = probs(&[vec![0.04, 0.04, 0.92]]);
        let set = select_pseudo_labels(&s, &t, 0.9, &NodeMask::all(1)).unwrap();
        assert_eq!(set.indices, vec![0]);
        assert_eq!(set.classes, vec![2]);
    }

    #[test]
    fn class_disagreement_rejected() {
        let s = probs(&[vec![0.0, 0.95, 0.05]]);
        let t = probs(&[vec![0.0, 0.05, 0.95]]);
        let set = select_pseudo_labels(&s, &t, 0.9, &NodeMask::all(1)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn teacher_below_threshold_rejected() {
        let s = probs(&[vec![0.05, 0.0, 0.0, 0.95]]);
        let t = probs(&[vec![0.15, 0.0, 0.0, 0.85]]);
        assert!(select_pseudo_labels(&s, &t, 0.9, &NodeMask::all(1))
            .unwrap()
            .is_empty());
        assert_eq!(
            select_teacher_only(&t, 0.8, &NodeMask::all(1))
                .unwrap()
                .indices,
            vec![0]
        );
    }

    #[test]
    fn ineligible_nodes_skipped() {
        let p = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let set = select_pseudo_labels(&p, &p, 0.5, &NodeMask::from_indices(2, &[1])).unwrap();
        assert_eq!(set.indices, vec![1]);
        assert_eq!(set.precision(&[0, 1]), Some(1.0));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = probs(&[vec![0.5, 0.5]]);
        let b = probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(select_pseudo_labels(&a, &b, 0.9, &NodeMask::all(2)).is_err());
        assert!(select_pseudo_labels(&a, &a, 0.9, &NodeMask::all(2)).is_err());
    }

    #[test]
    fn merge_keeps_earlier_assignment() {
        let mut a = PseudoLabelSet {
            indices: vec![3],
            classes: vec![1],
            epoch: 1,
            threshold: 0.9,
        };
        let b = PseudoLabelSet {
            indices: vec![0, 3],
            classes: vec![2, 0],
            epoch: 2,
            threshold: 0.85,
        };
        a.merge(&b);
        assert_eq!(a.indices, vec![0, 3]);
        assert_eq!(a.classes, vec![2, 1]);
        assert_eq!(a.epoch, 2);
    }
}
