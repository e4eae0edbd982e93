//! Two-layer GCN: `softmax(A · relu(A · drop(X) · W0) · W1)` with a second
//! dropout on the hidden activations, and its hand-written backward pass.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::numerics::{
    glorot_init, matmul, matmul_transposed_lhs, matmul_transposed_rhs, relu, row_softmax, spmm,
    spmm_transposed, stream_rng, CsrMatrix, DenseMatrix, DropoutMask,
};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    /// `F x H`
    pub theta0: DenseMatrix,
    /// `H x C`
    pub theta1: DenseMatrix,
}

impl GcnParams {
    pub fn new(theta0: DenseMatrix, theta1: DenseMatrix) -> Result<Self> {
        if theta0.cols() != theta1.rows() {
            return Err(Error::shape("GcnParams", theta0.cols(), theta1.rows()));
        }
        Ok(Self { theta0, theta1 })
    }

    pub fn glorot<R: Rng + ?Sized>(
        features: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let theta0 = glorot_init(features, hidden, rng);
        let theta1 = glorot_init(hidden, classes, rng);
        Self { theta0, theta1 }
    }

    pub fn zeros(features: usize, hidden: usize, classes: usize) -> Self {
        Self {
            theta0: DenseMatrix::zeros(features, hidden),
            theta1: DenseMatrix::zeros(hidden, classes),
        }
    }

    pub fn num_features(&self) -> usize {
        self.theta0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.theta0.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.theta1.cols()
    }

    pub fn same_shape(&self, other: &GcnParams) -> bool {
        self.theta0.shape() == other.theta0.shape() && self.theta1.shape() == other.theta1.shape()
    }

    fn check(&self) -> Result<()> {
        if self.theta0.cols() != self.theta1.rows() {
            return Err(Error::shape(
                "GcnParams",
                self.theta0.cols(),
                self.theta1.rows(),
            ));
        }
        if self.theta0.values().len() != self.theta0.rows() * self.theta0.cols()
            || self.theta1.values().len() != self.theta1.rows() * self.theta1.cols()
        {
            return Err(Error::Malformed(
                "parameter value count disagrees with shape".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradParams {
    pub grad_theta0: DenseMatrix,
    pub grad_theta1: DenseMatrix,
}

impl GradParams {
    pub fn zeros_like(params: &GcnParams) -> Self {
        Self {
            grad_theta0: DenseMatrix::zeros(params.theta0.rows(), params.theta0.cols()),
            grad_theta1: DenseMatrix::zeros(params.theta1.rows(), params.theta1.cols()),
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &GradParams, factor: f64) -> Result<()> {
        self.grad_theta0.add_scaled(&other.grad_theta0, factor)?;
        self.grad_theta1.add_scaled(&other.grad_theta1, factor)
    }

    pub fn is_finite(&self) -> bool {
        self.grad_theta0.is_finite() && self.grad_theta1.is_finite()
    }
}

/// Everything backward needs to replay one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input_mask: Option<DropoutMask>,
    pub hidden_mask: Option<DropoutMask>,
    /// Surviving, rescaled feature entries after input dropout, when dropout
    /// was active.
    pub input_dropped: Option<CsrMatrix>,
    /// `A · drop(X) · W0`
    pub hidden_pre: DenseMatrix,
    /// `relu(hidden_pre)`
    pub hidden: DenseMatrix,
    /// `drop(hidden)`
    pub hidden_dropped: DenseMatrix,
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
}

fn check_inputs(params: &GcnParams, a_hat: &NormalizedAdjacency, x: &CsrMatrix) -> Result<()> {
    params.check()?;
    if a_hat.num_nodes() != x.rows() {
        return Err(Error::shape(
            "forward: adjacency vs features",
            a_hat.num_nodes(),
            x.rows(),
        ));
    }
    if x.cols() != params.num_features() {
        return Err(Error::shape(
            "forward: features vs theta0",
            params.num_features(),
            x.cols(),
        ));
    }
    Ok(())
}

/// Runs the network. Dropout at `dropout_rate` is applied to the input
/// features and to the hidden activations; a rate of zero draws nothing from
/// `rng`.
pub fn forward<R: Rng + ?Sized>(
    params: &GcnParams,
    a_hat: &NormalizedAdjacency,
    x: &CsrMatrix,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<(DenseMatrix, ForwardTrace)> {
    check_inputs(params, a_hat, x)?;
    let active = dropout_rate > 0.0;

    let (input_mask, input_dropped) = if active {
        let mask = DropoutMask::sample(x.nnz(), dropout_rate, rng)?;
        let dropped = mask.compact_sparse(x)?;
        (Some(mask), Some(dropped))
    } else {
        (None, None)
    };

    let xw = spmm(input_dropped.as_ref().unwrap_or(x), &params.theta0)?;
    let hidden_pre = spmm(a_hat.matrix(), &xw)?;
    let hidden = relu(&hidden_pre);
    let (hidden_dropped, hidden_mask) = if active {
        let mask = DropoutMask::sample(hidden.values().len(), dropout_rate, rng)?;
        (mask.apply(&hidden)?, Some(mask))
    } else {
        (hidden.clone(), None)
    };
    let hw = matmul(&hidden_dropped, &params.theta1)?;
    let logits = spmm(a_hat.matrix(), &hw)?;
    let probs = row_softmax(&logits);

    let trace = ForwardTrace {
        input_mask,
        hidden_mask,
        input_dropped,
        hidden_pre,
        hidden,
        hidden_dropped,
        logits,
        probs: probs.clone(),
    };
    Ok((probs, trace))
}

/// Dropout-free forward pass, returning only the probabilities.
pub fn predict(
    params: &GcnParams,
    a_hat: &NormalizedAdjacency,
    x: &CsrMatrix,
) -> Result<DenseMatrix> {
    let mut unused = stream_rng(0, 0);
    forward(params, a_hat, x, 0.0, &mut unused).map(|(probs, _)| probs)
}

/// Dropout-free probabilities for several parameter sets sharing one pass
/// over the features. Each result equals [`predict`] for that set exactly.
pub fn predict_many(
    params: &[&GcnParams],
    a_hat: &NormalizedAdjacency,
    x: &CsrMatrix,
) -> Result<Vec<DenseMatrix>> {
    for p in params {
        check_inputs(p, a_hat, x)?;
    }
    let widths: Vec<usize> = params.iter().map(|p| p.hidden()).collect();
    let total: usize = widths.iter().sum();
    let mut stacked = Vec::with_capacity(x.cols() * total);
    for row in 0..x.cols() {
        for p in params {
            stacked.extend_from_slice(p.theta0.row(row));
        }
    }
    let stacked = DenseMatrix::from_vec(x.cols(), total, stacked)?;
    let hidden_pre = spmm(a_hat.matrix(), &spmm(x, &stacked)?)?;

    let mut start = 0;
    let mut out = Vec::with_capacity(params.len());
    for (p, &w) in params.iter().zip(&widths) {
        let mut block = Vec::with_capacity(x.rows() * w);
        for i in 0..x.rows() {
            block.extend_from_slice(&hidden_pre.row(i)[start..start + w]);
        }
        start += w;
        let hidden = relu(&DenseMatrix::from_vec(x.rows(), w, block)?);
        let logits = spmm(a_hat.matrix(), &matmul(&hidden, &p.theta1)?)?;
        out.push(row_softmax(&logits));
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to both weight matrices, given the
/// loss gradient with respect to the logits of the traced forward call.
///
/// `a_hat` must be the operator used in that forward call. It is symmetric,
/// so it serves as its own transpose here.
pub fn backward(
    trace: &ForwardTrace,
    params: &GcnParams,
    a_hat: &NormalizedAdjacency,
    x: &CsrMatrix,
    grad_logits: &DenseMatrix,
) -> Result<GradParams> {
    check_inputs(params, a_hat, x)?;
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "backward: grad_logits",
            format!("{:?}", trace.logits.shape()),
            format!("{:?}", grad_logits.shape()),
        ));
    }
    if trace.hidden_pre.shape() != (x.rows(), params.hidden())
        || trace.logits.cols() != params.num_classes()
    {
        return Err(Error::shape(
            "backward: trace vs params",
            format!(
                "hidden {} / classes {}",
                params.hidden(),
                params.num_classes()
            ),
            format!(
                "{:?} / {:?}",
                trace.hidden_pre.shape(),
                trace.logits.shape()
            ),
        ));
    }

    let d_hw = spmm(a_hat.matrix(), grad_logits)?;
    let grad_theta1 = matmul_transposed_lhs(&trace.hidden_dropped, &d_hw)?;

    let d_hidden_dropped = matmul_transposed_rhs(&d_hw, &params.theta1)?;
    let mut d_hidden_pre = match &trace.hidden_mask {
        Some(mask) => mask.apply(&d_hidden_dropped)?,
        None => d_hidden_dropped,
    };
    for (g, &pre) in d_hidden_pre
        .values_mut()
        .iter_mut()
        .zip(trace.hidden_pre.values())
    {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }

    let d_xw = spmm(a_hat.matrix(), &d_hidden_pre)?;
    let x_used = trace.input_dropped.as_ref().unwrap_or(x);
    let grad_theta0 = spmm_transposed(x_used, &d_xw)?;

    Ok(GradParams {
        grad_theta0,
        grad_theta1,
    })
}

/// Hidden-layer activations `relu(A · X · W0)`, dropout off.
pub fn hidden_activations(
    params: &GcnParams,
    a_hat: &NormalizedAdjacency,
    x: &CsrMatrix,
) -> Result<DenseMatrix> {
    let mut unused = stream_rng(0, 0);
    forward(params, a_hat, x, 0.0, &mut unused).map(|(_, trace)| trace.hidden)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

/// Saved parameters plus the epoch and role they were captured at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub role: Role,
    pub epoch: usize,
    pub params: GcnParams,
}

pub const CHECKPOINT_FORMAT: &str = "segcn-checkpoint-v1";

impl Checkpoint {
    pub fn new(role: Role, epoch: usize, params: GcnParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            role,
            epoch,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Malformed(format!("cannot encode checkpoint: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed(format!(
                "unsupported checkpoint format {:?}",
                checkpoint.format
            )));
        }
        checkpoint.params.check()?;
        Ok(checkpoint)
    }
}
