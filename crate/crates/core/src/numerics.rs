//! Dense and sparse kernels used by the GCN: sparse-dense products, row
//! softmax, ReLU, inverted dropout and Glorot initialization.
//!
//! Everything is `f64` and row-major. Kernels are single-threaded and
//! deterministic for a given input and random stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream used throughout the crate.
pub type SeededRng = ChaCha8Rng;

/// Derives an independent stream from a global seed and a stream tag.
///
/// Distinct tags give streams that do not share state, so e.g. changing the
/// perturbation seed never shifts the draws used for initialization.
pub fn stream_rng(seed: u64, tag: u64) -> SeededRng {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    SeededRng::seed_from_u64(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_vec",
                format!("{} values", rows * cols),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("DenseMatrix::from_rows", cols, row.len()));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &DenseMatrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// Index of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Compressed sparse row matrix. Column indices are sorted within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return Err(Error::Malformed(format!(
                "csr offsets must have {} entries starting at 0",
                rows + 1
            )));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Malformed("csr offsets are not monotone".into()));
        }
        let nnz = offsets[rows];
        if indices.len() != nnz || values.len() != nnz {
            return Err(Error::Malformed(format!(
                "csr holds {nnz} entries but {} indices and {} values",
                indices.len(),
                values.len()
            )));
        }
        for r in 0..rows {
            let row = &indices[offsets[r]..offsets[r + 1]];
            if row.iter().any(|&c| c >= cols) {
                return Err(Error::Malformed(format!(
                    "column index out of range in row {r}"
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Malformed(format!(
                    "columns of row {r} not strictly increasing"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut offsets = Vec::with_capacity(dense.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for i in 0..dense.rows() {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows: dense.rows(),
            cols: dense.cols(),
            offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.iter() {
            out.set(i, j, v);
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern, new stored values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.nnz());
        Self {
            rows: self.rows,
            cols: self.cols,
            offsets: self.offsets.clone(),
            indices: self.indices.clone(),
            values,
        }
    }

    #[inline]
    pub fn row(&self, row: usize) -> (&[usize], &[f64]) {
        let range = self.offsets[row]..self.offsets[row + 1];
        (&self.indices[range.clone()], &self.values[range])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (cols, vals) = self.row(row);
        cols.binary_search(&col).map_or(0.0, |k| vals[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }
}

#[inline(always)]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    let n = out.len().min(x.len());
    let (out, x) = (&mut out[..n], &x[..n]);
    let mut out_chunks = out.chunks_exact_mut(4);
    let mut x_chunks = x.chunks_exact(4);
    for (o, v) in (&mut out_chunks).zip(&mut x_chunks) {
        o[0] += alpha * v[0];
        o[1] += alpha * v[1];
        o[2] += alpha * v[2];
        o[3] += alpha * v[3];
    }
    for (o, &v) in out_chunks
        .into_remainder()
        .iter_mut()
        .zip(x_chunks.remainder())
    {
        *o += alpha * v;
    }
}

/// Sparse-dense product `a * x`.
pub fn spmm(a: &CsrMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    spmm_with_values(a, a.values(), x)
}

/// `a * x` where `a`'s stored values are replaced by `values` (same pattern).
pub fn spmm_with_values(a: &CsrMatrix, values: &[f64], x: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != x.rows() {
        return Err(Error::shape(
            "spmm",
            format!("{} rows in dense operand", a.cols()),
            x.rows(),
        ));
    }
    if values.len() != a.nnz() {
        return Err(Error::shape("spmm values", a.nnz(), values.len()));
    }
    let width = x.cols();
    let mut out = DenseMatrix::zeros(a.rows(), width);
    match width {
        16 => spmm_rows::<16>(a, values, &x.values, &mut out.values),
        32 => spmm_rows::<32>(a, values, &x.values, &mut out.values),
        0 => {}
        _ => {
            for (i, dst) in out.values.chunks_exact_mut(width).enumerate() {
                let range = a.offsets[i]..a.offsets[i + 1];
                for (&j, &v) in a.indices[range.clone()].iter().zip(&values[range]) {
                    axpy(dst, v, &x.values[j * width..(j + 1) * width]);
                }
            }
        }
    }
    Ok(out)
}

fn spmm_rows<const W: usize>(a: &CsrMatrix, values: &[f64], x: &[f64], out: &mut [f64]) {
    let x_rows: &[[f64; W]] = as_fixed_rows(x);
    for (i, dst) in out.chunks_exact_mut(W).enumerate() {
        let dst: &mut [f64; W] = dst.try_into().expect("chunk has width W");
        let range = a.offsets[i]..a.offsets[i + 1];
        for (&j, &v) in a.indices[range.clone()].iter().zip(&values[range]) {
            let src = &x_rows[j];
            for k in 0..W {
                dst[k] += v * src[k];
            }
        }
    }
}

fn as_fixed_rows<const W: usize>(x: &[f64]) -> &[[f64; W]] {
    let (rows, rest) = x.as_chunks::<W>();
    debug_assert!(rest.is_empty());
    rows
}

/// `a^T * x` without materializing the transpose.
pub fn spmm_transposed(a: &CsrMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    spmm_transposed_with_values(a, a.values(), x)
}

pub fn spmm_transposed_with_values(
    a: &CsrMatrix,
    values: &[f64],
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    if a.rows() != x.rows() {
        return Err(Error::shape(
            "spmm_transposed",
            format!("{} rows in dense operand", a.rows()),
            x.rows(),
        ));
    }
    if values.len() != a.nnz() {
        return Err(Error::shape(
            "spmm_transposed values",
            a.nnz(),
            values.len(),
        ));
    }
    let width = x.cols();
    let mut out = DenseMatrix::zeros(a.cols(), width);
    if width == 16 {
        let (dst_rows, _) = out.values.as_chunks_mut::<16>();
        for (i, src) in as_fixed_rows::<16>(&x.values).iter().enumerate() {
            let range = a.offsets[i]..a.offsets[i + 1];
            for (&j, &v) in a.indices[range.clone()].iter().zip(&values[range]) {
                let dst = &mut dst_rows[j];
                for k in 0..16 {
                    dst[k] += v * src[k];
                }
            }
        }
        return Ok(out);
    }
    for i in 0..a.rows() {
        let range = a.offsets[i]..a.offsets[i + 1];
        let src = x.row(i);
        for (&j, &v) in a.indices[range.clone()].iter().zip(&values[range]) {
            axpy(&mut out.values[j * width..(j + 1) * width], v, src);
        }
    }
    Ok(out)
}

/// Dense product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.cols(), b.rows()));
    }
    let width = b.cols();
    let mut out = DenseMatrix::zeros(a.rows(), width);
    for i in 0..a.rows() {
        let dst = &mut out.values[i * width..(i + 1) * width];
        for (k, &v) in a.row(i).iter().enumerate() {
            axpy(dst, v, b.row(k));
        }
    }
    Ok(out)
}

/// `a^T * b`.
pub fn matmul_transposed_lhs(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_transposed_lhs", a.rows(), b.rows()));
    }
    let width = b.cols();
    let mut out = DenseMatrix::zeros(a.cols(), width);
    for i in 0..a.rows() {
        let src = b.row(i);
        for (k, &v) in a.row(i).iter().enumerate() {
            axpy(&mut out.values[k * width..(k + 1) * width], v, src);
        }
    }
    Ok(out)
}

/// `a * b^T`.
pub fn matmul_transposed_rhs(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_transposed_rhs", a.cols(), b.cols()));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let lhs = a.row(i);
        for j in 0..b.rows() {
            out.values[i * b.rows() + j] = lhs.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Keep flags for one inverted-dropout draw.
///
/// The mask covers the stored entries of the matrix it was drawn for: every
/// cell of a dense matrix, or the stored values of a sparse one.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    keep_prob: f64,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        let keep_prob = 1.0 - rate;
        let keep = if rate == 0.0 {
            vec![true; len]
        } else {
            // P(u < threshold) = keep_prob to within 2^-32 for uniform u32 draws.
            let threshold = (keep_prob * 4_294_967_296.0).round() as u64;
            (0..len)
                .map(|_| u64::from(rng.next_u32()) < threshold)
                .collect()
        };
        Ok(Self { keep, keep_prob })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Masked and rescaled copy of a flat value array.
    pub fn apply_values(&self, values: &[f64]) -> Vec<f64> {
        let scale = 1.0 / self.keep_prob;
        values
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| v * (f64::from(u8::from(k)) * scale))
            .collect()
    }

    /// Replays the mask on a dense matrix of matching shape.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.values().len() != self.len() {
            return Err(Error::shape(
                "DropoutMask::apply",
                self.len(),
                x.values().len(),
            ));
        }
        DenseMatrix::from_vec(x.rows(), x.cols(), self.apply_values(x.values()))
    }

    /// Replays the mask on the stored values of a sparse matrix.
    pub fn apply_sparse(&self, x: &CsrMatrix) -> Result<CsrMatrix> {
        if x.nnz() != self.len() {
            return Err(Error::shape(
                "DropoutMask::apply_sparse",
                self.len(),
                x.nnz(),
            ));
        }
        Ok(x.with_values(self.apply_values(x.values())))
    }

    /// Like [`apply_sparse`](Self::apply_sparse), but dropped entries are
    /// removed from the pattern instead of stored as zeros.
    pub fn compact_sparse(&self, x: &CsrMatrix) -> Result<CsrMatrix> {
        if x.nnz() != self.len() {
            return Err(Error::shape(
                "DropoutMask::compact_sparse",
                self.len(),
                x.nnz(),
            ));
        }
        let scale = 1.0 / self.keep_prob;
        let mut offsets = Vec::with_capacity(x.rows() + 1);
        let mut indices = vec![0; x.nnz()];
        let mut values = vec![0.0; x.nnz()];
        let mut written = 0;
        offsets.push(0);
        for i in 0..x.rows() {
            for k in x.offsets[i]..x.offsets[i + 1] {
                // unconditional store; the cursor only advances past kept entries
                indices[written] = x.indices[k];
                values[written] = x.values[k] * scale;
                written += usize::from(self.keep[k]);
            }
            offsets.push(written);
        }
        indices.truncate(written);
        values.truncate(written);
        Ok(CsrMatrix {
            rows: x.rows,
            cols: x.cols,
            offsets,
            indices,
            values,
        })
    }
}

/// Inverted dropout: zero each entry with probability `rate`, scale survivors
/// by `1 / (1 - rate)`.
pub fn apply_dropout<R: Rng + ?Sized>(
    x: &DenseMatrix,
    rate: f64,
    rng: &mut R,
) -> Result<(DenseMatrix, DropoutMask)> {
    let mask = DropoutMask::sample(x.values().len(), rate, rng)?;
    let out = mask.apply(x)?;
    Ok((out, mask))
}

/// Inverted dropout over the stored entries of a sparse matrix. Structural
/// zeros stay zero either way, so this matches dense dropout in distribution.
pub fn apply_dropout_sparse<R: Rng + ?Sized>(
    x: &CsrMatrix,
    rate: f64,
    rng: &mut R,
) -> Result<(CsrMatrix, DropoutMask)> {
    let mask = DropoutMask::sample(x.nnz(), rate, rng)?;
    let out = mask.apply_sparse(x)?;
    Ok((out, mask))
}

/// Glorot-uniform draw on `[-s, s]` with `s = sqrt(6 / (rows + cols))`.
pub fn glorot_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DenseMatrix { rows, cols, values }
}
