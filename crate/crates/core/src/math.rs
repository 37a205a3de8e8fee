//! Numeric kernels: cosine logits, temperature softmax, entropy and marginals.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Row-norm tolerance enforced on in-memory embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Dense row-major matrix. Used for logits (N×C) and probabilities (N×C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type LogitMatrix<T> = Matrix<T>;
pub type ProbabilityMatrix<T> = Matrix<T>;

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Elementwise map. The result is not re-checked for finiteness.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

fn check_finite<T: Scalar>(data: &[T]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Matrix whose rows are unit-norm embeddings (image views or class texts).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingMatrix<T> {
    inner: Matrix<T>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Wraps `m`, requiring every row norm within [`UNIT_NORM_TOLERANCE`] of 1.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        Self::with_tolerance(m, UNIT_NORM_TOLERANCE)
    }

    pub fn with_tolerance(m: Matrix<T>, tolerance: f64) -> Result<Self> {
        for (row, r) in m.iter_rows().enumerate() {
            let norm = l2_norm(r).as_f64();
            if (norm - 1.0).abs() > tolerance {
                return Err(Error::NotUnitNorm { row, norm, tolerance });
            }
        }
        Ok(Self { inner: m })
    }

    /// Rescales every row to unit norm.
    pub fn normalized(mut m: Matrix<T>) -> Result<Self> {
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let norm = l2_norm(row);
            if norm <= T::zero() {
                return Err(Error::ZeroNorm(format!("row {i}")));
            }
            row.iter_mut().for_each(|x| *x = *x / norm);
        }
        Ok(Self { inner: m })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn dim(&self) -> usize {
        self.inner.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.inner.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.inner
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            inner: self.inner.select_rows(indices),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix {
            inner: self.inner.cast(),
        }
    }
}

/// Softmax temperature. `ZeroLimit` is the analytic τ→0⁺ limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Temperature<T> {
    Finite(T),
    ZeroLimit,
}

impl<T: Scalar> Temperature<T> {
    pub fn new(tau: T) -> Result<Self> {
        if tau.is_finite() && tau > T::zero() {
            Ok(Temperature::Finite(tau))
        } else {
            Err(Error::InvalidTemperature(tau.as_f64()))
        }
    }

    pub fn value(&self) -> Option<T> {
        match *self {
            Temperature::Finite(t) => Some(t),
            Temperature::ZeroLimit => None,
        }
    }

    fn validated(self) -> Result<Self> {
        match self {
            Temperature::Finite(t) => Temperature::new(t),
            Temperature::ZeroLimit => Ok(self),
        }
    }
}

/// Cosine-similarity logits between unit-norm image and text rows (N×C).
pub fn cosine_logits<T: Scalar>(
    image_embs: &EmbeddingMatrix<T>,
    text_embs: &EmbeddingMatrix<T>,
) -> Result<LogitMatrix<T>> {
    if image_embs.dim() != text_embs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} vs text dim {}",
            image_embs.dim(),
            text_embs.dim()
        )));
    }
    let (n, c) = (image_embs.rows(), text_embs.rows());
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        let img = image_embs.row(i);
        data.extend((0..c).map(|k| dot(img, text_embs.row(k))));
    }
    Matrix::new(n, c, data)
}

/// `softmax(logits / τ)`, stabilized by subtracting the row maximum.
///
/// `Temperature::ZeroLimit` dispatches to [`zero_temperature_limit`].
pub fn softmax_temperature<T: Scalar>(logits: &[T], tau: Temperature<T>) -> Result<Vec<T>> {
    check_finite(logits)?;
    match tau.validated()? {
        Temperature::Finite(t) => Ok(softmax_scaled(logits, t)),
        Temperature::ZeroLimit => zero_temperature_limit(logits),
    }
}

fn softmax_scaled<T: Scalar>(logits: &[T], tau: T) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b));
    let mut out: Vec<T> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p = *p / z);
    out
}

/// Row-wise [`softmax_temperature`].
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>, tau: Temperature<T>) -> Result<Matrix<T>> {
    let mut data = Vec::with_capacity(logits.rows() * logits.cols());
    for row in logits.iter_rows() {
        data.extend(softmax_temperature(row, tau)?);
    }
    Ok(Matrix {
        rows: logits.rows(),
        cols: logits.cols(),
        data,
    })
}

/// Exact τ→0⁺ limit of the softmax: uniform mass over the entries that tie
/// (bitwise) for the maximum, zero elsewhere.
pub fn zero_temperature_limit<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite(logits)?;
    let winners = argmax_set(logits);
    let share = T::one() / T::of_usize(winners.len().max(1));
    let mut out = vec![T::zero(); logits.len()];
    for w in winners {
        out[w] = share;
    }
    Ok(out)
}

/// The reference-code path: softmax with τ set to the type's machine epsilon.
pub fn machine_epsilon_limit<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite(logits)?;
    Ok(softmax_scaled(logits, T::epsilon()))
}

/// Indices whose value equals the maximum exactly, ascending.
pub fn argmax_set<T: Scalar>(values: &[T]) -> Vec<usize> {
    let Some(max) = values.iter().copied().reduce(|a, b| a.max(b)) else {
        return Vec::new();
    };
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(i, _)| i)
        .collect()
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    argmax_set(values).first().copied()
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    -p.iter().filter(|&&x| x > T::zero()).map(|&x| x * x.ln()).sum::<T>()
}

pub fn row_entropies<T: Scalar>(probs: &Matrix<T>) -> Vec<T> {
    probs.iter_rows().map(entropy).collect()
}

/// Mean of the masked rows of `probs`.
pub fn marginal_distribution<T: Scalar>(probs: &Matrix<T>, mask: &[bool]) -> Result<Vec<T>> {
    if mask.len() != probs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "mask length {} vs {} rows",
            mask.len(),
            probs.rows()
        )));
    }
    let mut acc = vec![T::zero(); probs.cols()];
    let mut count = 0usize;
    for (row, _) in probs.iter_rows().zip(mask).filter(|(_, &m)| m) {
        acc.iter_mut().zip(row).for_each(|(a, &p)| *a = *a + p);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = T::of_usize(count);
    acc.iter_mut().for_each(|a| *a = *a / n);
    Ok(acc)
}

/// Per class, the mean of the template embeddings re-normalized to unit norm.
pub fn ensemble_text_embeddings<T: Scalar>(per_template: &[EmbeddingMatrix<T>]) -> Result<EmbeddingMatrix<T>> {
    let first = per_template
        .first()
        .ok_or(Error::EmptyInput("no template embeddings"))?;
    let (c, d) = (first.rows(), first.dim());
    if let Some(bad) = per_template.iter().position(|m| m.rows() != c || m.dim() != d) {
        return Err(Error::DimensionMismatch(format!(
            "template {bad} is {}x{}, expected {c}x{d}",
            per_template[bad].rows(),
            per_template[bad].dim()
        )));
    }
    let mut mean: Matrix<T> = Matrix::zeros(c, d);
    for m in per_template {
        for (a, &x) in mean.data.iter_mut().zip(m.as_matrix().as_slice()) {
            *a = *a + x;
        }
    }
    let k = T::of_usize(per_template.len());
    mean.data.iter_mut().for_each(|a| *a = *a / k);
    for i in 0..c {
        // antipodal templates cancel; 1e-12 relative to a unit row is "zero"
        if l2_norm(mean.row(i)).as_f64() < 1e-12 {
            return Err(Error::ZeroNorm(format!("class {i} template mean")));
        }
    }
    EmbeddingMatrix::normalized(mean)
}
