//! Dense vector kernels and the deterministic reduction primitive.
//!
//! Everything here is deliberately scalar and order-preserving: sums run
//! left-to-right in index order so that repeated runs (and the distributed
//! execution layer, which folds per-shard partials in shard order) produce
//! bit-identical results.

use crate::error::{Error, Result};

/// A fixed-length vector of finite 64-bit floats.
///
/// External inputs go through [`Vector::new`], which rejects NaN/infinity;
/// internally computed results use [`Vector::from_vec_unchecked`] since the
/// numeric routines check finiteness at their own boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector from external data, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Vector::new"));
        }
        Ok(Vector(values))
    }

    /// Wraps already-trusted values (results of our own arithmetic).
    pub fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Vector(values)
    }

    /// All-zero vector of the given length.
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Euclidean norm, accumulated in index order.
    pub fn norm(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    /// Returns `a * self` as a new vector.
    pub fn scale(&self, a: f64) -> Vector {
        Vector(self.0.iter().map(|v| a * v).collect())
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Inner product Σ uᵢvᵢ, accumulated left-to-right in index order.
pub fn dot(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "dot",
            expected: u.len(),
            actual: v.len(),
        });
    }
    Ok(dot_slices(u.as_slice(), v.as_slice()))
}

/// Slice-level inner product shared with the model's hot loops.
pub(crate) fn dot_slices(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0;
    for i in 0..u.len() {
        acc += u[i] * v[i];
    }
    acc
}

/// Returns `a·x + y` elementwise.
pub fn axpy(a: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "axpy",
            expected: x.len(),
            actual: y.len(),
        });
    }
    let out = x
        .iter()
        .zip(y.iter())
        .map(|(xi, yi)| a * xi + yi)
        .collect();
    Ok(Vector(out))
}

/// Sums an ordered list of equal-length vectors with a fixed association:
/// sum(parts) = sum(first half) + sum(second half), recursively, splitting
/// at the midpoint.
///
/// This is the single reduction primitive of the data-parallel layer, and
/// pinning the association (not just the order) buys two things. Results
/// are bit-stable run to run regardless of worker scheduling. And partial
/// sums over halves combine to exactly the bits the whole-range reduce
/// would produce, so when the list length is a power of two the same total
/// comes out however the list was cut into aligned contiguous blocks —
/// which is what keeps training trajectories identical across worker
/// counts.
pub fn deterministic_reduce(parts: &[Vector]) -> Result<Vector> {
    let first = parts
        .first()
        .ok_or(Error::EmptyInput("deterministic_reduce"))?;
    let len = first.len();
    for part in parts {
        if part.len() != len {
            return Err(Error::DimensionMismatch {
                context: "deterministic_reduce",
                expected: len,
                actual: part.len(),
            });
        }
    }
    Ok(reduce_vectors_tree(parts))
}

fn reduce_vectors_tree(parts: &[Vector]) -> Vector {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mid = parts.len() / 2;
    let mut left = reduce_vectors_tree(&parts[..mid]);
    let right = reduce_vectors_tree(&parts[mid..]);
    for (a, b) in left.0.iter_mut().zip(right.iter()) {
        *a += b;
    }
    left
}

/// Scalar twin of [`deterministic_reduce`]: midpoint-split tree sum over a
/// list of partial sums. Empty input sums to 0.
pub fn deterministic_sum(parts: &[f64]) -> f64 {
    match parts.len() {
        0 => 0.0,
        1 => parts[0],
        len => {
            let mid = len / 2;
            deterministic_sum(&parts[..mid]) + deterministic_sum(&parts[mid..])
        }
    }
}

/// How many canonical reduction chunks a position space of `len` samples
/// is carved into: the largest power of two ≤ 64 dividing `len` (so 1 for
/// odd lengths). Per-chunk partial sums combined by the tree reduce give
/// totals that do not depend on how whole chunks were grouped into
/// workers; 64 caps the bookkeeping while covering every worker count the
/// engine targets.
pub(crate) fn reduction_chunk_count(len: usize) -> usize {
    debug_assert!(len > 0);
    1 << len.trailing_zeros().min(6)
}

/// The canonical chunk grid over `[0, len)`: `reduction_chunk_count(len)`
/// equal, contiguous `(start, end)` ranges.
pub(crate) fn reduction_chunk_ranges(len: usize) -> Vec<(usize, usize)> {
    let chunk = len / reduction_chunk_count(len);
    (0..len / chunk).map(|i| (i * chunk, (i + 1) * chunk)).collect()
}

/// Row-major dense matrix; used for batch inputs and value targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from external row-major data, rejecting non-finite
    /// entries and length mismatches.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
