//! Minimal CSC sparse matrix with the handful of operations the assembly,
//! reduction and filtering code needs. Factorizations are delegated to faer.

use std::collections::BTreeMap;
use std::ops::Range;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed-sparse-column matrix over f64.
#[derive(Debug, Clone, PartialEq)]
pub struct SpMat {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    val: Vec<f64>,
}

impl SpMat {
    /// Build from (row, col, value) triplets; duplicates are summed.
    /// Entry order in the result is canonical (column-major, rows ascending),
    /// so identical triplet multisets yield bit-identical matrices.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            *acc.entry((c, r)).or_insert(0.0) += v;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(acc.len());
        let mut val = Vec::with_capacity(acc.len());
        for (&(c, r), &v) in &acc {
            col_ptr[c + 1] += 1;
            row_idx.push(r);
            val.push(v);
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        SpMat { nrows, ncols, col_ptr, row_idx, val }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SpMat { nrows, ncols, col_ptr: vec![0; ncols + 1], row_idx: Vec::new(), val: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        Self::from_triplets(
            m.nrows(),
            m.ncols(),
            (0..m.ncols())
                .flat_map(|c| (0..m.nrows()).map(move |r| (r, c)))
                .filter_map(|(r, c)| {
                    let v = m[(r, c)];
                    (v != 0.0).then_some((r, c, v))
                }),
        )
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    /// Iterate stored entries as (row, col, value) in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |k| (self.row_idx[k], c, self.val[k]))
        })
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.iter().collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            out[(r, c)] += v;
        }
        out
    }

    pub fn transpose(&self) -> SpMat {
        SpMat::from_triplets(self.ncols, self.nrows, self.iter().map(|(r, c, v)| (c, r, v)))
    }

    pub fn scaled(&self, alpha: f64) -> SpMat {
        let mut out = self.clone();
        for v in &mut out.val {
            *v *= alpha;
        }
        out
    }

    /// alpha*self + beta*other.
    pub fn add_scaled(&self, alpha: f64, other: &SpMat, beta: f64) -> SpMat {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        SpMat::from_triplets(
            self.nrows,
            self.ncols,
            self.iter()
                .map(move |(r, c, v)| (r, c, alpha * v))
                .chain(other.iter().map(move |(r, c, v)| (r, c, beta * v))),
        )
    }

    /// Extract the sub-matrix with the given row/column ranges.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> SpMat {
        SpMat::from_triplets(
            rows.len(),
            cols.len(),
            self.iter()
                .filter(|&(r, c, _)| rows.contains(&r) && cols.contains(&c))
                .map(|(r, c, v)| (r - rows.start, c - cols.start, v)),
        )
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "spmv dimension mismatch");
        let mut y = DVector::zeros(self.nrows);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.val[k] * xc;
            }
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows, "spmv^T dimension mismatch");
        let mut y = DVector::zeros(self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.val[k] * x[self.row_idx[k]];
            }
            y[c] = acc;
        }
        y
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols, "spmm dimension mismatch");
        let mut y = DMatrix::zeros(self.nrows, x.ncols());
        for j in 0..x.ncols() {
            let xcol = x.column(j);
            let mut ycol = y.column_mut(j);
            for c in 0..self.ncols {
                let xc = xcol[c];
                if xc == 0.0 {
                    continue;
                }
                for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                    ycol[self.row_idx[k]] += self.val[k] * xc;
                }
            }
        }
        y
    }

    pub fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.nrows, "spmm^T dimension mismatch");
        let mut y = DMatrix::zeros(self.ncols, x.ncols());
        for j in 0..x.ncols() {
            let xcol = x.column(j);
            let mut ycol = y.column_mut(j);
            for c in 0..self.ncols {
                let mut acc = 0.0;
                for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                    acc += self.val[k] * xcol[self.row_idx[k]];
                }
                ycol[c] = acc;
            }
        }
        y
    }

    /// Max absolute entry.
    pub fn norm_max(&self) -> f64 {
        self.val.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_faer(&self) -> SparseColMat<usize, f64> {
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .expect("CSC construction cannot fail for in-bounds triplets")
    }
}

/// Sparse LU factorization (square matrices).
pub struct SpLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SpLu {
    pub fn factor(m: &SpMat) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "LU requires a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let fm = m.to_faer();
        let symbolic = SymbolicLu::try_new(fm.symbolic())
            .map_err(|e| Error::Singular(format!("symbolic LU failed: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic, fm.as_ref())
            .map_err(|e| Error::Singular(format!("numeric LU failed: {e:?}")))?;
        Ok(SpLu { n: m.nrows(), lu })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place_slice(x.as_mut_slice(), 1);
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let ncols = x.ncols();
        self.solve_in_place_slice(x.as_mut_slice(), ncols);
        x
    }

    pub fn solve_mat_in_place(&self, b: &mut DMatrix<f64>) {
        let ncols = b.ncols();
        self.solve_in_place_slice(b.as_mut_slice(), ncols);
    }

    fn solve_in_place_slice(&self, data: &mut [f64], ncols: usize) {
        assert_eq!(data.len(), self.n * ncols);
        let rhs = faer::MatMut::from_column_major_slice_mut(data, self.n, ncols);
        self.lu.solve_in_place(rhs);
    }
}

/// Check |x - y| <= tol entry-wise relative to the larger magnitude (test aid).
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
