//! Compressed-row sparse matrices and a sparse LDL' factorisation.

use nalgebra::{DMatrix, DVector};

use crate::error::{GlmmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrixCRS {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrixCRS {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// entries with `|value| <= drop_tol` are left out.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
        drop_tol: f64,
    ) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut m = Self::zeros(nrows, ncols);
        let mut iter = triplets.into_iter().peekable();
        let mut counts = vec![0usize; nrows];
        while let Some((r, c, mut v)) = iter.next() {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v.abs() > drop_tol || v.is_nan() {
                m.col_idx.push(c);
                m.values.push(v);
                counts[r] += 1;
            }
        }
        for r in 0..nrows {
            m.row_ptr[r + 1] = m.row_ptr[r] + counts[r];
        }
        m
    }

    pub fn from_dense(a: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                t.push((i, j, a[(i, j)]));
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), t, drop_tol)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[(i, j)] = v;
            }
        }
        a
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let k = next[j];
                col_idx[k] = i;
                values[k] = v;
                next[j] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    /// `self * x` for a dense right-hand side.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                for c in 0..x.ncols() {
                    out[(i, c)] += v * x[(j, c)];
                }
            }
        }
        out
    }

    /// Sparse product `self * other`.
    pub fn mul(&self, other: &SparseMatrixCRS) -> SparseMatrixCRS {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut out = Self::zeros(self.nrows, other.ncols);
        let mut pattern = Vec::new();
        for i in 0..self.nrows {
            pattern.clear();
            let (cols, vals) = self.row(i);
            for (&k, &a) in cols.iter().zip(vals) {
                let (c2, v2) = other.row(k);
                for (&j, &b) in c2.iter().zip(v2) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        pattern.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                if acc[j] != 0.0 {
                    out.col_idx.push(j);
                    out.values.push(acc[j]);
                }
            }
            out.row_ptr[i + 1] = out.col_idx.len();
        }
        out
    }

    /// Checks the structural invariants of the storage format.
    pub fn is_well_formed(&self) -> bool {
        self.row_ptr.len() == self.nrows + 1
            && self.row_ptr[0] == 0
            && *self.row_ptr.last().unwrap() == self.nnz()
            && (0..self.nrows).all(|i| {
                let (cols, vals) = self.row(i);
                cols.windows(2).all(|w| w[0] < w[1])
                    && cols.iter().all(|&c| c < self.ncols)
                    && vals.iter().all(|&v| v != 0.0)
            })
    }
}

/// Solves `L x = b` in place for lower-triangular `L` in CRS form with the
/// diagonal stored last in each row.
pub fn forward_solve(l: &SparseMatrixCRS, b: &mut [f64]) {
    for i in 0..l.nrows {
        let (cols, vals) = l.row(i);
        let (last, rest) = cols.split_last().expect("non-empty row in factor");
        debug_assert_eq!(*last, i);
        let mut s = b[i];
        for (&j, &v) in rest.iter().zip(vals) {
            s -= v * b[j];
        }
        b[i] = s / vals[vals.len() - 1];
    }
}

/// Solves `L' x = b` in place.
pub fn backward_solve(l: &SparseMatrixCRS, b: &mut [f64]) {
    for i in (0..l.nrows).rev() {
        let (cols, vals) = l.row(i);
        let d = vals[vals.len() - 1];
        b[i] /= d;
        let xi = b[i];
        for (&j, &v) in cols[..cols.len() - 1].iter().zip(vals) {
            b[j] -= v * xi;
        }
    }
}

/// Sparse up-looking LDL' factorisation of a symmetric matrix using its
/// elimination tree. Returns the Cholesky factor `L D^{1/2}` in CRS form.
///
/// `pivot_tol` is relative to the largest diagonal entry of `a`. On failure
/// the index of the offending column is returned with the pivot value.
pub fn sparse_cholesky(
    a: &SparseMatrixCRS,
    pivot_tol: f64,
) -> std::result::Result<SparseMatrixCRS, (usize, f64)> {
    let n = a.nrows;
    assert_eq!(n, a.ncols);
    // Row k of the lower triangle equals column k of the upper triangle.
    let max_diag = (0..n).map(|k| a.get(k, k)).fold(0.0f64, f64::max);
    let tol = pivot_tol * max_diag;

    const NONE: usize = usize::MAX;
    let mut parent = vec![NONE; n];
    let mut flag = vec![NONE; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        flag[k] = k;
        let (cols, _) = a.row(k);
        for &c in cols {
            let mut i = c;
            if i >= k {
                continue;
            }
            while flag[i] != k {
                if parent[i] == NONE {
                    parent[i] = k;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i];
            }
        }
    }
    let mut lp = vec![0usize; n + 1];
    for k in 0..n {
        lp[k + 1] = lp[k] + lnz[k];
    }
    let mut li = vec![0usize; lp[n]];
    let mut lx = vec![0.0; lp[n]];
    let mut d = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut pattern = vec![0usize; n];
    lnz.iter_mut().for_each(|x| *x = 0);
    flag.iter_mut().for_each(|x| *x = NONE);

    for k in 0..n {
        y[k] = 0.0;
        let mut top = n;
        flag[k] = k;
        let (cols, vals) = a.row(k);
        for (&c, &v) in cols.iter().zip(vals) {
            if c > k {
                continue;
            }
            let mut i = c;
            y[i] += v;
            let mut len = 0;
            while flag[i] != k {
                pattern[len] = i;
                len += 1;
                flag[i] = k;
                i = parent[i];
            }
            while len > 0 {
                top -= 1;
                len -= 1;
                pattern[top] = pattern[len];
            }
        }
        d[k] = y[k];
        y[k] = 0.0;
        while top < n {
            let i = pattern[top];
            let yi = y[i];
            y[i] = 0.0;
            let p2 = lp[i] + lnz[i];
            for p in lp[i]..p2 {
                y[li[p]] -= lx[p] * yi;
            }
            let l_ki = yi / d[i];
            d[k] -= l_ki * yi;
            li[p2] = k;
            lx[p2] = l_ki;
            lnz[i] += 1;
            top += 1;
        }
        if !(d[k] > tol) {
            return Err((k, d[k]));
        }
    }

    // Column-compressed unit L to row-compressed L D^{1/2}.
    let sd: Vec<f64> = d.iter().map(|x| x.sqrt()).collect();
    let mut t = Vec::with_capacity(lp[n] + n);
    for j in 0..n {
        for p in lp[j]..lp[j + 1] {
            t.push((li[p], j, lx[p] * sd[j]));
        }
        t.push((j, j, sd[j]));
    }
    Ok(SparseMatrixCRS::from_triplets(n, n, t, 0.0))
}

/// Dense Cholesky-Banachiewicz factorisation, row by row.
pub fn dense_cholesky(a: &DMatrix<f64>, pivot_tol: f64) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = a.nrows();
    let max_diag = (0..n).map(|k| a[(k, k)]).fold(0.0f64, f64::max);
    let tol = pivot_tol * max_diag;
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > tol) {
                    return Err((i, s));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Dense SPD inverse through Cholesky, reporting a failure as singular.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a.clone().cholesky().ok_or_else(|| GlmmError::Singular {
        msg: "matrix is not positive definite".into(),
        columns: Vec::new(),
    })?;
    Ok(chol.inverse())
}
