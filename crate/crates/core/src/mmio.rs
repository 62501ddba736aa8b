//! Matrix Market writers.

use std::fmt::Write;

use nalgebra::DMatrix;

use crate::sparse::SparseMatrixCRS;

fn num(x: f64) -> String {
    format!("{x:.17e}")
}

/// Coordinate format, one-based indices, entries in row-major order.
pub fn sparse_to_string(a: &SparseMatrixCRS) -> String {
    let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
    let _ = writeln!(s, "{} {} {}", a.nrows, a.ncols, a.nnz());
    for i in 0..a.nrows {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let _ = writeln!(s, "{} {} {}", i + 1, j + 1, num(v));
        }
    }
    s
}

/// Array format, column-major as the format requires.
pub fn dense_to_string(a: &DMatrix<f64>) -> String {
    let mut s = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(s, "{} {}", a.nrows(), a.ncols());
    for v in a.iter() {
        let _ = writeln!(s, "{}", num(*v));
    }
    s
}
