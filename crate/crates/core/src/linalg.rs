//! Minimal dense row-major matrix used for trajectories, Jacobians, and the
//! small linear systems of the implicit-function-theorem path.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular matrix (pivot {pivot:.3e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(&'static str),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `A x = b` for each column of `b` by LU with partial pivoting.
/// `a` is consumed as the factorization workspace.
pub fn lu_solve(mut a: Mat, b: &Mat) -> Result<Mat, LinalgError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::Shape("lu_solve needs a square matrix"));
    }
    if b.rows() != n {
        return Err(LinalgError::Shape("rhs row count must match matrix order"));
    }
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = a[(perm[k], k)].abs();
        for r in k + 1..n {
            let v = a[(perm[r], k)].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best < 1e-300 {
            return Err(LinalgError::Singular { col: k, pivot: best });
        }
        perm.swap(k, p);
        let pk = perm[k];
        let pivot = a[(pk, k)];
        for r in k + 1..n {
            let pr = perm[r];
            let factor = a[(pr, k)] / pivot;
            a[(pr, k)] = factor;
            for c in k + 1..n {
                let v = a[(pk, c)];
                a[(pr, c)] -= factor * v;
            }
            for c in 0..x.cols() {
                let v = x[(pk, c)];
                x[(pr, c)] -= factor * v;
            }
        }
    }
    // back substitution in permuted order
    let mut out = Mat::zeros(n, x.cols());
    for c in 0..x.cols() {
        for k in (0..n).rev() {
            let pk = perm[k];
            let mut s = x[(pk, c)];
            for j in k + 1..n {
                s -= a[(pk, j)] * out[(j, c)];
            }
            out[(k, c)] = s / a[(pk, k)];
        }
    }
    Ok(out)
}

/// Infinity norm of a vector (max absolute entry, 0 when empty).
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
