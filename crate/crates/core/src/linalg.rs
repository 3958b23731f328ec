//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eig(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    let s = sym(a);
    s.symmetric_eigenvalues().min()
}

/// Largest eigenvalue magnitude of a symmetric matrix, i.e. its spectral norm.
pub fn sym_norm(a: &Mat) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)].abs();
    }
    sym(a).symmetric_eigenvalues().amax()
}

/// Spectral norm of a general matrix.
pub fn op_norm(a: &Mat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 && a.ncols() == 1 {
        return a[(0, 0)].abs();
    }
    a.clone().singular_values().max()
}

pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn asym_defect(a: &Mat) -> f64 {
    (a - a.transpose()).amax()
}

/// Inverse of a symmetric positive-definite matrix, or `None` when its
/// smallest eigenvalue does not exceed `guard`.
pub fn spd_inverse(a: &Mat, guard: f64) -> Option<(Mat, f64)> {
    let lo = min_eig(a);
    if !(lo > guard) {
        return None;
    }
    let chol = sym(a).cholesky()?;
    Some((chol.inverse(), lo))
}

/// Sup-norm (largest absolute entry).
pub fn sup(a: &Mat) -> f64 {
    a.amax()
}

pub fn to_mat(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn to_vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}
