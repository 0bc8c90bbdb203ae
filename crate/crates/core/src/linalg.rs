//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// nonincreasing order (columns of the returned matrix follow the same order).
pub(crate) fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Condition number of a symmetric positive (semi)definite matrix from its spectrum.
pub(crate) fn spd_condition(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let (vals, _) = sorted_symmetric_eigen(a);
    let max = vals[0];
    let min = vals[vals.len() - 1];
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Rows of `x` premultiplied by `B(alpha)`: `out_t = x_t - alpha * x_{t-1}`.
pub(crate) fn apply_b_rows(alpha: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for t in (1..x.nrows()).rev() {
        let next = x.row(t) - x.row(t - 1) * alpha;
        out.set_row(t, &next);
    }
    out
}

/// Rows of `x` premultiplied by the shift `J`: `out_t = x_{t-1}`, `out_1 = 0`.
pub(crate) fn apply_j_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for t in 1..x.nrows() {
        out.set_row(t, &x.row(t - 1));
    }
    out
}

/// `L(alpha) x` through the recursion `z_1 = 0`, `z_t = x_{t-1} + alpha z_{t-1}`.
pub(crate) fn apply_l_rows(alpha: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for t in 1..x.nrows() {
        let next = x.row(t - 1) + out.row(t - 1) * alpha;
        out.set_row(t, &next);
    }
    out
}

/// `B S B'` for a symmetric `S` using the bidiagonal structure of `B`.
pub(crate) fn b_sandwich(alpha: f64, s: &DMatrix<f64>) -> DMatrix<f64> {
    let bs = apply_b_rows(alpha, s);
    apply_b_rows(alpha, &bs.transpose()).transpose()
}

pub(crate) fn frobenius_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / scale
}
