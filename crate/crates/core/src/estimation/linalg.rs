use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for rank decisions.
pub(crate) const RANK_TOL: f64 = 1e-10;

/// Numerical rank from the singular values.
pub(crate) fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > max * RANK_TOL).count()
}

/// Moore-Penrose inverse of a symmetric PSD matrix, with its rank.
pub(crate) fn pinv_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, |a: f64, b| a.max(b.abs()));
    let mut out = DMatrix::zeros(n, n);
    let mut r = 0;
    if max == 0.0 {
        return (out, 0);
    }
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda > max * RANK_TOL {
            r += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    (out, r)
}

/// Inverse of a symmetric positive definite matrix. Falls back to the
/// pseudo-inverse when Cholesky fails; the flag reports the fallback.
pub(crate) fn inverse_spd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = m.clone().cholesky() {
        let inv = chol.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (symmetrize(inv), false);
        }
    }
    (symmetrize(pinv_sym(m).0), true)
}

/// Solves `m x = rhs` for symmetric `m`, adding a growing ridge until
/// Cholesky succeeds.
pub(crate) fn solve_spd_ridge(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = m.diagonal().iter().cloned().fold(0.0, |a: f64, b| a.max(b.abs())).max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut a = m.clone();
        if ridge > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += ridge;
            }
        }
        if let Some(chol) = a.cholesky() {
            let x = chol.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        ridge = if ridge == 0.0 { scale * 1e-10 } else { ridge * 100.0 };
    }
    None
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}
