use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::linalg::{pinv_sym, rank, RANK_TOL};
use crate::error::{Error, Result};

/// Outcome of a Wald chi-square test of `C gamma = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// `C Sigma C'` was singular and a pseudo-inverse was used; `df` is
    /// its rank rather than the rank of `C`.
    pub pseudo_inverse: bool,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: usize) -> f64 {
    if df == 0 || statistic <= 0.0 {
        return 1.0;
    }
    if !statistic.is_finite() {
        return 0.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df > 0");
    dist.sf(statistic).clamp(0.0, 1.0)
}

/// `W = (C g)' (C S C')^-1 (C g)` with `df = rank(C)`.
pub fn wald_quadratic_form(
    estimates: &DVector<f64>,
    contrast: &DMatrix<f64>,
    covariance: &DMatrix<f64>,
) -> Result<WaldTest> {
    let p = estimates.len();
    if contrast.ncols() != p || covariance.nrows() != p || covariance.ncols() != p {
        return Err(Error::Config(format!(
            "dimension mismatch: {} estimates, contrast {}x{}, covariance {}x{}",
            p,
            contrast.nrows(),
            contrast.ncols(),
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    if estimates.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite estimate or covariance".into()));
    }
    let diff = contrast * estimates;
    let middle = contrast * covariance * contrast.transpose();
    let df_c = rank(contrast);

    let mut pseudo = df_c < contrast.nrows();
    let (statistic, df) = match well_conditioned_inverse(&middle) {
        Some(inv) if !pseudo => ((diff.transpose() * inv * &diff)[(0, 0)], df_c),
        _ => {
            pseudo = true;
            let (inv, r) = pinv_sym(&middle);
            ((diff.transpose() * inv * &diff)[(0, 0)], r)
        }
    };
    let statistic = statistic.max(0.0);
    Ok(WaldTest {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
        pseudo_inverse: pseudo,
    })
}

fn well_conditioned_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= max * RANK_TOL {
        return None;
    }
    m.clone().cholesky().map(|c| c.inverse())
}

/// Contrast rows `e_0 - e_h` for `h = 1..n`, comparing every entry with the
/// first one.
pub fn reference_contrasts(n: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n.saturating_sub(1), n);
    for h in 1..n {
        c[(h - 1, 0)] = 1.0;
        c[(h - 1, h)] = -1.0;
    }
    c
}
