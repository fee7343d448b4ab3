//! Maximum likelihood logistic regression by Newton-Raphson.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{inverse_spd, solve_spd_ridge};
use crate::error::{Error, Result};
use crate::irt::logistic;

/// Coefficients beyond this magnitude are treated as diverging.
const DIVERGENCE_BOUND: f64 = 30.0;
const MAX_ITER: usize = 100;

/// A fitted logistic GLM on an arbitrary design matrix.
#[derive(Clone, Debug)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    /// Inverse observed information.
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn loglik(design: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + exp(-|e|)) form keeps this finite for large |e|.
            let log1p = (-e.abs()).exp().ln_1p();
            let log_p = -(e.max(0.0) - e) - log1p; // log sigma(e)
            let log_q = -e.max(0.0) - log1p; // log(1 - sigma(e))
            if yi {
                log_p
            } else {
                log_q
            }
        })
        .sum()
}

/// Gradient `X'(y - p)` and information `X' W X` at `beta`.
fn score_and_information(
    design: &DMatrix<f64>,
    y: &[bool],
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = design.ncols();
    let eta = design * beta;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (i, &yi) in y.iter().enumerate() {
        let mu = logistic(eta[i]);
        let w = mu * (1.0 - mu);
        let resid = if yi { 1.0 - mu } else { -mu };
        let row = design.row(i);
        for j in 0..p {
            let xj = row[j];
            if xj == 0.0 {
                continue;
            }
            grad[j] += xj * resid;
            for k in j..p {
                info[(j, k)] += w * xj * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[(j, k)] = info[(k, j)];
        }
    }
    (grad, info)
}

/// Fits `P(y = 1) = 1 / (1 + exp(-X beta))`.
///
/// Divergent coefficients are reported as `Error::Separation` with group 0;
/// callers that fit per group rewrite the group index.
pub fn fit_logistic_design(design: &DMatrix<f64>, y: &[bool]) -> Result<GlmFit> {
    let (n, p) = design.shape();
    if n != y.len() || n == 0 || p == 0 {
        return Err(Error::Data("design and response lengths differ".into()));
    }
    let mut beta = DVector::zeros(p);
    let mut ll = loglik(design, y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITER {
        iterations = it + 1;
        let (grad, info) = score_and_information(design, y, &beta);
        let step = solve_spd_ridge(&info, &grad)
            .ok_or_else(|| Error::Numerical("singular logistic information".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &step * t;
            let cand_ll = loglik(design, y, &candidate);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let max_step = step.amax() * t;
        if beta.amax() > DIVERGENCE_BOUND {
            return Err(Error::Separation { group: 0 });
        }
        if !accepted || max_step < 1e-11 {
            converged = accepted || grad.amax() < 1e-8;
            break;
        }
    }
    if !converged && beta.amax() > DIVERGENCE_BOUND / 2.0 {
        return Err(Error::Separation { group: 0 });
    }
    let (_, info) = score_and_information(design, y, &beta);
    let (covariance, _) = inverse_spd(&info);
    Ok(GlmFit {
        coefficients: beta,
        covariance,
        loglik: ll,
        iterations,
        converged,
    })
}

/// Per-group intercepts and slopes of `logit(pi) = alpha_g + beta_g * S`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogisticFit {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Block diagonal, ordered `[alpha_0, beta_0, alpha_1, beta_1, ...]`.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
}

impl LogisticFit {
    pub fn var_alpha(&self, g: usize) -> f64 {
        self.covariance[(2 * g, 2 * g)]
    }

    pub fn var_beta(&self, g: usize) -> f64 {
        self.covariance[(2 * g + 1, 2 * g + 1)]
    }
}

/// Separate logistic regressions of the responses on the matching score,
/// one per group.
pub fn fit_logistic(
    scores: &[f64],
    responses: &[bool],
    group_of_person: &[usize],
    n_groups: usize,
) -> Result<LogisticFit> {
    if scores.len() != responses.len() || scores.len() != group_of_person.len() {
        return Err(Error::Data("scores, responses and groups must align".into()));
    }
    let mut alpha = Vec::with_capacity(n_groups);
    let mut beta = Vec::with_capacity(n_groups);
    let mut covariance = DMatrix::zeros(2 * n_groups, 2 * n_groups);
    let mut converged = true;
    for g in 0..n_groups {
        let members: Vec<usize> = (0..scores.len()).filter(|&i| group_of_person[i] == g).collect();
        let s: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        let y: Vec<bool> = members.iter().map(|&i| responses[i]).collect();
        let mut distinct = s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Data(format!(
                "group {g} needs at least two distinct score values"
            )));
        }
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::Separation { group: g });
        }
        let design = DMatrix::from_fn(s.len(), 2, |i, j| if j == 0 { 1.0 } else { s[i] });
        let fit = fit_logistic_design(&design, &y).map_err(|e| match e {
            Error::Separation { .. } => Error::Separation { group: g },
            other => other,
        })?;
        converged &= fit.converged;
        alpha.push(fit.coefficients[0]);
        beta.push(fit.coefficients[1]);
        covariance
            .view_mut((2 * g, 2 * g), (2, 2))
            .copy_from(&fit.covariance);
    }
    Ok(LogisticFit {
        alpha,
        beta,
        covariance,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irt::logit;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_point(n0: usize, k0: usize, n1: usize, k1: usize) -> (Vec<f64>, Vec<bool>) {
        let mut s = Vec::new();
        let mut y = Vec::new();
        for i in 0..n0 {
            s.push(0.0);
            y.push(i < k0);
        }
        for i in 0..n1 {
            s.push(1.0);
            y.push(i < k1);
        }
        (s, y)
    }

    #[test]
    fn saturated_two_point_closed_form() {
        let (s, y) = two_point(40, 13, 60, 41);
        let groups = vec![0; s.len()];
        let fit = fit_logistic(&s, &y, &groups, 1).unwrap();
        let (p0, p1) = (13.0 / 40.0, 41.0 / 60.0);
        assert_abs_diff_eq!(fit.alpha[0], logit(p0), epsilon = 1e-8);
        assert_abs_diff_eq!(fit.beta[0], logit(p1) - logit(p0), epsilon = 1e-8);
        assert!(fit.converged);
        // Closed-form variances for the saturated model: 1/(n p q).
        let v0 = 1.0 / (40.0 * p0 * (1.0 - p0));
        let v1 = 1.0 / (60.0 * p1 * (1.0 - p1));
        assert_abs_diff_eq!(fit.var_alpha(0), v0, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.var_beta(0), v0 + v1, epsilon = 1e-8);
    }

    #[test]
    fn constant_group_is_separation() {
        let s = vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0];
        let y = vec![true, false, true, true, true, true];
        let g = vec![0, 0, 0, 1, 1, 1];
        assert!(matches!(
            fit_logistic(&s, &y, &g, 2),
            Err(Error::Separation { group: 1 })
        ));
    }

    #[test]
    fn complete_separation_by_score() {
        let s = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![false, false, false, true, true, true];
        let g = vec![0; 6];
        assert!(matches!(
            fit_logistic(&s, &y, &g, 1),
            Err(Error::Separation { group: 0 })
        ));
    }

    #[test]
    fn needs_two_score_values() {
        let s = vec![1.0, 1.0, 1.0];
        let y = vec![true, false, true];
        assert!(matches!(fit_logistic(&s, &y, &[0, 0, 0], 1), Err(Error::Data(_))));
    }

    fn simulate(seed: u64, n: usize, alpha: f64, beta: f64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..16) as f64).collect();
        let y = s
            .iter()
            .map(|&x| rng.random::<f64>() < logistic(alpha + beta * x))
            .collect();
        (s, y)
    }

    #[test]
    fn gradient_vanishes_and_matches_finite_differences() {
        let (s, y) = simulate(7, 400, -2.0, 0.3);
        let design = DMatrix::from_fn(s.len(), 2, |i, j| if j == 0 { 1.0 } else { s[i] });
        let fit = fit_logistic_design(&design, &y).unwrap();
        let (grad, _) = score_and_information(&design, &y, &fit.coefficients);
        assert!(grad.amax() < 1e-6);

        let probe = DVector::from_vec(vec![-1.5, 0.2]);
        let (grad, _) = score_and_information(&design, &y, &probe);
        for j in 0..2 {
            let h = 1e-5;
            let mut up = probe.clone();
            let mut dn = probe.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (loglik(&design, &y, &up) - loglik(&design, &y, &dn)) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-5 * grad[j].abs().max(1.0));
        }
    }

    #[test]
    fn null_slope_is_rarely_significant() {
        let mut hits = 0;
        let reps = 200;
        for seed in 0..reps {
            let (s, y) = simulate(1000 + seed, 300, 0.2, 0.0);
            let fit = fit_logistic(&s, &y, &vec![0; s.len()], 1).unwrap();
            if fit.beta[0].abs() < 3.0 * fit.var_beta(0).sqrt() {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.99 * reps as f64, "{hits}/{reps}");
    }
}
