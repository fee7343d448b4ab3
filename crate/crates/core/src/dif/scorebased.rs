//! Observed-score DIF tests: generalized logistic regression and the
//! generalized Mantel-Haenszel statistic, with Holm's step-down adjustment.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::AnchorSet;
use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::estimation::{fit_logistic, fit_logistic_design, reference_contrasts, wald_quadratic_form, WaldTest};

/// Total score over the anchors plus the studied item; missing counts as 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingScore {
    pub scores: Vec<u32>,
    pub max_score: u32,
    /// Missing responses within the matching set, per person.
    pub missing: Vec<u32>,
}

pub fn matching_scores(data: &ResponseMatrix, anchors: &AnchorSet, studied: usize) -> Result<MatchingScore> {
    if anchors.contains(studied) {
        return Err(Error::Config(format!("item {studied} is an anchor")));
    }
    if studied >= data.n_items() {
        return Err(Error::Config(format!("item {studied} out of range")));
    }
    let set: Vec<usize> = anchors.items.iter().copied().chain([studied]).collect();
    let mut scores = Vec::with_capacity(data.n_persons());
    let mut missing = Vec::with_capacity(data.n_persons());
    for p in 0..data.n_persons() {
        let (mut s, mut m) = (0, 0);
        for &j in &set {
            match data.get(p, j) {
                Some(true) => s += 1,
                Some(false) => {}
                None => m += 1,
            }
        }
        scores.push(s);
        missing.push(m);
    }
    Ok(MatchingScore {
        scores,
        max_score: set.len() as u32,
        missing,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMethod {
    GlrUniform,
    GlrNonuniform,
    Gmh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjustment {
    None,
    Holm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemScoreTest {
    pub item: usize,
    /// `None` when untestable.
    pub test: Option<WaldTest>,
    pub p_adjusted: Option<f64>,
    pub flagged: bool,
    pub untestable: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreMethodVerdict {
    pub method: ScoreMethod,
    pub adjustment: Adjustment,
    pub alpha: f64,
    /// One entry per studied item, in item order.
    pub items: Vec<ItemScoreTest>,
}

/// Holm step-down adjusted p-values, in input order.
///
/// ```
/// use mgdif::dif::scorebased::holm_adjust;
/// let adj = holm_adjust(&[0.01, 0.04, 0.03]);
/// assert!((adj[0] - 0.03).abs() < 1e-15);
/// assert!((adj[1] - 0.06).abs() < 1e-15 && (adj[2] - 0.06).abs() < 1e-15);
/// ```
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let v = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(v);
        out[i] = running;
    }
    out
}

fn finalize(
    method: ScoreMethod,
    raw: Vec<(usize, Result<WaldTest>)>,
    alpha: f64,
    adjustment: Adjustment,
) -> ScoreMethodVerdict {
    let p_raw: Vec<f64> = raw
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|t| t.p_value))
        .collect();
    let adjusted = match adjustment {
        Adjustment::None => None,
        Adjustment::Holm => Some(holm_adjust(&p_raw)),
    };
    let mut next = 0;
    let items = raw
        .into_iter()
        .map(|(item, r)| match r {
            Ok(test) => {
                let p_adjusted = adjusted.as_ref().map(|a| a[next]);
                next += 1;
                let p = p_adjusted.unwrap_or(test.p_value);
                ItemScoreTest {
                    item,
                    test: Some(test),
                    p_adjusted,
                    flagged: p < alpha,
                    untestable: None,
                }
            }
            Err(e) => {
                log::info!("item {item} untestable for {method:?}: {e}");
                ItemScoreTest {
                    item,
                    test: None,
                    p_adjusted: None,
                    flagged: false,
                    untestable: Some(e.to_string()),
                }
            }
        })
        .collect();
    ScoreMethodVerdict {
        method,
        adjustment,
        alpha,
        items,
    }
}

/// Uniform and nonuniform GLR Wald tests for one studied item.
///
/// The nonuniform test compares per-group slopes from separate fits; the
/// uniform test refits with one common slope and compares intercepts.
pub fn glr_item(data: &ResponseMatrix, anchors: &AnchorSet, item: usize) -> (Result<WaldTest>, Result<WaldTest>) {
    let scores = match matching_scores(data, anchors, item) {
        Ok(s) => s,
        Err(e) => return (Err(Error::Untestable(e.to_string())), Err(Error::Untestable(e.to_string()))),
    };
    let g_n = data.n_groups();
    let (mut s, mut y, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..data.n_persons() {
        if let Some(x) = data.get(p, item) {
            s.push(scores.scores[p] as f64);
            y.push(x);
            g.push(data.group(p));
        }
    }
    let untestable = |e: Error| Error::Untestable(e.to_string());

    let nonuniform = fit_logistic(&s, &y, &g, g_n).map_err(untestable).and_then(|fit| {
        let est = DVector::from_vec(fit.beta.clone());
        let idx: Vec<usize> = (0..g_n).map(|h| 2 * h + 1).collect();
        let cov = fit.covariance.select_rows(&idx).select_columns(&idx);
        wald_quadratic_form(&est, &reference_contrasts(g_n), &cov)
    });

    let uniform = (|| {
        for h in 0..g_n {
            let ys = y.iter().zip(&g).filter(|(_, gg)| **gg == h).map(|(v, _)| *v);
            let (n, r) = ys.fold((0, 0), |(n, r), v| (n + 1, r + usize::from(v)));
            if n == 0 || r == 0 || r == n {
                return Err(Error::Untestable(format!("separation in group {h}")));
            }
        }
        let design = DMatrix::from_fn(s.len(), g_n + 1, |i, c| {
            if c == g_n {
                s[i]
            } else if g[i] == c {
                1.0
            } else {
                0.0
            }
        });
        let fit = fit_logistic_design(&design, &y).map_err(untestable)?;
        let est = DVector::from_iterator(g_n, fit.coefficients.iter().take(g_n).copied());
        let cov = fit.covariance.view((0, 0), (g_n, g_n)).into_owned();
        wald_quadratic_form(&est, &reference_contrasts(g_n), &cov)
    })();
    (uniform, nonuniform)
}

/// GLR over all studied items: `(uniform, nonuniform)` verdicts.
pub fn glr_test(
    data: &ResponseMatrix,
    anchors: &AnchorSet,
    alpha: f64,
    adjustment: Adjustment,
) -> (ScoreMethodVerdict, ScoreMethodVerdict) {
    let (mut uni, mut non) = (Vec::new(), Vec::new());
    for j in anchors.studied(data.n_items()) {
        let (u, n) = glr_item(data, anchors, j);
        uni.push((j, u));
        non.push((j, n));
    }
    (
        finalize(ScoreMethod::GlrUniform, uni, alpha, adjustment),
        finalize(ScoreMethod::GlrNonuniform, non, alpha, adjustment),
    )
}

/// Per-stratum counts: `right[g]` correct and `total[g]` responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub right: Vec<f64>,
    pub total: Vec<f64>,
}

impl Stratum {
    fn has_empty_group(&self) -> bool {
        self.total.contains(&0.0)
    }

    fn absorb(&mut self, other: &Stratum) {
        for g in 0..self.right.len() {
            self.right[g] += other.right[g];
            self.total[g] += other.total[g];
        }
    }
}

/// Score strata for the studied item, with any stratum missing a group
/// merged into its neighbour on the side of the median score.
pub fn gmh_strata(data: &ResponseMatrix, anchors: &AnchorSet, item: usize) -> Result<Vec<Stratum>> {
    let scores = matching_scores(data, anchors, item)?;
    let g_n = data.n_groups();
    let mut by_score: BTreeMap<u32, Stratum> = BTreeMap::new();
    let mut observed = Vec::new();
    for p in 0..data.n_persons() {
        let Some(x) = data.get(p, item) else { continue };
        let s = scores.scores[p];
        observed.push(s);
        let st = by_score.entry(s).or_insert_with(|| Stratum {
            right: vec![0.0; g_n],
            total: vec![0.0; g_n],
        });
        st.total[data.group(p)] += 1.0;
        if x {
            st.right[data.group(p)] += 1.0;
        }
    }
    if observed.is_empty() {
        return Err(Error::Untestable(format!("item {item} has no responses")));
    }
    observed.sort_unstable();
    let median = observed[observed.len() / 2];
    let mut strata: Vec<(u32, Stratum)> = by_score.into_iter().collect();
    while strata.len() > 1 {
        let Some(i) = strata.iter().position(|(_, s)| s.has_empty_group()) else { break };
        let toward_higher = strata[i].0 < median;
        let target = if (toward_higher && i + 1 < strata.len()) || i == 0 { i + 1 } else { i - 1 };
        let (_, removed) = strata.remove(i);
        let target = if target > i { target - 1 } else { target };
        strata[target].1.absorb(&removed);
    }
    Ok(strata.into_iter().map(|(_, s)| s).collect())
}

/// `(A - E)' V^-1 (A - E)` over groups `1..G`, with `df = G - 1`.
pub fn gmh_statistic(strata: &[Stratum]) -> Result<WaldTest> {
    let g_n = strata.first().map(|s| s.total.len()).unwrap_or(0);
    if g_n < 2 {
        return Err(Error::Untestable("GMH needs at least two groups".into()));
    }
    let h = g_n - 1;
    let mut diff = DVector::zeros(h);
    let mut v = DMatrix::zeros(h, h);
    let mut informative = false;
    for st in strata {
        let t: f64 = st.total.iter().sum();
        let r: f64 = st.right.iter().sum();
        if t < 2.0 || r == 0.0 || r == t {
            continue;
        }
        informative = true;
        let scale = r * (t - r) / (t * t * (t - 1.0));
        for a in 0..h {
            let na = st.total[a + 1];
            diff[a] += st.right[a + 1] - na * r / t;
            for b in 0..h {
                let nb = st.total[b + 1];
                let diag = if a == b { t * na } else { 0.0 };
                v[(a, b)] += scale * (diag - na * nb);
            }
        }
    }
    if !informative {
        return Err(Error::Untestable("no informative score stratum".into()));
    }
    wald_quadratic_form(&diff, &DMatrix::identity(h, h), &v)
}

pub fn gmh_item(data: &ResponseMatrix, anchors: &AnchorSet, item: usize) -> Result<WaldTest> {
    let strata = gmh_strata(data, anchors, item)?;
    gmh_statistic(&strata)
}

/// GMH over all studied items.
pub fn gmh_test(data: &ResponseMatrix, anchors: &AnchorSet, alpha: f64, adjustment: Adjustment) -> ScoreMethodVerdict {
    let raw = anchors
        .studied(data.n_items())
        .into_iter()
        .map(|j| (j, gmh_item(data, anchors, j)))
        .collect();
    finalize(ScoreMethod::Gmh, raw, alpha, adjustment)
}

/// Flags both with and without adjustment from one set of GMH statistics.
pub fn gmh_both(data: &ResponseMatrix, anchors: &AnchorSet, alpha: f64) -> (ScoreMethodVerdict, ScoreMethodVerdict) {
    let studied = anchors.studied(data.n_items());
    let tests: Vec<Result<WaldTest>> = studied.iter().map(|&j| gmh_item(data, anchors, j)).collect();
    let copy = |t: &Result<WaldTest>| match t {
        Ok(w) => Ok(*w),
        Err(e) => Err(Error::Untestable(e.to_string())),
    };
    let raw = |ts: &[Result<WaldTest>]| studied.iter().copied().zip(ts.iter().map(copy)).collect();
    (
        finalize(ScoreMethod::Gmh, raw(&tests), alpha, Adjustment::None),
        finalize(ScoreMethod::Gmh, raw(&tests), alpha, Adjustment::Holm),
    )
}
