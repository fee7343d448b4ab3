use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analysis::ItemStatus;
use super::plan::Method;
use super::store::ResultRow;
use crate::error::{Error, Result};
use crate::simgen::{ConditionSpec, DifProportion, Scenario, Study};

/// Rounded band for a nominal 0.05 level at 100 replications.
pub const PRESENTED_BAND: (f64, f64) = (0.01, 0.09);

/// Flag counts for one method on one replication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepScore {
    pub clean_flagged: usize,
    /// Clean items that were tested or used as anchors.
    pub clean: usize,
    pub truth_flagged: usize,
    pub truth: usize,
    pub untestable: usize,
    pub unflagged: usize,
}

impl RepScore {
    pub fn type1(&self) -> Option<f64> {
        (self.clean > 0).then(|| self.clean_flagged as f64 / self.clean as f64)
    }

    pub fn power(&self) -> Option<f64> {
        (self.truth > 0).then(|| self.truth_flagged as f64 / self.truth as f64)
    }
}

/// Scores one `(condition, rep, method)` cell; `None` when the method
/// failed. Untestable clean items leave the Type-I denominator; truth items
/// always stay in the power denominator.
pub fn score_rows<'a>(rows: impl IntoIterator<Item = &'a ResultRow>) -> Option<RepScore> {
    let mut s = RepScore::default();
    for r in rows {
        match (r.status, r.truth) {
            (ItemStatus::Failed, _) => return None,
            (ItemStatus::Untestable, true) => {
                s.untestable += 1;
                s.truth += 1;
            }
            (ItemStatus::Untestable, false) => s.untestable += 1,
            (_, true) => {
                s.truth += 1;
                s.truth_flagged += usize::from(r.flagged);
            }
            (_, false) => {
                s.clean += 1;
                s.clean_flagged += usize::from(r.flagged);
            }
        }
        if !r.flagged && r.status != ItemStatus::Untestable {
            s.unflagged += 1;
        }
    }
    Some(s)
}

/// Mean and across-replication SD (n - 1 denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

/// Normal-approximation band `p ± 1.96 sqrt(p(1-p)/n)` for a rejection rate.
///
/// ```
/// use mgdif::harness::acceptance_band;
/// let (lo, hi) = acceptance_band(0.05, 100).unwrap();
/// assert!((lo - 0.00728).abs() < 5e-6 && (hi - 0.09272).abs() < 5e-6);
/// ```
pub fn acceptance_band(nominal: f64, n_reps: usize) -> Result<(f64, f64)> {
    if n_reps == 0 {
        return Err(Error::Config("band needs at least one replication".into()));
    }
    if !(0.0..=1.0).contains(&nominal) {
        return Err(Error::Config(format!("nominal level must lie in [0, 1], got {nominal}")));
    }
    let half = 1.96 * (nominal * (1.0 - nominal) / n_reps as f64).sqrt();
    Ok(((nominal - half).max(0.0), (nominal + half).min(1.0)))
}

/// One-sided lower confidence bound for a binomial proportion.
pub fn binomial_lower_bound(successes: usize, trials: usize, z: f64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let p = successes as f64 / trials as f64;
    p - z * (p * (1.0 - p) / trials as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub condition: String,
    pub n_groups: usize,
    pub scenario: Scenario,
    pub study: Study,
    pub dif_proportion: DifProportion,
    pub method: Method,
    pub type1_mean: Option<f64>,
    pub type1_sd: Option<f64>,
    pub power_mean: Option<f64>,
    pub power_sd: Option<f64>,
    /// Replications where the method produced a result.
    pub n_effective: usize,
    pub n_failed: usize,
    /// Untestable items summed over replications.
    pub untestable: usize,
    /// Clean-item flags and denominators summed over replications.
    pub clean_flagged: usize,
    pub clean_total: usize,
}

impl MetricsCell {
    pub fn spec(&self) -> Result<ConditionSpec> {
        self.condition.parse()
    }
}

/// Aggregates store rows into one cell per `(condition, method)`, sorted by
/// condition then method. Replications are reduced in index order so the
/// result does not depend on how the rows were produced.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<MetricsCell>> {
    let mut cells: BTreeMap<(ConditionSpec, Method), BTreeMap<usize, Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows {
        let spec: ConditionSpec = r.condition.parse()?;
        cells.entry((spec, r.method)).or_default().entry(r.rep).or_default().push(r);
    }
    Ok(cells
        .into_iter()
        .map(|((spec, method), reps)| {
            let scores: Vec<Option<RepScore>> = reps.values().map(|rs| score_rows(rs.iter().copied())).collect();
            let ok: Vec<RepScore> = scores.iter().flatten().copied().collect();
            let type1: Vec<f64> = ok.iter().filter_map(RepScore::type1).collect();
            let power: Vec<f64> = ok.iter().filter_map(RepScore::power).collect();
            let t = mean_sd(&type1);
            let p = mean_sd(&power);
            MetricsCell {
                condition: spec.fingerprint(),
                n_groups: spec.n_groups,
                scenario: spec.scenario,
                study: spec.study,
                dif_proportion: spec.dif_proportion,
                method,
                type1_mean: t.map(|v| v.0),
                type1_sd: t.map(|v| v.1),
                power_mean: p.map(|v| v.0),
                power_sd: p.map(|v| v.1),
                n_effective: ok.len(),
                n_failed: scores.len() - ok.len(),
                untestable: ok.iter().map(|s| s.untestable).sum(),
                clean_flagged: ok.iter().map(|s| s.clean_flagged).sum(),
                clean_total: ok.iter().map(|s| s.clean).sum(),
            }
        })
        .collect())
}

pub fn write_metrics(cells: &[MetricsCell], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsCell>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Cell lookup by condition and method.
pub fn find_cell<'a>(cells: &'a [MetricsCell], cond: &ConditionSpec, method: Method) -> Option<&'a MetricsCell> {
    let key = cond.fingerprint();
    cells.iter().find(|c| c.condition == key && c.method == method)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, item: usize, truth: bool, flagged: bool, status: ItemStatus) -> ResultRow {
        ResultRow {
            condition: "g2-small_low-dif_b-p20-s1".into(),
            rep,
            method: Method::RmsdPredicted,
            item: format!("i{item}"),
            group: String::new(),
            statistic: None,
            cutoff: 0.06,
            flagged,
            p_value: None,
            truth,
            status,
        }
    }

    #[test]
    fn single_false_flag_rate() {
        let rows: Vec<ResultRow> = (0..29).map(|j| row(0, j, false, j == 3, ItemStatus::Tested)).collect();
        let s = score_rows(&rows).unwrap();
        assert!((s.type1().unwrap() - 1.0 / 29.0).abs() < 1e-15);
        assert_eq!(s.power(), None);
    }

    #[test]
    fn power_and_accounting() {
        let rows: Vec<ResultRow> = (0..29)
            .map(|j| {
                let status = if j == 20 { ItemStatus::Untestable } else if j > 24 { ItemStatus::Anchor } else { ItemStatus::Tested };
                row(0, j, j < 6, j < 4 || j == 10, status)
            })
            .collect();
        let s = score_rows(&rows).unwrap();
        assert!((s.power().unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.clean, 22);
        assert_eq!(s.clean_flagged + s.truth_flagged + s.unflagged, 29 - s.untestable);
    }

    #[test]
    fn failed_cells_are_counted_not_scored() {
        let mut rows: Vec<ResultRow> = (0..29).map(|j| row(0, j, false, false, ItemStatus::Tested)).collect();
        rows.push(row(1, 0, false, false, ItemStatus::Failed));
        let cells = aggregate(&rows).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].n_effective, cells[0].n_failed), (1, 1));
        assert_eq!(cells[0].type1_mean, Some(0.0));
    }

    #[test]
    fn bands() {
        let (lo, hi) = acceptance_band(0.5, 100).unwrap();
        assert!((lo - 0.402).abs() < 1e-12 && (hi - 0.598).abs() < 1e-12);
        let (l100, h100) = acceptance_band(0.05, 100).unwrap();
        let (l400, h400) = acceptance_band(0.05, 400).unwrap();
        assert!(((h100 - l100) / (h400 - l400) - 2.0).abs() < 1e-12);
        assert!((PRESENTED_BAND.0 - (l100 * 100.0).round() / 100.0).abs() < 1e-12);
        assert!((PRESENTED_BAND.1 - (h100 * 100.0).round() / 100.0).abs() < 1e-12);
        assert!(acceptance_band(0.05, 0).is_err());
    }

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_sd(&[0.3]), Some((0.3, 0.0)));
    }
}
