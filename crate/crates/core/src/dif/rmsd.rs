//! RMSD between pseudo-observed and model-implied item characteristic curves.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::estimation::{calibrate, AnalysisSetup, CalibrationResult};

/// Cutoffs predicted for 2, 5, 10 and 15 groups.
pub const PREDICTED_CUTOFFS: [(usize, f64); 4] = [(2, 0.060), (5, 0.070), (10, 0.075), (15, 0.075)];

/// Nodes with less total mass than this take the model ICC.
const MIN_NODE_MASS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CutoffPolicy {
    Fixed(f64),
    Predicted,
}

impl CutoffPolicy {
    pub const OPERATIONAL: CutoffPolicy = CutoffPolicy::Fixed(0.1);

    pub fn validate(&self) -> Result<()> {
        match self {
            CutoffPolicy::Fixed(x) if !(*x > 0.0 && *x < 1.0) => {
                Err(Error::Config(format!("fixed RMSD cutoff must lie in (0, 1), got {x}")))
            }
            _ => Ok(()),
        }
    }

    pub fn cutoff(&self, n_groups: usize) -> f64 {
        match self {
            CutoffPolicy::Fixed(x) => *x,
            CutoffPolicy::Predicted => predicted_cutoff(n_groups),
        }
    }
}

impl fmt::Display for CutoffPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CutoffPolicy::Fixed(x) => write!(f, "fixed({x})"),
            CutoffPolicy::Predicted => f.write_str("predicted"),
        }
    }
}

/// Tabled cutoff for the nearest group count; ties go to the larger count.
pub fn predicted_cutoff(n_groups: usize) -> f64 {
    PREDICTED_CUTOFFS
        .iter()
        .min_by_key(|(k, _)| (k.abs_diff(n_groups), usize::MAX - k))
        .map(|(_, c)| *c)
        .expect("table is nonempty")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsdResult {
    /// `values[item][group]`; NaN for items excluded from calibration.
    pub values: Vec<Vec<f64>>,
    pub policy: CutoffPolicy,
    pub cutoff: f64,
    pub flagged: Vec<bool>,
    pub excluded: Vec<bool>,
}

impl RmsdResult {
    pub fn max_value(&self, item: usize) -> f64 {
        self.values[item].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `sqrt(sum_q (pseudo_q - model_q)^2 w_q)`.
pub fn rmsd(pseudo: &[f64], model: &[f64], weights: &[f64]) -> f64 {
    pseudo
        .iter()
        .zip(model)
        .zip(weights)
        .map(|((p, m), w)| (p - m).powi(2) * w)
        .sum::<f64>()
        .sqrt()
}

struct Pseudo {
    /// `[g][j][q]` expected correct / expected responses.
    right: Vec<f64>,
    seen: Vec<f64>,
    /// `[g][q]`.
    mass: Vec<f64>,
}

fn accumulate(calib: &CalibrationResult, data: &ResponseMatrix) -> Result<Pseudo> {
    let (k, g_n, q_n) = (data.n_items(), data.n_groups(), calib.grid.len());
    if calib.posterior.n_persons() != data.n_persons() || calib.items.len() != k {
        return Err(Error::Config("calibration does not match the data".into()));
    }
    let mut out = Pseudo {
        right: vec![0.0; g_n * k * q_n],
        seen: vec![0.0; g_n * k * q_n],
        mass: vec![0.0; g_n * q_n],
    };
    for p in 0..data.n_persons() {
        let g = data.group(p);
        let post = calib.posterior.person(p);
        for (m, w) in out.mass[g * q_n..(g + 1) * q_n].iter_mut().zip(post) {
            *m += w;
        }
        for (j, cell) in data.row(p).iter().enumerate() {
            let Some(x) = cell else { continue };
            let base = (g * k + j) * q_n;
            for q in 0..q_n {
                out.seen[base + q] += post[q];
                if *x {
                    out.right[base + q] += post[q];
                }
            }
        }
    }
    Ok(out)
}

fn pseudo_curve(acc: &Pseudo, calib: &CalibrationResult, item: usize, group: usize, k: usize) -> Vec<f64> {
    let q_n = calib.grid.len();
    let base = (group * k + item) * q_n;
    let params = calib.params(item, group);
    calib
        .grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let seen = acc.seen[base + q];
            if seen < MIN_NODE_MASS {
                params.prob(t)
            } else {
                acc.right[base + q] / seen
            }
        })
        .collect()
}

fn group_weights(acc: &Pseudo, group: usize, q_n: usize) -> Result<Vec<f64>> {
    let mass = &acc.mass[group * q_n..(group + 1) * q_n];
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data(format!("group {group} has no persons")));
    }
    Ok(mass.iter().map(|m| m / total).collect())
}

/// Posterior-weighted proportion correct at each grid node for one item and
/// group.
pub fn pseudo_observed_icc(
    calib: &CalibrationResult,
    data: &ResponseMatrix,
    item: usize,
    group: usize,
) -> Result<Vec<f64>> {
    if item >= data.n_items() || group >= data.n_groups() {
        return Err(Error::Config("item or group out of range".into()));
    }
    if data.persons_in_group(group).next().is_none() {
        return Err(Error::Data(format!("group {group} has no persons")));
    }
    let acc = accumulate(calib, data)?;
    Ok(pseudo_curve(&acc, calib, item, group, data.n_items()))
}

/// RMSD of every item in every group, `[item][group]`.
pub fn rmsd_table(calib: &CalibrationResult, data: &ResponseMatrix) -> Result<Vec<Vec<f64>>> {
    let (k, g_n, q_n) = (data.n_items(), data.n_groups(), calib.grid.len());
    let acc = accumulate(calib, data)?;
    let weights: Vec<Vec<f64>> = (0..g_n).map(|g| group_weights(&acc, g, q_n)).collect::<Result<_>>()?;
    Ok((0..k)
        .map(|j| {
            (0..g_n)
                .map(|g| {
                    if calib.items[j].excluded {
                        return f64::NAN;
                    }
                    let pseudo = pseudo_curve(&acc, calib, j, g, k);
                    let params = calib.params(j, g);
                    let model: Vec<f64> = calib.grid.nodes().iter().map(|&t| params.prob(t)).collect();
                    rmsd(&pseudo, &model, &weights[g])
                })
                .collect()
        })
        .collect())
}

/// Flags items whose largest per-group RMSD reaches the cutoff.
pub fn apply_cutoff(values: Vec<Vec<f64>>, policy: CutoffPolicy, n_groups: usize) -> RmsdResult {
    let cutoff = policy.cutoff(n_groups);
    let excluded: Vec<bool> = values.iter().map(|v| v.iter().any(|x| x.is_nan())).collect();
    let flagged = values
        .iter()
        .zip(&excluded)
        .map(|(v, ex)| !ex && v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= cutoff)
        .collect();
    RmsdResult {
        values,
        policy,
        cutoff,
        flagged,
        excluded,
    }
}

/// RMSD results from an existing concurrent calibration.
pub fn rmsd_from_calibration(
    calib: &CalibrationResult,
    data: &ResponseMatrix,
    policy: CutoffPolicy,
) -> Result<RmsdResult> {
    policy.validate()?;
    Ok(apply_cutoff(rmsd_table(calib, data)?, policy, data.n_groups()))
}

/// Concurrent calibration with all items shared, then RMSD per item and
/// group.
///
/// ```
/// use mgdif::dif::rmsd::{run_rmsd, CutoffPolicy};
/// use mgdif::estimation::AnalysisSetup;
/// use mgdif::irt::Model;
/// use mgdif::simgen::toy_dataset;
///
/// let data = toy_dataset(500, 10, 2, 3);
/// let setup = AnalysisSetup::new(vec![Model::TwoPL; 10]);
/// let result = run_rmsd(&data, &setup, CutoffPolicy::OPERATIONAL).unwrap();
/// assert_eq!(result.cutoff, 0.1);
/// assert!(result.flagged.iter().all(|f| !f));
/// ```
pub fn run_rmsd(data: &ResponseMatrix, setup: &AnalysisSetup, policy: CutoffPolicy) -> Result<RmsdResult> {
    if data.n_groups() < 2 {
        return Err(Error::Config("RMSD needs at least two groups".into()));
    }
    policy.validate()?;
    let calib = calibrate(data, &setup.concurrent(data.n_groups()))?;
    rmsd_from_calibration(&calib, data, policy)
}
