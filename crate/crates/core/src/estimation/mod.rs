//! Multi-group marginal maximum likelihood calibration, logistic regression
//! and Wald tests.
//!
//! [`calibrate`] runs Bock-Aitkin EM over a fixed quadrature grid. Items are
//! either shared across groups (anchors) or carry their own `a`/`b` per
//! group; the lower asymptote of a 3PL item is always shared. Group 0 is the
//! reference group with a fixed standard normal ability distribution.

mod em;
pub(crate) mod linalg;
mod logistic;
mod wald;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::booklet::Booklet;
use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::irt::{logit, ItemParams, Model, QuadratureGrid};

pub use em::{calibrate, marginal_loglik};
pub use logistic::{fit_logistic, fit_logistic_design, GlmFit, LogisticFit};
pub use wald::{chi_square_sf, reference_contrasts, wald_quadratic_form, WaldTest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    SharedAcrossGroups,
    FreePerGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroupDist {
    Fixed { mu: f64, sigma: f64 },
    Free,
}

/// Normal prior on `logit(c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitNormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl Default for LogitNormalPrior {
    fn default() -> Self {
        LogitNormalPrior {
            mean: logit(0.2),
            sd: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub max_cycles: usize,
    /// Absolute change in the (penalized) marginal log-likelihood.
    pub tol: f64,
    pub max_halvings: usize,
    /// Fisher-scoring iterations per item within one M-step.
    pub m_step_iterations: usize,
    pub covariance: CovarianceMethod,
}

/// How the information matrix behind parameter covariances is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceMethod {
    /// Sum of outer products of per-person scores.
    CrossProduct,
    /// Numerical Hessian of the marginal log-likelihood.
    #[default]
    ObservedInformation,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            max_cycles: 500,
            tol: 1e-6,
            max_halvings: 10,
            m_step_iterations: 4,
            covariance: CovarianceMethod::default(),
        }
    }
}

/// Everything a calibration needs besides constraints: item models, grid,
/// prior and EM controls. Shared by the IRT-based DIF methods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisSetup {
    pub models: Vec<Model>,
    pub grid: QuadratureGrid,
    pub c_prior: Option<LogitNormalPrior>,
    pub scaling: f64,
    pub em: EmSettings,
}

impl AnalysisSetup {
    pub fn new(models: Vec<Model>) -> Self {
        AnalysisSetup {
            models,
            grid: QuadratureGrid::q41(),
            c_prior: Some(LogitNormalPrior::default()),
            scaling: 1.0,
            em: EmSettings::default(),
        }
    }

    pub fn for_booklet(booklet: &Booklet) -> Self {
        Self::new(booklet.models())
    }

    /// All items shared; reference fixed at N(0, 1), focal groups free.
    pub fn concurrent(&self, n_groups: usize) -> CalibrationSpec {
        self.spec(
            vec![Constraint::SharedAcrossGroups; self.models.len()],
            reference_fixed(n_groups),
        )
    }

    pub fn spec(&self, constraints: Vec<Constraint>, group_dists: Vec<GroupDist>) -> CalibrationSpec {
        CalibrationSpec {
            models: self.models.clone(),
            constraints,
            group_dists,
            grid: self.grid.clone(),
            c_prior: self.c_prior,
            scaling: self.scaling,
            settings: self.em,
            start: None,
        }
    }
}

/// Reference group fixed at N(0, 1), all others free.
pub fn reference_fixed(n_groups: usize) -> Vec<GroupDist> {
    (0..n_groups)
        .map(|g| {
            if g == 0 {
                GroupDist::Fixed { mu: 0.0, sigma: 1.0 }
            } else {
                GroupDist::Free
            }
        })
        .collect()
}

/// Warm-start values: per item per group parameters and per group (mu, sigma).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartValues {
    pub items: Vec<Vec<ItemParams>>,
    pub group_dists: Vec<NormalDist>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub models: Vec<Model>,
    pub constraints: Vec<Constraint>,
    pub group_dists: Vec<GroupDist>,
    pub grid: QuadratureGrid,
    pub c_prior: Option<LogitNormalPrior>,
    pub scaling: f64,
    pub settings: EmSettings,
    pub start: Option<StartValues>,
}

impl CalibrationSpec {
    pub fn with_start(mut self, start: StartValues) -> Self {
        self.start = Some(start);
        self
    }

    pub fn validate(&self, data: &ResponseMatrix) -> Result<()> {
        let k = data.n_items();
        if self.models.len() != k || self.constraints.len() != k {
            return Err(Error::Config(format!(
                "spec covers {} models / {} constraints for {} items",
                self.models.len(),
                self.constraints.len(),
                k
            )));
        }
        if self.group_dists.len() != data.n_groups() {
            return Err(Error::Config(format!(
                "spec covers {} groups, data has {}",
                self.group_dists.len(),
                data.n_groups()
            )));
        }
        match self.group_dists.first() {
            Some(GroupDist::Fixed { mu, sigma }) if *mu == 0.0 && *sigma == 1.0 => {}
            _ => {
                return Err(Error::Config(
                    "the reference group (group 0) must be fixed at N(0, 1)".into(),
                ))
            }
        }
        for d in &self.group_dists {
            if let GroupDist::Fixed { mu, sigma } = d {
                if !(sigma.is_finite() && *sigma > 0.0 && mu.is_finite()) {
                    return Err(Error::Config("fixed group distributions need sigma > 0".into()));
                }
            }
        }
        let any_shared = self.constraints.contains(&Constraint::SharedAcrossGroups);
        let all_fixed = self
            .group_dists
            .iter()
            .all(|d| matches!(d, GroupDist::Fixed { .. }));
        if !any_shared && !all_fixed && data.n_groups() > 1 {
            return Err(Error::Config(
                "free group distributions need at least one shared (anchor) item".into(),
            ));
        }
        if !(self.scaling > 0.0) {
            return Err(Error::Config("scaling constant must be positive".into()));
        }
        if let Some(start) = &self.start {
            if start.items.len() != k
                || start.items.iter().any(|v| v.len() != data.n_groups())
                || start.group_dists.len() != data.n_groups()
            {
                return Err(Error::Config("start values do not match the data shape".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalDist {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemEstimate {
    pub constraint: Constraint,
    /// One entry per group; identical entries when shared.
    pub per_group: Vec<ItemParams>,
    /// Item had no response variation and was left out of the likelihood.
    pub excluded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    A,
    B,
    LogitC,
}

/// Identifies one free parameter in the covariance matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    /// `group` is `None` for a parameter shared across groups.
    Item {
        item: usize,
        group: Option<usize>,
        kind: ParamKind,
    },
    GroupMean(usize),
    GroupSd(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Covariance {
    pub keys: Vec<ParamKey>,
    pub matrix: DMatrix<f64>,
    /// The information matrix was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

impl Covariance {
    pub fn index_of(&self, key: ParamKey) -> Option<usize> {
        self.keys.iter().position(|k| *k == key)
    }

    /// Covariance sub-block for the given keys, in order.
    pub fn block(&self, keys: &[ParamKey]) -> Option<DMatrix<f64>> {
        let idx: Option<Vec<usize>> = keys.iter().map(|k| self.index_of(*k)).collect();
        let idx = idx?;
        Some(DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
            self.matrix[(idx[i], idx[j])]
        }))
    }
}

/// Posterior probability of each grid node, per person.
#[derive(Clone, Debug, Default)]
pub struct PosteriorMasses {
    n_nodes: usize,
    masses: Vec<f64>,
}

impl PosteriorMasses {
    pub(crate) fn new(n_nodes: usize, masses: Vec<f64>) -> Self {
        PosteriorMasses { n_nodes, masses }
    }

    pub fn person(&self, p: usize) -> &[f64] {
        &self.masses[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    pub fn n_persons(&self) -> usize {
        if self.n_nodes == 0 {
            0
        } else {
            self.masses.len() / self.n_nodes
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub items: Vec<ItemEstimate>,
    pub group_dists: Vec<NormalDist>,
    pub covariance: Covariance,
    /// Marginal log-likelihood at the final estimates.
    pub loglik: f64,
    /// Penalized marginal log-likelihood after each E-step.
    pub trace: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
    pub grid: QuadratureGrid,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub posterior: PosteriorMasses,
}

impl CalibrationResult {
    pub fn params(&self, item: usize, group: usize) -> &ItemParams {
        &self.items[item].per_group[group]
    }

    /// Prior ability weights of `group` on the calibration grid.
    pub fn group_weights(&self, group: usize) -> QuadratureGrid {
        let d = self.group_dists[group];
        self.grid
            .normal_weights(d.mu, d.sigma)
            .expect("estimated sigma is positive")
    }

    /// Current estimates as warm-start values for another calibration.
    pub fn as_start(&self) -> StartValues {
        StartValues {
            items: self.items.iter().map(|i| i.per_group.clone()).collect(),
            group_dists: self.group_dists.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
