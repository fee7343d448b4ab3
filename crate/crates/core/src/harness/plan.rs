use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simgen::{ConditionSpec, DifProportion, Scenario, Study, DEFAULT_SEED, GROUP_COUNTS};

/// Overrides the plan's worker count.
pub const ENV_WORKERS: &str = "DIFMG_WORKERS";
/// Overrides the output directory.
pub const ENV_OUT: &str = "DIFMG_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RmsdFixed,
    RmsdPredicted,
    Wald1Uniform,
    Wald1Nonuniform,
    GlrUniform,
    GlrNonuniform,
    GmhAdjusted,
    GmhUnadjusted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Rmsd,
    Wald1,
    Glr,
    Gmh,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Rmsd, Family::Wald1, Family::Glr, Family::Gmh];

    pub fn label(self) -> &'static str {
        match self {
            Family::Rmsd => "RMSD",
            Family::Wald1 => "Wald-1",
            Family::Glr => "GLR",
            Family::Gmh => "GMH",
        }
    }

    /// The Form 1 and Form 2 variants.
    pub fn forms(self) -> [Method; 2] {
        match self {
            Family::Rmsd => [Method::RmsdPredicted, Method::RmsdFixed],
            Family::Wald1 => [Method::Wald1Uniform, Method::Wald1Nonuniform],
            Family::Glr => [Method::GlrUniform, Method::GlrNonuniform],
            Family::Gmh => [Method::GmhUnadjusted, Method::GmhAdjusted],
        }
    }
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::RmsdFixed,
        Method::RmsdPredicted,
        Method::Wald1Uniform,
        Method::Wald1Nonuniform,
        Method::GlrUniform,
        Method::GlrNonuniform,
        Method::GmhAdjusted,
        Method::GmhUnadjusted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::RmsdFixed => "rmsd_fixed",
            Method::RmsdPredicted => "rmsd_predicted",
            Method::Wald1Uniform => "wald1_uniform",
            Method::Wald1Nonuniform => "wald1_nonuniform",
            Method::GlrUniform => "glr_uniform",
            Method::GlrNonuniform => "glr_nonuniform",
            Method::GmhAdjusted => "gmh_adjusted",
            Method::GmhUnadjusted => "gmh_unadjusted",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::RmsdFixed | Method::RmsdPredicted => Family::Rmsd,
            Method::Wald1Uniform | Method::Wald1Nonuniform => Family::Wald1,
            Method::GlrUniform | Method::GlrNonuniform => Family::Glr,
            Method::GmhAdjusted | Method::GmhUnadjusted => Family::Gmh,
        }
    }

    /// 1 or 2, following the paired-column layout of the summary tables.
    pub fn form(self) -> usize {
        if self.family().forms()[0] == self {
            1
        } else {
            2
        }
    }

    pub fn needs_anchors(self) -> bool {
        self.family() != Family::Rmsd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 30 replications of every 2- and 5-group condition.
    Desk,
    /// 100 replications of all 80 conditions.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Every study cell for the given group counts: the DIF-free condition plus
/// both DIF studies at both proportions, for each scenario.
pub fn design_conditions(group_counts: &[usize], seed: u64) -> Vec<ConditionSpec> {
    let mut out = Vec::new();
    for &g in group_counts {
        for scenario in Scenario::ALL {
            out.push(ConditionSpec::dif_free(g, scenario, seed).expect("valid design cell"));
            for study in [Study::DifInB, Study::DifInA] {
                for prop in [DifProportion::P20, DifProportion::P30] {
                    out.push(ConditionSpec::new(g, scenario, study, prop, seed).expect("valid design cell"));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub conditions: Vec<ConditionSpec>,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub alpha: f64,
    pub workers: usize,
}

impl RunPlan {
    pub fn profile(profile: Profile, seed: u64) -> Self {
        let (groups, reps): (&[usize], usize) = match profile {
            Profile::Desk => (&[2, 5], 30),
            Profile::Full => (&GROUP_COUNTS, 100),
        };
        RunPlan {
            conditions: design_conditions(groups, seed),
            methods: Method::ALL.to_vec(),
            replications: reps,
            alpha: 0.05,
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.methods.is_empty() || self.conditions.is_empty() {
            return Err(Error::Config("a plan needs at least one method and one condition".into()));
        }
        for c in &self.conditions {
            c.validate()?;
        }
        Ok(())
    }

    /// Applies `DIFMG_WORKERS` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_WORKERS) {
            self.workers = v
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_WORKERS} must be a positive integer, got `{v}`")))?;
        }
        Ok(())
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// One condition as written in a plan file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEntry {
    pub n_groups: usize,
    pub scenario: Scenario,
    pub study: Study,
    #[serde(default = "no_dif")]
    pub dif_proportion: DifProportion,
}

fn no_dif() -> DifProportion {
    DifProportion::None
}

/// TOML plan file. Missing fields fall back to the profile (desk by
/// default).
///
/// ```toml
/// profile = "desk"
/// replications = 10
/// methods = ["rmsd_predicted", "gmh_unadjusted"]
///
/// [[condition]]
/// n_groups = 2
/// scenario = "small_low"
/// study = "dif_free"
/// ```
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub profile: Option<Profile>,
    pub replications: Option<usize>,
    pub alpha: Option<f64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<Method>>,
    #[serde(rename = "condition")]
    pub conditions: Option<Vec<ConditionEntry>>,
    pub output: Option<PathBuf>,
}

impl PlanConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn into_plan(self) -> Result<RunPlan> {
        let seed = self.seed.unwrap_or(DEFAULT_SEED);
        let mut plan = RunPlan::profile(self.profile.unwrap_or(Profile::Desk), seed);
        if let Some(r) = self.replications {
            plan.replications = r;
        }
        if let Some(a) = self.alpha {
            plan.alpha = a;
        }
        if let Some(w) = self.workers {
            plan.workers = w;
        }
        if let Some(m) = self.methods {
            plan.methods = m;
        }
        if let Some(cs) = self.conditions {
            plan.conditions = cs
                .into_iter()
                .map(|c| ConditionSpec::new(c.n_groups, c.scenario, c.study, c.dif_proportion, seed))
                .collect::<Result<_>>()?;
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// Output directory: explicit choice, then `DIFMG_OUT`, then the config,
/// then `results`.
pub fn resolve_output_dir(explicit: Option<&Path>, config: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from))
        .or_else(|| config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("results"))
}
