//! Wald tests on IRT item parameters across groups.
//!
//! Anchors come from a two-stage procedure: a concurrent calibration with
//! every item shared fixes the focal ability distributions, then a second
//! calibration frees every item and tests each one on its stacked `(a, b)`
//! differences. The Wald-1 test then frees only the studied items while the
//! anchors link the scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AnchorSet, AnchorSource};
use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::estimation::{
    calibrate, reference_contrasts, reference_fixed, wald_quadratic_form, AnalysisSetup,
    CalibrationResult, Constraint, GroupDist, ParamKey, ParamKind, WaldTest,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Wald2Result {
    pub anchors: AnchorSet,
    /// Stacked `(a, b)` test per item; `None` for items excluded from
    /// calibration.
    pub tests: Vec<Option<WaldTest>>,
    pub flagged: Vec<bool>,
    #[serde(skip)]
    pub stage1: Option<CalibrationResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaldItemVerdict {
    pub item: usize,
    /// `None` when the item could not be tested.
    pub nonuniform: Option<WaldTest>,
    pub uniform: Option<WaldTest>,
    pub flagged_nonuniform: bool,
    pub flagged_uniform: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaldVerdict {
    pub anchors: AnchorSet,
    pub alpha: f64,
    /// One entry per studied item, in item order.
    pub items: Vec<WaldItemVerdict>,
    pub converged: bool,
}

impl WaldVerdict {
    pub fn item(&self, item: usize) -> Option<&WaldItemVerdict> {
        self.items.iter().find(|v| v.item == item)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn item_keys(item: usize, n_groups: usize, kind: ParamKind) -> Vec<ParamKey> {
    (0..n_groups)
        .map(|g| ParamKey::Item {
            item,
            group: Some(g),
            kind,
        })
        .collect()
}

fn estimates(calib: &CalibrationResult, item: usize, kind: ParamKind) -> Vec<f64> {
    calib.items[item]
        .per_group
        .iter()
        .map(|p| match kind {
            ParamKind::A => p.a,
            ParamKind::B => p.b,
            ParamKind::LogitC => crate::irt::logit(p.c),
        })
        .collect()
}

/// Tests `kinds` of one free item jointly against the reference group.
fn test_item(calib: &CalibrationResult, item: usize, kinds: &[ParamKind]) -> Result<WaldTest> {
    let g_n = calib.group_dists.len();
    if calib.items[item].excluded {
        return Err(Error::Untestable(format!("item {item} was excluded from calibration")));
    }
    let keys: Vec<ParamKey> = kinds.iter().flat_map(|k| item_keys(item, g_n, *k)).collect();
    let cov = calib
        .covariance
        .block(&keys)
        .ok_or_else(|| Error::Untestable(format!("item {item} has no free per-group parameters")))?;
    let est: Vec<f64> = kinds.iter().flat_map(|k| estimates(calib, item, *k)).collect();
    let c1 = reference_contrasts(g_n);
    let mut contrast = DMatrix::zeros(c1.nrows() * kinds.len(), c1.ncols() * kinds.len());
    for b in 0..kinds.len() {
        contrast
            .view_mut((b * c1.nrows(), b * c1.ncols()), c1.shape())
            .copy_from(&c1);
    }
    wald_quadratic_form(&DVector::from_vec(est), &contrast, &cov)
}

/// Two-stage anchor identification. Items not flagged at `alpha` become
/// anchors; when no item or every item is flagged the second half of the
/// test is used instead.
pub fn wald2_identify_anchors(data: &ResponseMatrix, setup: &AnalysisSetup, alpha: f64) -> Result<Wald2Result> {
    check_alpha(alpha)?;
    let (k, g_n) = (data.n_items(), data.n_groups());
    if g_n < 2 {
        return Err(Error::Config("Wald tests need at least two groups".into()));
    }
    let stage1 = calibrate(data, &setup.concurrent(g_n))?;
    let fixed: Vec<GroupDist> = stage1
        .group_dists
        .iter()
        .map(|d| GroupDist::Fixed { mu: d.mu, sigma: d.sigma })
        .collect();
    let spec = setup
        .spec(vec![Constraint::FreePerGroup; k], fixed)
        .with_start(stage1.as_start());
    let stage2 = calibrate(data, &spec)?;
    let tests: Vec<Option<WaldTest>> = (0..k)
        .map(|j| test_item(&stage2, j, &[ParamKind::A, ParamKind::B]).ok())
        .collect();
    let flagged: Vec<bool> = tests
        .iter()
        .map(|t| t.is_some_and(|t| t.p_value < alpha))
        .collect();
    let n_flagged = flagged.iter().filter(|f| **f).count();
    let anchors = if n_flagged == 0 || n_flagged == k {
        AnchorSet::second_half(k)
    } else {
        let items: Vec<usize> = (0..k).filter(|&j| !flagged[j] && tests[j].is_some()).collect();
        AnchorSet::new(items, AnchorSource::Wald2, k).unwrap_or_else(|_| AnchorSet::second_half(k))
    };
    Ok(Wald2Result {
        anchors,
        tests,
        flagged,
        stage1: Some(stage1),
    })
}

/// Wald-1: anchors shared, studied items free per group, focal
/// distributions free. Uniform DIF is flagged only when the nonuniform
/// test is not significant.
///
/// ```
/// use mgdif::dif::{wald::wald1_test, AnchorSet};
/// use mgdif::estimation::AnalysisSetup;
/// use mgdif::irt::Model;
/// use mgdif::simgen::toy_dataset;
///
/// let data = toy_dataset(400, 8, 2, 5);
/// let setup = AnalysisSetup::new(vec![Model::TwoPL; 8]);
/// let verdict = wald1_test(&data, &setup, &AnchorSet::second_half(8), 0.05, None).unwrap();
/// assert_eq!(verdict.items.len(), 4);
/// assert_eq!(verdict.items[0].uniform.unwrap().df, 1);
/// ```
pub fn wald1_test(
    data: &ResponseMatrix,
    setup: &AnalysisSetup,
    anchors: &AnchorSet,
    alpha: f64,
    start: Option<&CalibrationResult>,
) -> Result<WaldVerdict> {
    check_alpha(alpha)?;
    let (k, g_n) = (data.n_items(), data.n_groups());
    if g_n < 2 {
        return Err(Error::Config("Wald tests need at least two groups".into()));
    }
    let anchors = AnchorSet::new(anchors.items.clone(), anchors.source, k)?;
    let constraints = (0..k)
        .map(|j| {
            if anchors.contains(j) {
                Constraint::SharedAcrossGroups
            } else {
                Constraint::FreePerGroup
            }
        })
        .collect();
    let mut spec = setup.spec(constraints, reference_fixed(g_n));
    if let Some(s) = start {
        spec = spec.with_start(s.as_start());
    }
    let calib = calibrate(data, &spec)?;
    let items = anchors
        .studied(k)
        .into_iter()
        .map(|j| {
            let nonuniform = test_item(&calib, j, &[ParamKind::A]).ok();
            let uniform = test_item(&calib, j, &[ParamKind::B]).ok();
            let flagged_nonuniform = nonuniform.is_some_and(|t| t.p_value < alpha);
            let flagged_uniform = !flagged_nonuniform && uniform.is_some_and(|t| t.p_value < alpha);
            WaldItemVerdict {
                item: j,
                nonuniform,
                uniform,
                flagged_nonuniform,
                flagged_uniform,
            }
        })
        .collect();
    Ok(WaldVerdict {
        anchors,
        alpha,
        items,
        converged: calib.converged,
    })
}

/// Anchor selection followed by the Wald-1 test, warm-started from the
/// first-stage calibration.
pub fn wald_pipeline(data: &ResponseMatrix, setup: &AnalysisSetup, alpha: f64) -> Result<(Wald2Result, WaldVerdict)> {
    let w2 = wald2_identify_anchors(data, setup, alpha)?;
    let verdict = wald1_test(data, setup, &w2.anchors, alpha, w2.stage1.as_ref())?;
    Ok((w2, verdict))
}
