use serde::{Deserialize, Serialize};

use super::plan::{Family, Method};
use crate::data::ResponseMatrix;
use crate::dif::rmsd::{rmsd_from_calibration, CutoffPolicy};
use crate::dif::scorebased::{glr_test, gmh_both, Adjustment, ScoreMethodVerdict};
use crate::dif::wald::{wald1_test, wald2_identify_anchors, Wald2Result, WaldVerdict};
use crate::dif::AnchorSet;
use crate::estimation::{calibrate, AnalysisSetup, CalibrationResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Tested,
    /// Anchors are never flagged but count as clean items.
    Anchor,
    Untestable,
    /// The whole method failed on this dataset.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item: usize,
    /// Group carrying the statistic, for per-group statistics.
    pub group: Option<usize>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub flagged: bool,
    pub status: ItemStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// RMSD cutoff or significance level.
    pub cutoff: f64,
    /// One entry per item, or the failure message.
    pub result: std::result::Result<Vec<ItemOutcome>, String>,
}

impl MethodOutcome {
    pub fn flagged_items(&self) -> Vec<usize> {
        match &self.result {
            Ok(items) => items.iter().filter(|o| o.flagged).map(|o| o.item).collect(),
            Err(_) => Vec::new(),
        }
    }
}

/// Runs `methods` on one dataset. Anchor-based methods share one Wald-2
/// anchor set and RMSD reuses its first-stage calibration.
pub fn analyze(data: &ResponseMatrix, setup: &AnalysisSetup, methods: &[Method], alpha: f64) -> Vec<MethodOutcome> {
    let g_n = data.n_groups();
    let wants = |f: Family| methods.iter().any(|m| m.family() == f);
    let anchors: Option<std::result::Result<Wald2Result, String>> = methods
        .iter()
        .any(|m| m.needs_anchors())
        .then(|| wald2_identify_anchors(data, setup, alpha).map_err(|e| e.to_string()));

    let stage1 = anchors.as_ref().and_then(|a| a.as_ref().ok()).and_then(|w| w.stage1.clone());
    let calib: Option<std::result::Result<CalibrationResult, String>> = wants(Family::Rmsd).then(|| match stage1 {
        Some(c) => Ok(c),
        None => calibrate(data, &setup.concurrent(g_n)).map_err(|e| e.to_string()),
    });

    let anchor_set = |m: Method| -> std::result::Result<&Wald2Result, String> {
        match &anchors {
            Some(Ok(w)) => Ok(w),
            Some(Err(e)) => Err(format!("anchor selection failed: {e}")),
            None => Err(format!("{m} needs anchors")),
        }
    };
    let wald = wants(Family::Wald1).then(|| {
        anchor_set(Method::Wald1Uniform).and_then(|w| {
            wald1_test(data, setup, &w.anchors, alpha, w.stage1.as_ref()).map_err(|e| e.to_string())
        })
    });
    let glr = wants(Family::Glr).then(|| {
        anchor_set(Method::GlrUniform).map(|w| (glr_test(data, &w.anchors, alpha, Adjustment::None), w.anchors.clone()))
    });
    let gmh = wants(Family::Gmh).then(|| anchor_set(Method::GmhUnadjusted).map(|w| (gmh_both(data, &w.anchors, alpha), w.anchors.clone())));

    methods
        .iter()
        .map(|&method| {
            let (cutoff, result) = match method {
                Method::RmsdFixed | Method::RmsdPredicted => {
                    let policy = if method == Method::RmsdFixed {
                        CutoffPolicy::OPERATIONAL
                    } else {
                        CutoffPolicy::Predicted
                    };
                    let result = match calib.as_ref().expect("calibrated for RMSD") {
                        Ok(c) => rmsd_outcomes(c, data, policy),
                        Err(e) => Err(e.clone()),
                    };
                    (policy.cutoff(g_n), result)
                }
                Method::Wald1Uniform | Method::Wald1Nonuniform => {
                    let result = match wald.as_ref().expect("Wald-1 was run") {
                        Ok(v) => Ok(wald_outcomes(v, data.n_items(), method == Method::Wald1Nonuniform)),
                        Err(e) => Err(e.clone()),
                    };
                    (alpha, result)
                }
                Method::GlrUniform | Method::GlrNonuniform => {
                    let result = match glr.as_ref().expect("GLR was run") {
                        Ok(((uni, non), anchors)) => {
                            let v = if method == Method::GlrUniform { uni } else { non };
                            Ok(score_outcomes(v, anchors, data.n_items()))
                        }
                        Err(e) => Err(e.clone()),
                    };
                    (alpha, result)
                }
                Method::GmhAdjusted | Method::GmhUnadjusted => {
                    let result = match gmh.as_ref().expect("GMH was run") {
                        Ok(((raw, holm), anchors)) => {
                            let v = if method == Method::GmhAdjusted { holm } else { raw };
                            Ok(score_outcomes(v, anchors, data.n_items()))
                        }
                        Err(e) => Err(e.clone()),
                    };
                    (alpha, result)
                }
            };
            MethodOutcome { method, cutoff, result }
        })
        .collect()
}

fn rmsd_outcomes(calib: &CalibrationResult, data: &ResponseMatrix, policy: CutoffPolicy) -> std::result::Result<Vec<ItemOutcome>, String> {
    let r = rmsd_from_calibration(calib, data, policy).map_err(|e| e.to_string())?;
    Ok((0..data.n_items())
        .map(|j| {
            if r.excluded[j] {
                return ItemOutcome {
                    item: j,
                    group: None,
                    statistic: None,
                    p_value: None,
                    flagged: false,
                    status: ItemStatus::Untestable,
                };
            }
            let (group, value) = r.values[j]
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (g, v)| if v > best.1 { (g, v) } else { best });
            ItemOutcome {
                item: j,
                group: Some(group),
                statistic: Some(value),
                p_value: None,
                flagged: r.flagged[j],
                status: ItemStatus::Tested,
            }
        })
        .collect())
}

fn anchor_outcome(item: usize) -> ItemOutcome {
    ItemOutcome {
        item,
        group: None,
        statistic: None,
        p_value: None,
        flagged: false,
        status: ItemStatus::Anchor,
    }
}

fn wald_outcomes(v: &WaldVerdict, n_items: usize, nonuniform: bool) -> Vec<ItemOutcome> {
    (0..n_items)
        .map(|j| match v.item(j) {
            None => anchor_outcome(j),
            Some(iv) => {
                let (test, flagged) = if nonuniform {
                    (iv.nonuniform, iv.flagged_nonuniform)
                } else {
                    (iv.uniform, iv.flagged_uniform)
                };
                ItemOutcome {
                    item: j,
                    group: None,
                    statistic: test.map(|t| t.statistic),
                    p_value: test.map(|t| t.p_value),
                    flagged,
                    status: if test.is_some() { ItemStatus::Tested } else { ItemStatus::Untestable },
                }
            }
        })
        .collect()
}

fn score_outcomes(v: &ScoreMethodVerdict, anchors: &AnchorSet, n_items: usize) -> Vec<ItemOutcome> {
    (0..n_items)
        .map(|j| {
            if anchors.contains(j) {
                return anchor_outcome(j);
            }
            let t = v.items.iter().find(|t| t.item == j).expect("studied item has a verdict");
            ItemOutcome {
                item: j,
                group: None,
                statistic: t.test.map(|w| w.statistic),
                p_value: t.p_adjusted.or(t.test.map(|w| w.p_value)),
                flagged: t.flagged,
                status: if t.test.is_some() { ItemStatus::Tested } else { ItemStatus::Untestable },
            }
        })
        .collect()
}
