//! Item response functions, quadrature grids and ICC-based effect sizes.
//!
//! Everything here is a value type or a pure function. The response function
//! is the logistic 3PL curve `c + (1 - c) / (1 + exp(-D a (theta - b)))`, with
//! the 2PL obtained by pinning `c` at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "2PL")]
    TwoPL,
    #[serde(rename = "3PL")]
    ThreePL,
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Model::TwoPL => f.write_str("2PL"),
            Model::ThreePL => f.write_str("3PL"),
        }
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "2PL" => Ok(Model::TwoPL),
            "3PL" => Ok(Model::ThreePL),
            other => Err(Error::Config(format!("unknown item model `{other}`"))),
        }
    }
}

/// Parameters of one dichotomous item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    /// Discrimination, strictly positive.
    pub a: f64,
    /// Difficulty on the ability scale.
    pub b: f64,
    /// Lower asymptote in `[0, 1)`; zero for 2PL items.
    pub c: f64,
    pub model: Model,
    /// Scaling constant `D`.
    #[serde(default = "default_scaling")]
    pub scaling: f64,
}

fn default_scaling() -> f64 {
    1.0
}

impl ItemParams {
    pub fn new(a: f64, b: f64, c: f64, model: Model) -> Result<Self> {
        let item = ItemParams {
            a,
            b,
            c,
            model,
            scaling: 1.0,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn two_pl(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, 0.0, Model::TwoPL)
    }

    pub fn three_pl(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(a, b, c, Model::ThreePL)
    }

    pub fn with_scaling(mut self, scaling: f64) -> Result<Self> {
        self.scaling = scaling;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("discrimination must be > 0, got {}", self.a)));
        }
        if !self.b.is_finite() {
            return Err(Error::Config("difficulty must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.c) {
            return Err(Error::Config(format!("lower asymptote must lie in [0, 1), got {}", self.c)));
        }
        if self.model == Model::TwoPL && self.c != 0.0 {
            return Err(Error::Config("2PL items must have c = 0".into()));
        }
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            return Err(Error::Config(format!("scaling constant must be > 0, got {}", self.scaling)));
        }
        Ok(())
    }

    #[inline]
    pub fn prob(&self, theta: f64) -> f64 {
        icc(self, theta)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Probability of a correct response at ability `theta`.
#[inline]
pub fn icc(item: &ItemParams, theta: f64) -> f64 {
    let z = item.scaling * item.a * (theta - item.b);
    item.c + (1.0 - item.c) * logistic(z)
}

/// A named examinee population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl GroupSpec {
    pub fn new(name: impl Into<String>, n: usize, mu: f64, sigma: f64) -> Result<Self> {
        let group = GroupSpec {
            name: name.into(),
            n,
            mu,
            sigma,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config(format!("group `{}` has no persons", self.name)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(Error::Config(format!(
                "group `{}` needs finite mu and sigma > 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Fixed ability nodes with a probability mass attached to each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Builds a grid from explicit nodes and (unnormalized) weights.
    pub fn from_parts(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.len() != weights.len() {
            return Err(Error::Config(
                "grid needs at least two nodes and one weight per node".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("grid nodes must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("grid weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("grid weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(QuadratureGrid { nodes, weights })
    }

    /// The 41-node grid on [-4, 4] in steps of 0.2.
    pub fn q41() -> Self {
        make_grid(41, -4.0, 4.0).expect("static grid bounds are valid")
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Same nodes, weights proportional to a normal density.
    pub fn normal_weights(&self, mu: f64, sigma: f64) -> Result<Self> {
        normal_weights(self, mu, sigma)
    }

    /// Mean of the node values under the grid weights.
    pub fn mean(&self) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(t, w)| t * w).sum()
    }
}

/// Equally spaced nodes from `lo` to `hi` inclusive, uniform weights.
pub fn make_grid(n_nodes: usize, lo: f64, hi: f64) -> Result<QuadratureGrid> {
    if n_nodes < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!(
            "grid needs n_nodes >= 2 and lo < hi, got n={n_nodes}, lo={lo}, hi={hi}"
        )));
    }
    let step = (hi - lo) / (n_nodes - 1) as f64;
    // Nodes are computed from the index, not by accumulation, so that the
    // Q41 grid hits 0.0 and the endpoints exactly.
    let nodes: Vec<f64> = (0..n_nodes)
        .map(|i| {
            if i == n_nodes - 1 {
                hi
            } else {
                let t = lo + step * i as f64;
                if t.abs() < 1e-12 {
                    0.0
                } else {
                    t
                }
            }
        })
        .collect();
    let weights = vec![1.0 / n_nodes as f64; n_nodes];
    Ok(QuadratureGrid { nodes, weights })
}

/// Discretizes `N(mu, sigma^2)` on the nodes of `grid`.
pub fn normal_weights(grid: &QuadratureGrid, mu: f64, sigma: f64) -> Result<QuadratureGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(Error::Config(format!("normal weights need sigma > 0, got {sigma}")));
    }
    let log_w: Vec<f64> = grid
        .nodes
        .iter()
        .map(|t| {
            let z = (t - mu) / sigma;
            -0.5 * z * z
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights = log_w.iter().map(|l| (l - max).exp()).collect();
    QuadratureGrid::from_parts(grid.nodes.clone(), weights)
}

/// Unweighted area between two ICCs over the grid span, trapezoid rule.
pub fn icc_area_difference(item1: &ItemParams, item2: &ItemParams, grid: &QuadratureGrid) -> f64 {
    let gaps: Vec<f64> = grid
        .nodes
        .iter()
        .map(|&t| (icc(item1, t) - icc(item2, t)).abs())
        .collect();
    grid.nodes
        .windows(2)
        .zip(gaps.windows(2))
        .map(|(t, g)| 0.5 * (t[1] - t[0]) * (g[0] + g[1]))
        .sum()
}

/// ETS severity category for a Mantel-Haenszel delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EtsFlag {
    A,
    B,
    C,
}

impl EtsFlag {
    pub fn classify(delta: f64) -> Self {
        let d = delta.abs();
        if d < 1.0 {
            EtsFlag::A
        } else if d >= 1.5 {
            EtsFlag::C
        } else {
            EtsFlag::B
        }
    }
}

impl std::fmt::Display for EtsFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EtsFlag::A => "A",
            EtsFlag::B => "B",
            EtsFlag::C => "C",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EtsFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" => Ok(EtsFlag::A),
            "B" => Ok(EtsFlag::B),
            "C" => Ok(EtsFlag::C),
            other => Err(Error::Config(format!("unknown ETS flag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhEffect {
    pub delta: f64,
    pub flag: EtsFlag,
}

/// Population-level Mantel-Haenszel delta between two versions of an item.
///
/// Each grid node is a stratum holding the expected 2x2 table for a
/// population answering `item1` (weights from `ref_pop`) and one answering
/// `item2` (weights from `focal_pop`). Positive deltas mean `item2` is harder.
pub fn mh_delta_effect_size(
    item1: &ItemParams,
    item2: &ItemParams,
    ref_pop: &QuadratureGrid,
    focal_pop: &QuadratureGrid,
) -> Result<MhEffect> {
    if ref_pop.nodes != focal_pop.nodes {
        return Err(Error::Config("populations must share quadrature nodes".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&t, &wr), &wf) in ref_pop.nodes.iter().zip(&ref_pop.weights).zip(&focal_pop.weights) {
        let total = wr + wf;
        if total <= 0.0 {
            continue;
        }
        let (p1, p2) = (icc(item1, t), icc(item2, t));
        let (right1, wrong1) = (wr * p1, wr * (1.0 - p1));
        let (right2, wrong2) = (wf * p2, wf * (1.0 - p2));
        num += right2 * wrong1 / total;
        den += right1 * wrong2 / total;
    }
    if !(num > 0.0 && den > 0.0) || !num.is_finite() || !den.is_finite() {
        return Err(Error::UndefinedOdds(
            "every stratum is all-correct or all-wrong".into(),
        ));
    }
    let delta = -2.35 * (num / den).ln();
    Ok(MhEffect {
        delta,
        flag: EtsFlag::classify(delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn icc_is_one_half_at_difficulty_for_2pl() {
        let item = ItemParams::two_pl(1.0, 0.0).unwrap();
        assert_eq!(icc(&item, 0.0), 0.5);
    }

    #[test]
    fn icc_lower_asymptote_is_c() {
        let item = ItemParams::three_pl(1.219, 1.134, 0.299).unwrap();
        assert_abs_diff_eq!(icc(&item, -60.0), 0.299, epsilon = 1e-12);
        assert!(icc(&item, -60.0) >= 0.299);
    }

    #[test]
    fn icc_matches_high_precision_value() {
        // 0.026 + 0.974 / (1 + exp(-1.105 * (0 - 0.093))), evaluated with
        // mpmath at 50 digits.
        let item = ItemParams::three_pl(1.105, 0.093, 0.026).unwrap();
        assert_abs_diff_eq!(icc(&item, 0.0), 0.487_998_721_098_023_5, epsilon = 1e-15);
    }

    #[test]
    fn invalid_items_rejected() {
        assert!(ItemParams::two_pl(0.0, 0.0).is_err());
        assert!(ItemParams::three_pl(1.0, 0.0, 1.0).is_err());
        assert!(ItemParams::new(1.0, 0.0, 0.2, Model::TwoPL).is_err());
        assert!(ItemParams::two_pl(1.0, 0.0).unwrap().with_scaling(-1.0).is_err());
    }

    #[test]
    fn q41_nodes() {
        let g = QuadratureGrid::q41();
        assert_eq!(g.len(), 41);
        assert_eq!(g.nodes()[0], -4.0);
        assert_eq!(g.nodes()[20], 0.0);
        assert_eq!(g.nodes()[40], 4.0);
        assert_abs_diff_eq!(g.nodes()[1], -3.8, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn small_grids() {
        assert_eq!(make_grid(2, 0.0, 1.0).unwrap().nodes(), &[0.0, 1.0]);
        let g = make_grid(5, -1.0, 1.0).unwrap();
        assert_eq!(g.nodes(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(make_grid(1, 0.0, 1.0).is_err());
        assert!(make_grid(5, 1.0, 1.0).is_err());
    }

    #[test]
    fn normal_weights_symmetric_and_peaked() {
        let g = QuadratureGrid::q41().normal_weights(0.0, 1.0).unwrap();
        let w = g.weights();
        for i in 0..41 {
            assert_abs_diff_eq!(w[i], w[40 - i], epsilon = 1e-15);
        }
        let argmax = (0..41).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
        assert_eq!(argmax, 20);
    }

    #[test]
    fn normal_weights_mean_tracks_mu() {
        // Australia's ability distribution.
        let g = QuadratureGrid::q41().normal_weights(0.773, 0.826).unwrap();
        assert!((g.mean() - 0.773).abs() < 0.01);
        assert!(QuadratureGrid::q41().normal_weights(0.0, 0.0).is_err());
    }

    #[test]
    fn area_examples() {
        let grid = QuadratureGrid::q41();
        let item = ItemParams::two_pl(1.682, 0.275).unwrap();
        assert_eq!(icc_area_difference(&item, &item, &grid), 0.0);
        let shifted = ItemParams::two_pl(1.682, 0.675).unwrap();
        assert_abs_diff_eq!(icc_area_difference(&item, &shifted, &grid), 0.399, epsilon = 0.02);
        let a1 = ItemParams::three_pl(2.995, 0.967, 0.244).unwrap();
        let a2 = ItemParams::three_pl(3.395, 0.967, 0.244).unwrap();
        assert_abs_diff_eq!(icc_area_difference(&a1, &a2, &grid), 0.041, epsilon = 0.02);
    }

    #[test]
    fn mh_delta_examples() {
        let n01 = QuadratureGrid::q41().normal_weights(0.0, 1.0).unwrap();
        let item = ItemParams::two_pl(1.682, 0.275).unwrap();
        let same = mh_delta_effect_size(&item, &item, &n01, &n01).unwrap();
        assert_abs_diff_eq!(same.delta, 0.0, epsilon = 1e-12);
        assert_eq!(same.flag, EtsFlag::A);

        let harder = ItemParams::two_pl(1.682, 0.675).unwrap();
        let eff = mh_delta_effect_size(&item, &harder, &n01, &n01).unwrap();
        // Constant log-odds gap a * 0.4 for a 2PL b-shift.
        assert_abs_diff_eq!(eff.delta, 2.35 * 0.4 * 1.682, epsilon = 1e-9);
        assert_eq!(eff.flag, EtsFlag::C);

        let i1 = ItemParams::three_pl(1.219, 1.134, 0.299).unwrap();
        let i1a = ItemParams::three_pl(1.619, 1.134, 0.299).unwrap();
        assert_eq!(mh_delta_effect_size(&i1, &i1a, &n01, &n01).unwrap().flag, EtsFlag::A);
    }

    #[test]
    fn mh_delta_degenerate_populations() {
        let grid = make_grid(2, 0.0, 1.0).unwrap();
        let empty = QuadratureGrid {
            nodes: grid.nodes.clone(),
            weights: vec![0.0, 0.0],
        };
        let item = ItemParams::two_pl(1.0, 0.0).unwrap();
        assert!(matches!(
            mh_delta_effect_size(&item, &item, &empty, &empty),
            Err(Error::UndefinedOdds(_))
        ));
    }

    #[test]
    fn ets_thresholds() {
        assert_eq!(EtsFlag::classify(0.999), EtsFlag::A);
        assert_eq!(EtsFlag::classify(-1.2), EtsFlag::B);
        assert_eq!(EtsFlag::classify(1.5), EtsFlag::C);
    }

    fn item_strategy() -> impl Strategy<Value = ItemParams> {
        (0.2f64..3.5, -3.0f64..3.0, 0.0f64..0.4).prop_map(|(a, b, c)| {
            if c < 0.05 {
                ItemParams::two_pl(a, b).unwrap()
            } else {
                ItemParams::three_pl(a, b, c).unwrap()
            }
        })
    }

    proptest! {
        #[test]
        fn icc_monotone_and_bounded(item in item_strategy(), t in -6.0f64..6.0, dt in 0.01f64..2.0) {
            let (p, q) = (icc(&item, t), icc(&item, t + dt));
            prop_assert!(q >= p);
            prop_assert!(p >= item.c && p <= 1.0);
            prop_assert!((icc(&item, item.b) - (item.c + (1.0 - item.c) / 2.0)).abs() < 1e-12);
        }

        #[test]
        fn discrimination_sharpens_around_difficulty(item in item_strategy(), off in 0.05f64..3.0, da in 0.05f64..1.0) {
            let sharper = ItemParams { a: item.a + da, ..item };
            prop_assert!(icc(&sharper, item.b + off) >= icc(&item, item.b + off));
            prop_assert!(icc(&sharper, item.b - off) <= icc(&item, item.b - off));
        }

        #[test]
        fn area_symmetric(i1 in item_strategy(), i2 in item_strategy()) {
            let grid = QuadratureGrid::q41();
            let d = icc_area_difference(&i1, &i2, &grid);
            prop_assert_eq!(d, icc_area_difference(&i2, &i1, &grid));
            prop_assert!(d >= 0.0);
        }

        #[test]
        fn harder_item_gives_positive_delta(item in item_strategy(), shift in 0.05f64..1.0) {
            let n01 = QuadratureGrid::q41().normal_weights(0.0, 1.0).unwrap();
            let harder = ItemParams { b: item.b + shift, ..item };
            let eff = mh_delta_effect_size(&item, &harder, &n01, &n01).unwrap();
            prop_assert!(eff.delta > 0.0);
        }

        #[test]
        fn normal_weight_argmax_follows_mu(s in -2.5f64..2.5) {
            let grid = QuadratureGrid::q41();
            let w = grid.normal_weights(s, 1.0).unwrap();
            let argmax = (0..41).max_by(|&i, &j| w.weights()[i].total_cmp(&w.weights()[j])).unwrap();
            let nearest = (0..41)
                .min_by(|&i, &j| (grid.nodes()[i] - s).abs().total_cmp(&(grid.nodes()[j] - s).abs()))
                .unwrap();
            prop_assert_eq!(argmax, nearest);
        }
    }
}
