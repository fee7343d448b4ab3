//! Replication datasets for the DIF-free and DIF-contaminated studies.
//!
//! Every replication is regenerated from its own seed, derived by hashing the
//! condition fingerprint with the replication index, so any cell of a study
//! can be rebuilt in isolation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::booklet::Booklet;
use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::irt::{GroupSpec, ItemParams};

pub const GROUP_COUNTS: [usize; 4] = [2, 5, 10, 15];
pub const DEFAULT_SEED: u64 = 20_190_813;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SmallLow,
    SmallHigh,
    LargeLow,
    LargeHigh,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::SmallLow,
        Scenario::SmallHigh,
        Scenario::LargeLow,
        Scenario::LargeHigh,
    ];

    /// The focal group that carries DIF in this scenario.
    pub fn dif_group(self) -> &'static str {
        match self {
            Scenario::SmallLow => "Kuwait",
            Scenario::SmallHigh => "Romania",
            Scenario::LargeLow => "Morocco",
            Scenario::LargeHigh => "Australia",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Study {
    #[serde(rename = "dif_free")]
    DifFree,
    #[serde(rename = "dif_a")]
    DifInA,
    #[serde(rename = "dif_b")]
    DifInB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifProportion {
    None,
    P20,
    P30,
}

impl DifProportion {
    pub fn n_items(self) -> usize {
        match self {
            DifProportion::None => 0,
            DifProportion::P20 => 6,
            DifProportion::P30 => 9,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)*
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(Scenario { SmallLow => "small_low", SmallHigh => "small_high", LargeLow => "large_low", LargeHigh => "large_high" });
text_enum!(Study { DifFree => "dif_free", DifInA => "dif_a", DifInB => "dif_b" });
text_enum!(DifProportion { None => "none", P20 => "p20", P30 => "p30" });

/// One cell of the simulation design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub n_groups: usize,
    pub scenario: Scenario,
    pub study: Study,
    pub dif_proportion: DifProportion,
    pub seed: u64,
}

impl ConditionSpec {
    pub fn new(
        n_groups: usize,
        scenario: Scenario,
        study: Study,
        dif_proportion: DifProportion,
        seed: u64,
    ) -> Result<Self> {
        let cond = ConditionSpec {
            n_groups,
            scenario,
            study,
            dif_proportion,
            seed,
        };
        cond.validate()?;
        Ok(cond)
    }

    pub fn dif_free(n_groups: usize, scenario: Scenario, seed: u64) -> Result<Self> {
        Self::new(n_groups, scenario, Study::DifFree, DifProportion::None, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 {
            return Err(Error::Config("a condition needs at least two groups".into()));
        }
        if (self.study == Study::DifFree) != (self.dif_proportion == DifProportion::None) {
            return Err(Error::Config(
                "DIF-free conditions take no DIF proportion and DIF conditions need one".into(),
            ));
        }
        Ok(())
    }

    /// Stable text key; also the seed-derivation input.
    pub fn fingerprint(&self) -> String {
        format!(
            "g{}-{}-{}-{}-s{}",
            self.n_groups, self.scenario, self.study, self.dif_proportion, self.seed
        )
    }

    /// The matching DIF-free condition (same groups, scenario and seed).
    pub fn dif_free_counterpart(&self) -> Self {
        ConditionSpec {
            study: Study::DifFree,
            dif_proportion: DifProportion::None,
            ..*self
        }
    }

    pub fn replication_seed(&self, rep: usize) -> u64 {
        hash_seed(&format!("{}#rep{}", self.fingerprint(), rep))
    }

    fn roster_seed(&self) -> u64 {
        hash_seed(&format!("g{}-{}-s{}#roster", self.n_groups, self.scenario, self.seed))
    }
}

impl FromStr for ConditionSpec {
    type Err = Error;

    /// Parses a fingerprint such as `g5-small_low-dif_b-p20-s7`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed condition key `{s}`"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        let [g, scenario, study, prop, seed] = parts[..] else { return Err(bad()) };
        let n_groups = g.strip_prefix('g').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let seed = seed.strip_prefix('s').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        ConditionSpec::new(n_groups, scenario.parse()?, study.parse()?, prop.parse()?, seed)
    }
}

fn hash_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupRole {
    Reference,
    DifFocal,
    CleanFocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub group: GroupSpec,
    pub role: GroupRole,
}

/// Reference first, then the scenario's DIF focal group, then clean focal
/// groups alternating between below- and above-zero mean ability.
pub fn build_roster(cond: &ConditionSpec, booklet: &Booklet) -> Result<Vec<RosterEntry>> {
    cond.validate()?;
    let reference = booklet.reference_group().clone();
    let dif = booklet.group(cond.scenario.dif_group())?.clone();
    let pool: Vec<&GroupSpec> = booklet
        .groups
        .iter()
        .filter(|g| g.n > 300 && g.name != reference.name && g.name != dif.name)
        .collect();
    let clean_needed = cond.n_groups - 2;
    if clean_needed > pool.len() {
        return Err(Error::Config(format!(
            "{} groups requested but only {} are available",
            cond.n_groups,
            pool.len() + 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cond.roster_seed());
    let mut low: Vec<&GroupSpec> = pool.iter().copied().filter(|g| g.mu < 0.0).collect();
    let mut high: Vec<&GroupSpec> = pool.iter().copied().filter(|g| g.mu >= 0.0).collect();
    low.shuffle(&mut rng);
    high.shuffle(&mut rng);
    let mut take_high = dif.mu < 0.0;
    let mut roster = vec![
        RosterEntry {
            group: reference,
            role: GroupRole::Reference,
        },
        RosterEntry {
            group: dif,
            role: GroupRole::DifFocal,
        },
    ];
    for _ in 0..clean_needed {
        let next = match (take_high, high.is_empty(), low.is_empty()) {
            (true, false, _) | (false, _, true) => high.pop(),
            _ => low.pop(),
        }
        .expect("pool size checked above");
        roster.push(RosterEntry {
            group: next.clone(),
            role: GroupRole::CleanFocal,
        });
        take_high = !take_high;
    }
    Ok(roster)
}

/// Per item, per roster group parameters plus the sorted DIF item indices.
/// The DIF focal group sits at roster index 1.
pub fn inject_dif<R: Rng + ?Sized>(
    items: &[ItemParams],
    cond: &ConditionSpec,
    shift: f64,
    rng: &mut R,
) -> (Vec<Vec<ItemParams>>, Vec<usize>) {
    let mut per_group: Vec<Vec<ItemParams>> =
        items.iter().map(|p| vec![*p; cond.n_groups]).collect();
    if cond.study == Study::DifFree {
        return (per_group, Vec::new());
    }
    let indices: Vec<usize> = (0..items.len()).collect();
    let truth: BTreeSet<usize> = indices
        .choose_multiple(rng, cond.dif_proportion.n_items().min(items.len()))
        .copied()
        .collect();
    for &j in &truth {
        let p = &mut per_group[j][1];
        match cond.study {
            Study::DifInA => p.a += shift,
            Study::DifInB => p.b += shift,
            Study::DifFree => unreachable!(),
        }
    }
    (per_group, truth.into_iter().collect())
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub condition: ConditionSpec,
    pub rep: usize,
    pub data: ResponseMatrix,
    /// Sorted indices of items with DIF.
    pub truth: Vec<usize>,
    pub roster: Vec<RosterEntry>,
    pub item_params: Vec<Vec<ItemParams>>,
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    condition: String,
    rep: usize,
    seed: u64,
    truth: Vec<&'a str>,
    roster: &'a [RosterEntry],
}

impl GeneratedDataset {
    pub fn truth_ids(&self) -> Vec<&str> {
        self.truth
            .iter()
            .map(|&j| self.data.item_ids()[j].as_str())
            .collect()
    }

    /// JSON sidecar with the DIF items and roster.
    pub fn truth_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TruthSidecar {
            condition: self.condition.fingerprint(),
            rep: self.rep,
            seed: self.condition.replication_seed(self.rep),
            truth: self.truth_ids(),
            roster: &self.roster,
        })?)
    }
}

/// Builds replication `rep` of `cond`: DIF items first, then abilities and
/// responses group by group.
pub fn generate(cond: &ConditionSpec, rep: usize, booklet: &Booklet) -> Result<GeneratedDataset> {
    let roster = build_roster(cond, booklet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cond.replication_seed(rep));
    let (item_params, truth) = inject_dif(&booklet.item_params(), cond, booklet.dif_shift, &mut rng);
    let groups: Vec<(usize, f64, f64)> = roster
        .iter()
        .map(|r| (r.group.n, r.group.mu, r.group.sigma))
        .collect();
    let names = roster.iter().map(|r| r.group.name.clone()).collect();
    let data = draw_responses(&item_params, &groups, names, booklet.item_ids(), &mut rng)?;
    Ok(GeneratedDataset {
        condition: *cond,
        rep,
        data,
        truth,
        roster,
        item_params,
    })
}

fn draw_responses<R: Rng + ?Sized>(
    item_params: &[Vec<ItemParams>],
    groups: &[(usize, f64, f64)],
    group_names: Vec<String>,
    item_ids: Vec<String>,
    rng: &mut R,
) -> Result<ResponseMatrix> {
    let total: usize = groups.iter().map(|g| g.0).sum();
    let mut person_ids = Vec::with_capacity(total);
    let mut group_of_person = Vec::with_capacity(total);
    let mut responses = Vec::with_capacity(total * item_params.len());
    for (g, &(n, mu, sigma)) in groups.iter().enumerate() {
        let dist = Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..n {
            let theta = dist.sample(rng);
            person_ids.push(format!("p{:05}", person_ids.len() + 1));
            group_of_person.push(g);
            for item in item_params {
                responses.push(Some(rng.random::<f64>() < item[g].prob(theta)));
            }
        }
    }
    ResponseMatrix::new(person_ids, group_names, group_of_person, item_ids, responses)
}

/// Small synthetic 2PL dataset with standard normal groups, for examples.
pub fn toy_dataset(n_per_group: usize, n_items: usize, n_groups: usize, seed: u64) -> ResponseMatrix {
    let items: Vec<Vec<ItemParams>> = (0..n_items)
        .map(|j| {
            let b = -1.5 + 3.0 * j as f64 / (n_items.max(2) - 1) as f64;
            let a = 0.8 + 0.1 * (j % 5) as f64;
            vec![ItemParams::two_pl(a, b).expect("valid"); n_groups]
        })
        .collect();
    let groups = vec![(n_per_group, 0.0, 1.0); n_groups];
    let names = (0..n_groups).map(|g| format!("group{}", g + 1)).collect();
    let ids = (0..n_items).map(|j| format!("item{}", j + 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_responses(&items, &groups, names, ids, &mut rng).expect("toy data is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(n: usize, scenario: Scenario, study: Study, prop: DifProportion) -> ConditionSpec {
        ConditionSpec::new(n, scenario, study, prop, DEFAULT_SEED).unwrap()
    }

    #[test]
    fn fingerprint_round_trips() {
        let c = cond(5, Scenario::LargeHigh, Study::DifInB, DifProportion::P30);
        assert_eq!(c.fingerprint(), "g5-large_high-dif_b-p30-s20190813");
        assert_eq!(c.fingerprint().parse::<ConditionSpec>().unwrap(), c);
        assert!("g5-large_high-dif_b-none-s1".parse::<ConditionSpec>().is_err());
        assert!("g5-nowhere-dif_b-p30-s1".parse::<ConditionSpec>().is_err());
    }

    #[test]
    fn two_group_roster() {
        let b = Booklet::timss_2019();
        let r = build_roster(&cond(2, Scenario::SmallLow, Study::DifFree, DifProportion::None), &b).unwrap();
        let names: Vec<&str> = r.iter().map(|e| e.group.name.as_str()).collect();
        assert_eq!(names, ["Western Cape, RSA", "Kuwait"]);
        assert_eq!(r[1].role, GroupRole::DifFocal);
    }

    #[test]
    fn full_roster_uses_every_group() {
        let b = Booklet::timss_2019();
        let r = build_roster(&cond(15, Scenario::LargeHigh, Study::DifFree, DifProportion::None), &b).unwrap();
        let mut names: Vec<&str> = r.iter().map(|e| e.group.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 15);
        assert!(build_roster(&cond(16, Scenario::LargeHigh, Study::DifFree, DifProportion::None), &b).is_err());
    }

    #[test]
    fn clean_groups_alternate_in_ability() {
        let b = Booklet::timss_2019();
        let r = build_roster(&cond(5, Scenario::SmallLow, Study::DifFree, DifProportion::None), &b).unwrap();
        let signs: Vec<bool> = r[2..].iter().map(|e| e.group.mu >= 0.0).collect();
        assert_eq!(signs, [true, false, true]);
    }

    #[test]
    fn roster_is_shared_across_studies() {
        let b = Booklet::timss_2019();
        let free = build_roster(&cond(10, Scenario::SmallHigh, Study::DifFree, DifProportion::None), &b).unwrap();
        let dif = build_roster(&cond(10, Scenario::SmallHigh, Study::DifInB, DifProportion::P30), &b).unwrap();
        assert_eq!(free, dif);
    }

    #[test]
    fn inject_b_shift() {
        let b = Booklet::timss_2019();
        let c = cond(3, Scenario::SmallLow, Study::DifInB, DifProportion::P20);
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (params, truth) = inject_dif(&b.item_params(), &c, b.dif_shift, &mut rng);
            assert_eq!(truth.len(), 6);
            if truth.contains(&1) {
                assert!((params[1][1].b - 0.760).abs() < 1e-12);
                assert_eq!(params[1][0].b, 0.360);
                assert_eq!(params[1][2].b, 0.360);
                return;
            }
        }
        panic!("item 2 never sampled");
    }

    #[test]
    fn proportions_and_validation() {
        assert_eq!(DifProportion::P30.n_items(), 9);
        assert!(ConditionSpec::new(2, Scenario::SmallLow, Study::DifFree, DifProportion::P20, 1).is_err());
        assert!(ConditionSpec::new(2, Scenario::SmallLow, Study::DifInA, DifProportion::None, 1).is_err());
        assert_eq!("small_high".parse::<Scenario>().unwrap(), Scenario::SmallHigh);
        assert_eq!(Study::DifInB.to_string(), "dif_b");
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let b = Booklet::timss_2019();
        let c = cond(5, Scenario::LargeLow, Study::DifInA, DifProportion::P30);
        let d1 = generate(&c, 3, &b).unwrap();
        let d2 = generate(&c, 3, &b).unwrap();
        assert_eq!(d1.data, d2.data);
        assert_eq!(d1.truth, d2.truth);
        assert_eq!(d1.truth.len(), 9);
        let sizes = d1.data.group_sizes();
        for (entry, n) in d1.roster.iter().zip(sizes) {
            assert_eq!(entry.group.n, n);
        }
        let d3 = generate(&c, 4, &b).unwrap();
        assert_ne!(d1.data, d3.data);
        let json = d1.truth_json().unwrap();
        assert!(json.contains("Morocco"));
    }

    #[test]
    fn dif_free_has_no_truth() {
        let b = Booklet::timss_2019();
        let d = generate(&cond(2, Scenario::SmallHigh, Study::DifFree, DifProportion::None), 0, &b).unwrap();
        assert!(d.truth.is_empty());
    }
}
