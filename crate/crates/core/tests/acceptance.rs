//! One pass/fail line per acceptance criterion.
//!
//! The simulation-backed criteria share a single resumable store under the
//! cargo target tmpdir, so a rerun only computes what is missing.

use std::sync::OnceLock;

use mgdif::booklet::Booklet;
use mgdif::harness::acceptance::{AcceptanceRun, CriterionOutcome};
use mgdif::harness::MetricsCell;

fn run() -> &'static AcceptanceRun {
    static RUN: OnceLock<AcceptanceRun> = OnceLock::new();
    RUN.get_or_init(|| AcceptanceRun::new(std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")))
}

fn metrics() -> &'static [MetricsCell] {
    static METRICS: OnceLock<Vec<MetricsCell>> = OnceLock::new();
    METRICS.get_or_init(|| run().simulate(&Booklet::timss_2019()).expect("acceptance simulations"))
}

fn check(outcome: CriterionOutcome) {
    println!("{outcome}");
    assert!(outcome.passed, "{outcome}");
}

fn simulated(id: u8) {
    check(run().criterion(id, metrics(), &Booklet::timss_2019()));
}

#[test]
fn rmsd_fixed_cutoff_type1() {
    simulated(1);
}

#[test]
fn rmsd_predicted_cutoff_type1() {
    simulated(2);
}

#[test]
fn gmh_type1() {
    simulated(3);
}

#[test]
fn wald1_and_glr_type1_grow_with_groups() {
    simulated(4);
}

#[test]
fn dif_in_a_power_is_low() {
    simulated(5);
}

#[test]
fn rmsd_power_pattern_for_dif_in_b() {
    simulated(6);
}

#[test]
fn effect_size_table() {
    check(run().criterion(7, &[], &Booklet::timss_2019()));
}

#[test]
fn oracle_equivalences() {
    check(run().criterion(8, &[], &Booklet::timss_2019()));
}

#[test]
fn property_suites() {
    check(run().criterion(9, &[], &Booklet::timss_2019()));
}
