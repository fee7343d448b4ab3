mod common;

use common::{invariant, simulate, spread_2pl};
use mgdif::estimation::{calibrate, AnalysisSetup, Constraint, GroupDist};
use mgdif::irt::{ItemParams, Model};

const STANDARD: GroupDist = GroupDist::Fixed { mu: 0.0, sigma: 1.0 };

#[test]
fn difficulty_recovery_at_large_n() {
    let truth = spread_2pl(12);
    let data = simulate(&invariant(&truth, 1), 5000, &[0.0], 41);
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 12]);
    let fit = calibrate(&data, &setup.spec(vec![Constraint::SharedAcrossGroups; 12], vec![STANDARD])).unwrap();
    assert!(fit.converged);
    let mae = truth.iter().enumerate().map(|(j, t)| (fit.params(j, 0).b - t.b).abs()).sum::<f64>() / 12.0;
    assert!(mae < 0.1, "b MAE {mae}");
}

#[test]
fn single_item_recovered_within_a_short_test() {
    let mut truth = spread_2pl(8);
    truth[3] = ItemParams::two_pl(1.5, 0.0).unwrap();
    let data = simulate(&invariant(&truth, 1), 5000, &[0.0], 7);
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 8]);
    let fit = calibrate(&data, &setup.spec(vec![Constraint::SharedAcrossGroups; 8], vec![STANDARD])).unwrap();
    let est = fit.params(3, 0);
    assert!((est.a - 1.5).abs() < 0.15, "a = {}", est.a);
    assert!(est.b.abs() < 0.1, "b = {}", est.b);
}

#[test]
fn identical_groups_give_identical_estimates() {
    let data = common::duplicate_group(&simulate(&invariant(&spread_2pl(6), 1), 300, &[0.0], 3));
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 6]);
    let fit = calibrate(&data, &setup.spec(vec![Constraint::SharedAcrossGroups; 6], vec![STANDARD; 2])).unwrap();
    for j in 0..6 {
        assert_eq!(fit.params(j, 0), fit.params(j, 1));
    }
}

#[test]
fn focal_mean_and_sd_are_recovered() {
    let data = simulate(&invariant(&spread_2pl(20), 2), 3000, &[0.0, 0.6], 11);
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 20]);
    let fit = calibrate(&data, &setup.concurrent(2)).unwrap();
    let focal = fit.group_dists[1];
    assert!((focal.mu - 0.6).abs() < 0.1, "mu {}", focal.mu);
    assert!((focal.sigma - 1.0).abs() < 0.1, "sigma {}", focal.sigma);
}
