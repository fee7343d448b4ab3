mod common;

use common::{duplicate_group, invariant, simulate, spread_2pl};
use mgdif::booklet::Booklet;
use mgdif::dif::rmsd::{pseudo_observed_icc, rmsd_table};
use mgdif::dif::scorebased::{glr_test, matching_scores, Adjustment};
use mgdif::dif::wald::{wald1_test, wald2_identify_anchors};
use mgdif::dif::{AnchorSet, AnchorSource};
use mgdif::estimation::{calibrate, AnalysisSetup};
use mgdif::irt::{ItemParams, Model};
use mgdif::simgen::{generate, ConditionSpec, Scenario, DEFAULT_SEED};

#[test]
fn pseudo_counts_track_the_model_curve() {
    let truth = spread_2pl(15);
    let data = simulate(&invariant(&truth, 2), 5000, &[0.0, 0.0], 5);
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 15]);
    let fit = calibrate(&data, &setup.concurrent(2)).unwrap();
    let weights = fit.group_weights(0);
    for j in [0, 7, 14] {
        let pseudo = pseudo_observed_icc(&fit, &data, j, 0).unwrap();
        let worst = fit
            .grid
            .nodes()
            .iter()
            .zip(&pseudo)
            .zip(weights.weights())
            .filter(|(_, w)| **w > 1e-3)
            .map(|((t, p), _)| (p - fit.params(j, 0).prob(*t)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.03, "item {j}: {worst}");
    }
}

#[test]
fn duplicated_groups_have_equal_rmsd() {
    let data = duplicate_group(&simulate(&invariant(&spread_2pl(8), 1), 400, &[0.0], 9));
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 8]);
    let fit = calibrate(&data, &setup.concurrent(2)).unwrap();
    for row in rmsd_table(&fit, &data).unwrap() {
        assert!((row[0] - row[1]).abs() < 1e-5, "{row:?}");
    }
}

#[test]
fn identical_groups_flag_nothing_in_wald2() {
    let data = duplicate_group(&simulate(&invariant(&spread_2pl(10), 1), 500, &[0.0], 13));
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 10]);
    let w2 = wald2_identify_anchors(&data, &setup, 0.05).unwrap();
    assert!(w2.flagged.iter().all(|f| !f));
    assert!(w2.tests.iter().flatten().all(|t| t.p_value > 0.9));
    // With nothing flagged every item would be an anchor, so the fallback applies.
    assert_eq!(w2.anchors.source, AnchorSource::FallbackSecondHalf);
}

#[test]
fn wald2_keeps_most_items_as_anchors_without_dif() {
    let booklet = Booklet::timss_2019();
    let setup = AnalysisSetup::for_booklet(&booklet);
    let cond = ConditionSpec::dif_free(2, Scenario::LargeLow, DEFAULT_SEED).unwrap();
    let reps = 10;
    let good = (0..reps)
        .filter(|&rep| {
            let ds = generate(&cond, rep, &booklet).unwrap();
            let w2 = wald2_identify_anchors(&ds.data, &setup, 0.05).unwrap();
            2 * w2.anchors.items.len() >= ds.data.n_items()
        })
        .count();
    assert!(good * 10 >= reps * 9, "{good} of {reps}");
}

#[test]
fn wald1_detects_a_large_b_shift() {
    let base = spread_2pl(12);
    let mut items = invariant(&base, 2);
    items[2][1] = ItemParams::two_pl(base[2].a, base[2].b + 0.4).unwrap();
    let setup = AnalysisSetup::new(vec![Model::TwoPL; 12]);
    let reps = 10;
    let hits = (0..reps)
        .filter(|&rep| {
            let data = simulate(&items, 2000, &[0.0, 0.0], 100 + rep);
            let v = wald1_test(&data, &setup, &AnchorSet::second_half(12), 0.05, None).unwrap();
            v.item(2).unwrap().uniform.unwrap().p_value < 0.05
        })
        .count();
    assert!(hits as u64 * 10 >= reps * 8, "{hits} of {reps}");
}

#[test]
fn matching_score_ranges() {
    let data = simulate(&invariant(&spread_2pl(29), 2), 200, &[0.0, 0.0], 1);
    let fallback = AnchorSet::second_half(29);
    for j in 0..14 {
        let s = matching_scores(&data, &fallback, j).unwrap();
        assert_eq!(s.max_score, 16);
        assert!(s.scores.iter().all(|&x| x <= 16));
    }
    let fourteen = AnchorSet::new((15..29).collect(), AnchorSource::Supplied, 29).unwrap();
    assert_eq!(matching_scores(&data, &fourteen, 0).unwrap().max_score, 15);

    let n = data.n_persons();
    let zeros = mgdif::data::ResponseMatrix::new(
        data.person_ids().to_vec(),
        data.group_names().to_vec(),
        data.group_of_person().to_vec(),
        data.item_ids().to_vec(),
        vec![Some(false); n * 29],
    )
    .unwrap();
    assert!(matching_scores(&zeros, &fallback, 0).unwrap().scores.iter().all(|&x| x == 0));
}

#[test]
fn glr_sees_no_difference_between_copies() {
    let data = duplicate_group(&simulate(&invariant(&spread_2pl(12), 1), 400, &[0.0], 21));
    let (uni, non) = glr_test(&data, &AnchorSet::second_half(12), 0.05, Adjustment::None);
    for v in [uni, non] {
        for it in &v.items {
            let t = it.test.unwrap();
            assert!(t.p_value > 0.5, "item {} p {}", it.item, t.p_value);
            assert!(!it.flagged);
        }
    }
}
