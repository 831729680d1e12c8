use nexica::correspond::CorrespondenceCounts;
use nexica::mle::{estimate, gradient, log_likelihood, pair_probabilities, EstimateCase};
use proptest::prelude::*;

fn table() -> impl Strategy<Value = CorrespondenceCounts> {
    (0u64..5000, 0u64..400, 0u64..400, 0u64..400).prop_map(|(a, b, c, d)| CorrespondenceCounts::from_cells(a, b, c, d))
}

fn coarse_best(c: &CorrespondenceCounts) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..=100 {
        for j in 0..=100 {
            let ll = log_likelihood(c, i as f64 / 100.0, j as f64 / 100.0).unwrap();
            best = best.max(ll);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn no_grid_point_beats_the_estimate(c in table()) {
        prop_assume!(c.window > 0);
        let e = estimate(&c).unwrap();
        prop_assume!(e.is_defined());
        prop_assert!((0.0..=1.0).contains(&e.p_s) && (0.0..=1.0).contains(&e.p_c));
        let ll = log_likelihood(&c, e.p_s, e.p_c).unwrap();
        prop_assert!((ll - e.log_likelihood).abs() <= 1e-9 * ll.abs().max(1.0));
        prop_assert!(coarse_best(&c) <= e.log_likelihood + 1e-9 * ll.abs().max(1.0));
    }

    #[test]
    fn scaling_counts_keeps_the_estimate(c in table(), k in 2u64..50) {
        prop_assume!(c.window > 0);
        let (e, s) = (estimate(&c).unwrap(), estimate(&c.scaled(k)).unwrap());
        prop_assert_eq!(e.case, s.case);
        if e.is_defined() {
            prop_assert!((e.p_s - s.p_s).abs() < 1e-12);
            prop_assert!((e.p_c - s.p_c).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_estimates_are_stationary(c in table()) {
        prop_assume!(c.window > 0 && c.a10 > 0);
        let e = estimate(&c).unwrap();
        prop_assume!(e.case == EstimateCase::Interior && e.p_s > 0.0 && e.p_s < 1.0 && e.p_c > 0.0 && e.p_c < 1.0);
        let (gs, gc) = gradient(&c, e.p_s, e.p_c);
        let n = c.window as f64;
        prop_assert!(gs.abs() / n < 1e-8 && gc.abs() / n < 1e-8, "gradient ({gs}, {gc})");
    }

    #[test]
    fn interior_estimates_are_maxima(c in table()) {
        prop_assume!(c.window > 0 && c.a10 > 0 && c.a11 > 0);
        let e = estimate(&c).unwrap();
        prop_assume!(e.case == EstimateCase::Interior && e.p_s > 1e-3 && e.p_s < 1.0 - 1e-3 && e.p_c > 1e-3 && e.p_c < 1.0 - 1e-3);
        let h = 1e-4;
        let ll = |s: f64, c2: f64| log_likelihood(&c, s, c2).unwrap();
        let (s0, c0) = (e.p_s, e.p_c);
        let dss = (ll(s0 + h, c0) - 2.0 * ll(s0, c0) + ll(s0 - h, c0)) / (h * h);
        let dcc = (ll(s0, c0 + h) - 2.0 * ll(s0, c0) + ll(s0, c0 - h)) / (h * h);
        let dsc = (ll(s0 + h, c0 + h) - ll(s0 + h, c0 - h) - ll(s0 - h, c0 + h) + ll(s0 - h, c0 - h)) / (4.0 * h * h);
        prop_assert!(dcc < 0.0, "d2l/dpc2 = {dcc}");
        prop_assert!(dss * dcc - dsc * dsc > 0.0, "hessian determinant {}", dss * dcc - dsc * dsc);
    }

    #[test]
    fn probabilities_sum_to_one(ps in 0.0..=1.0f64, pc in 0.0..=1.0f64) {
        let f = pair_probabilities(ps, pc).unwrap();
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn undefined_when_cause_is_constant() {
    for c in [CorrespondenceCounts::from_cells(10, 3, 0, 0), CorrespondenceCounts::from_cells(0, 0, 4, 2)] {
        let e = estimate(&c).unwrap();
        assert_eq!(e.case, EstimateCase::Undefined);
        assert!(e.p_s.is_nan() && e.p_c.is_nan() && e.log_likelihood.is_nan());
    }
}

#[test]
fn empty_table_is_an_error() {
    assert!(estimate(&CorrespondenceCounts::from_cells(0, 0, 0, 0)).is_err());
}

#[test]
fn out_of_range_probability_is_an_error() {
    assert!(pair_probabilities(1.2, 0.5).is_err());
    assert!(pair_probabilities(0.5, -0.1).is_err());
}

#[test]
fn recovers_a_planted_probability_from_expected_counts() {
    let (ps, pc) = (0.07, 0.45);
    let f = pair_probabilities(ps, pc).unwrap();
    let n = 1e9;
    let c = CorrespondenceCounts::from_cells(
        (f[0] * n).round() as u64,
        (f[1] * n).round() as u64,
        (f[2] * n).round() as u64,
        (f[3] * n).round() as u64,
    );
    let e = estimate(&c).unwrap();
    assert_eq!(e.case, EstimateCase::Interior);
    assert!((e.p_s - ps).abs() < 1e-6 && (e.p_c - pc).abs() < 1e-6);
}

#[test]
fn negative_raw_pc_clamps_to_zero() {
    // effect fires less often after a cause event than overall
    let c = CorrespondenceCounts::from_cells(800, 100, 95, 5);
    let e = estimate(&c).unwrap();
    assert_eq!(e.case, EstimateCase::BoundaryPc0);
    assert_eq!(e.p_c, 0.0);
    assert!(e.p_c_raw.unwrap() < 0.0);
}
