use chrono::DateTime;
use nexica::events::{detect_slowdowns, extract_events, leading_edges, median_week_profile, EventSeries};
use nexica::ingest::SpeedSeries;
use proptest::prelude::*;

fn runs(u: &[bool]) -> usize {
    let mut n = 0;
    let mut inside = false;
    for &b in u {
        if b && !inside {
            n += 1;
        }
        inside = b;
    }
    n
}

fn speed_series() -> impl Strategy<Value = SpeedSeries> {
    (1usize..4, 0.0..0.3f64).prop_flat_map(|(weeks, imputed_rate)| {
        let n = weeks * 2016 + 37;
        (
            proptest::collection::vec(20.0..70.0f64, n),
            proptest::collection::vec(proptest::bool::weighted(imputed_rate.max(0.001)), n),
        )
            .prop_map(|(speeds, imputed)| {
                let start = DateTime::parse_from_rfc3339("2024-03-06T13:05:00-08:00").unwrap();
                SpeedSeries::new("S", start, speeds, imputed).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn event_count_is_run_count(u in proptest::collection::vec(any::<bool>(), 0..300)) {
        let v = leading_edges(&u);
        prop_assert_eq!(v.iter().filter(|&&b| b).count(), runs(&u));
        for j in 0..u.len() {
            if v[j] {
                prop_assert!(u[j] && (j == 0 || !u[j - 1]));
            }
        }
        prop_assert_eq!(leading_edges(&v), v);
    }

    #[test]
    fn extraction_invariants(s in speed_series(), alpha in 0.05..0.6f64) {
        let (ev, profile) = extract_events(&s, alpha).unwrap();
        prop_assert_eq!(profile.medians().len(), 2016);
        let u = ev.slowdown_mask();
        for j in 0..ev.len() {
            if ev.events()[j] {
                prop_assert!(u[j] && (j == 0 || !u[j - 1]));
                prop_assert!(!s.imputed()[j]);
            }
            if u[j] {
                prop_assert!(!s.imputed()[j]);
            }
        }
        prop_assert!(ev.count() <= u.iter().filter(|&&b| b).count());
    }

    #[test]
    fn raising_alpha_never_adds_slowdowns(s in speed_series(), a in 0.05..0.5f64, d in 0.0..0.3f64) {
        let profile = median_week_profile(&s);
        let low = detect_slowdowns(&s, &profile, a).unwrap();
        let high = detect_slowdowns(&s, &profile, a + d).unwrap();
        prop_assert!(high.iter().filter(|&&b| b).count() <= low.iter().filter(|&&b| b).count());
        prop_assert!(high.iter().zip(&low).all(|(&h, &l)| !h || l));
    }
}

#[test]
fn profile_is_lower_median_of_measured_samples() {
    let start = DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap();
    let mut speeds = vec![50.0; 2016 * 4];
    let mut imputed = vec![false; 2016 * 4];
    for (w, v) in [60.0, 64.0, 62.0, 10.0].into_iter().enumerate() {
        speeds[w * 2016 + 5] = v;
    }
    imputed[3 * 2016 + 5] = true;
    speeds[7] = 40.0;
    speeds[2016 + 7] = 44.0;
    let s = SpeedSeries::new("A", start, speeds, imputed).unwrap();
    let p = median_week_profile(&s);
    assert_eq!(p.get(5), Some(62.0));
    // {40, 44, 50, 50}: lower middle
    assert_eq!(p.get(7), Some(44.0));
}

#[test]
fn from_events_has_no_mask_of_its_own() {
    let e = EventSeries::from_events("X", vec![true, false, true]);
    assert_eq!(e.count(), 2);
    assert_eq!(e.alpha(), None);
}
