use super::*;

#[test]
fn every_suite_passes_on_honest_models() {
    for suite in Suite::ALL {
        let r = run_suite(suite, 3, false).unwrap();
        assert!(r.passed, "{suite}: {:?}", r.checks);
    }
}

#[test]
fn sabotage_fails_the_symmetry_suites() {
    for suite in [Suite::Equivariance, Suite::Invariance] {
        let r = run_suite(suite, 3, true).unwrap();
        assert!(!r.passed, "{suite}");
        assert!(r.checks.iter().all(|c| !c.passed), "{suite}: {:?}", r.checks);
    }
}

#[test]
fn suite_names_round_trip() {
    for s in Suite::ALL {
        assert_eq!(s.name().parse::<Suite>().unwrap(), s);
    }
    assert!("symmetry".parse::<Suite>().is_err());
}

#[test]
fn nan_metric_fails() {
    assert!(!CheckOutcome::new("x", f64::NAN, 1.0).passed);
    assert!(CheckOutcome::new("x", 1.0, 1.0).passed);
}
