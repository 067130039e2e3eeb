use std::collections::BTreeMap;

use koopman_core::checks::{coordinate_agreement, perturbed_lifted_points, run_checks, weighted_stationarity_worst};
use koopman_core::config::ExperimentConfig;
use koopman_core::dynamics::system_by_name;
use koopman_core::edmd::{build_snapshots, fit, sample_uniform};
use koopman_core::experiments::{dt_order, OrderSettings, RunOptions};
use koopman_core::manifold::{geometric_metric, projection_bound_check, Projector, REFERENCE_TOL};
use koopman_core::{ClosestPointConfig, Dictionary, DynamicalSystem, KoopmanApproximation, Metric, SnapshotSet};

fn pendulum_v3(m: usize) -> (DynamicalSystem, SnapshotSet, KoopmanApproximation) {
    let sys = system_by_name("pendulum", &BTreeMap::new()).unwrap();
    let dict = Dictionary::monomial(3, 2, &[]).unwrap();
    let pts = sample_uniform(sys.domain(), m, 42);
    let snaps = build_snapshots(&sys, &pts, 0.01, REFERENCE_TOL, false).unwrap();
    let k = fit(&snaps, &dict, 0.0).unwrap();
    (sys, snaps, k)
}

#[test]
fn bound_holds_trivially_on_an_invariant_dictionary() {
    let sys = system_by_name("example1", &BTreeMap::new()).unwrap();
    let dict = Dictionary::from_exponents(2, vec![vec![1, 0], vec![0, 1], vec![2, 0]]).unwrap();
    let pts = sample_uniform(sys.domain(), 2000, 1);
    let snaps = build_snapshots(&sys, &pts, 0.1, REFERENCE_TOL, false).unwrap();
    let k = fit(&snaps, &dict, 0.0).unwrap();
    let w = Metric::identity(3);
    let projector = Projector::closest_point(w.clone(), ClosestPointConfig::new(sys.inflated_domain()), "identity");
    let report = projection_bound_check(&k, &w, &projector, &sample_uniform(sys.domain(), 100, 2), &sys).unwrap();
    assert!(report.ok());
    assert_eq!(report.unconverged, 0);
    // K̂Ψ(x) already lies on M, so both sides vanish to rounding.
    assert!(report.max_ratio <= 1.0 || report.max_ratio.is_nan());
}

#[test]
fn geometric_bound_has_no_violations() {
    let (sys, snaps, k) = pendulum_v3(10_000);
    let w = geometric_metric(&k, &snaps).unwrap();
    let projector = Projector::closest_point(w.clone(), ClosestPointConfig::new(sys.inflated_domain()), "geometric");
    let report = projection_bound_check(&k, &w, &projector, &sample_uniform(sys.domain(), 500, 7), &sys).unwrap();
    assert_eq!(report.checked, 500);
    assert!(report.ok(), "{:?}", report.violations.first());
    assert_eq!(report.unconverged, 0);
    assert!(report.max_ratio < 1.0);
}

#[test]
fn single_iteration_solver_reports_nonconvergence() {
    let (sys, snaps, k) = pendulum_v3(5_000);
    let w = geometric_metric(&k, &snaps).unwrap();
    let cfg = ClosestPointConfig { max_iters: 1, warm_start: false, ..ClosestPointConfig::new(sys.inflated_domain()) };
    let projector = Projector::closest_point(w.clone(), cfg, "geometric");
    let report = projection_bound_check(&k, &w, &projector, &sample_uniform(sys.domain(), 200, 7), &sys).unwrap();
    assert!(report.unconverged > 0);
    assert!(report.violations.iter().all(|v| !v.converged));
}

#[test]
fn check_suite_reports_nonconvergence_context() {
    let cfg = ExperimentConfig::from_toml(
        "[edmd]\nm = 3000\n[projection]\nprojectors = [\"geometric\"]\nmax_iters = 1\nwarm_start = false\n\
         [evaluation]\ncheck_points = 200",
    )
    .unwrap();
    let outcomes = run_checks(&cfg, false).unwrap();
    let bound = outcomes.iter().find(|o| o.name.starts_with("projection_bound")).unwrap();
    assert!(bound.detail.contains("did not converge"), "{bound}");
}

#[test]
fn default_check_suite_passes() {
    let outcomes = run_checks(&ExperimentConfig::default(), false).unwrap();
    for o in &outcomes {
        assert!(o.passed, "{o}");
    }
    assert!(outcomes.iter().any(|o| o.name == "coordinate_equals_closest_point"));
}

#[test]
fn coordinate_projection_is_closest_point_under_coordinate_metric() {
    let sys = system_by_name("duffing", &BTreeMap::new()).unwrap();
    for degree in [2, 3, 5] {
        let dict = Dictionary::monomial(degree, 2, &[]).unwrap();
        let pts = perturbed_lifted_points(&dict, sys.domain(), 100, 0.3, 11);
        let worst = coordinate_agreement(&dict, &pts, &ClosestPointConfig::new(sys.inflated_domain())).unwrap();
        assert!(worst <= 1e-6, "degree {degree}: {worst:e}");
    }
}

#[test]
fn least_squares_fit_is_stationary_for_every_weight() {
    let (_, snaps, k) = pendulum_v3(3_000);
    assert!(weighted_stationarity_worst(&k, &snaps, 20, 5) <= 1e-8);
}

#[test]
fn one_step_error_is_at_least_second_order_in_dt() {
    let opts = RunOptions { m: 4000, ..RunOptions::default() };
    let r = dt_order(&opts, &OrderSettings::default()).unwrap();
    assert!(r.max_errors.windows(2).all(|w| w[0] < w[1]), "{:?}", r.max_errors);
    assert!(r.slope >= 1.7, "slope {}", r.slope);
}
