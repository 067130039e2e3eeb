//! Numerical checks of the structural properties a fitted model must have:
//! normal-equation stationarity, weighted stationarity for arbitrary
//! weights, agreement of the coordinate projection with the closest point
//! under the coordinate metric, the factor-two bound of closest-point
//! projections, the metric condition, and Jacobian consistency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, SigmaData};
use crate::dictionary::Dictionary;
use crate::dynamics::{DynamicalSystem, Domain};
use crate::edmd::{build_snapshots, fit_with, gram_matrices, sample_uniform, weighted_stationarity};
use crate::manifold::{
    check_metric_condition, project_closest, project_coordinate, projection_bound_check, ClosestPointConfig, Metric,
    Projector, ProjectorSpec, ReconstructionMap,
};
use crate::{Error, KoopmanApproximation, Matrix, Result, SnapshotSet, Vector};

pub const STATIONARITY_TOL: f64 = 1e-8;
pub const COORDINATE_AGREEMENT_TOL: f64 = 1e-6;
pub const JACOBIAN_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// A random symmetric positive-semidefinite `n×n` matrix `AAᵀ` with `A` of
/// rank `rank`, normal-ish entries.
pub fn random_psd(n: usize, rank: usize, rng: &mut impl Rng) -> Matrix {
    let a = Matrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose()
}

/// `‖K(G_X + ridge/m·I) − G_YX‖_F` relative to the operand norms.
pub fn normal_equation_residual(k: &KoopmanApproximation, snapshots: &SnapshotSet) -> f64 {
    let (gx, gyx) = regularized_grams(k, snapshots);
    (&k.k * &gx - &gyx).norm() / (k.k.norm() * gx.norm() + gyx.norm())
}

fn regularized_grams(k: &KoopmanApproximation, snapshots: &SnapshotSet) -> (Matrix, Matrix) {
    let (mut gx, gyx) = gram_matrices(snapshots, &k.dictionary);
    let shift = k.ridge / snapshots.len() as f64;
    for i in 0..gx.nrows() {
        gx[(i, i)] += shift;
    }
    (gx, gyx)
}

/// Largest relative stationarity residual over `count` random psd weights.
pub fn weighted_stationarity_worst(k: &KoopmanApproximation, snapshots: &SnapshotSet, count: usize, seed: u64) -> f64 {
    let (gx, gyx) = regularized_grams(k, snapshots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k.n();
    (0..count)
        .map(|i| {
            let rank = 1 + (i * 7919) % n;
            weighted_stationarity(&k.k, &gx, &gyx, &random_psd(n, rank, &mut rng))
        })
        .fold(0.0, f64::max)
}

/// Largest `‖J − J_fd‖_F / max(‖J‖_F, 1)` over the points, central differences.
pub fn jacobian_fd_error(dictionary: &Dictionary, points: &[Vector]) -> f64 {
    let d = dictionary.dim();
    points
        .iter()
        .map(|x| {
            let j = dictionary.jacobian(x.as_slice());
            let mut fd = Matrix::zeros(dictionary.len(), d);
            for k in 0..d {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[k] += FD_STEP;
                minus[k] -= FD_STEP;
                let col = (dictionary.evaluate(plus.as_slice()) - dictionary.evaluate(minus.as_slice())) / (2.0 * FD_STEP);
                fd.set_column(k, &col);
            }
            (&j - fd).norm() / j.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Lifted points `Ψ(x₀) + δ`, `x₀` uniform on `domain`, `δ` in a random direction with `‖δ‖ ≤ radius`.
pub fn perturbed_lifted_points(dictionary: &Dictionary, domain: &Domain, count: usize, radius: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_uniform(domain, count, seed.wrapping_add(1))
        .into_iter()
        .map(|x| {
            let dir = Vector::from_fn(dictionary.len(), |_, _| rng.random_range(-1.0..1.0));
            let scale = radius * rng.random_range(0.0..1.0) / dir.norm().max(f64::MIN_POSITIVE);
            dictionary.evaluate(x.as_slice()) + dir * scale
        })
        .collect()
}

/// Largest state discrepancy between the coordinate projection and the
/// closest point under the coordinate metric.
pub fn coordinate_agreement(dictionary: &Dictionary, points: &[Vector], config: &ClosestPointConfig) -> Result<f64> {
    use rayon::prelude::*;
    let recon = ReconstructionMap::coordinates(dictionary)?;
    let c = Metric::coordinate(dictionary)?;
    let diffs: Vec<f64> = points
        .par_iter()
        .map(|z| -> Result<f64> {
            let (x, _) = project_coordinate(dictionary, &recon, z)?;
            let cp = project_closest(dictionary, &c, z, config);
            Ok((cp.x - x).norm())
        })
        .collect::<Result<_>>()?;
    Ok(diffs.into_iter().fold(0.0, f64::max))
}

/// Exact Koopman generator of `example1` on the invariant dictionary
/// `{x, v, x²}` (in any order, nothing else): `d/dt Ψ = AΨ`.
pub fn example1_generator(system: &DynamicalSystem, dictionary: &Dictionary) -> Result<Matrix> {
    if system.name() != "example1" {
        return Err(Error::InvalidArgument(format!("no exact generator for system `{}`", system.name())));
    }
    let lambda = system.params()["lambda"];
    let idx = |e: [u32; 2]| dictionary.index_of_exponent(&e);
    let (Some(ix), Some(iv), Some(ix2)) = (idx([1, 0]), idx([0, 1]), idx([2, 0])) else {
        return Err(Error::InvalidArgument("dictionary must consist of x, v and x^2".into()));
    };
    if dictionary.len() != 3 {
        return Err(Error::InvalidArgument("dictionary must consist of x, v and x^2".into()));
    }
    let mut a = Matrix::zeros(3, 3);
    a[(ix, ix)] = 1.0;
    a[(iv, iv)] = lambda;
    a[(iv, ix2)] = -lambda;
    a[(ix2, ix2)] = 2.0;
    Ok(a)
}

/// `‖K̂ − e^{Δt·A}‖_F` for `example1` on its invariant dictionary.
pub fn example1_exactness(system: &DynamicalSystem, k: &KoopmanApproximation) -> Result<f64> {
    let a = example1_generator(system, &k.dictionary)?;
    Ok((&k.k - (a * k.dt).exp()).norm())
}

pub const EXACTNESS_TOL: f64 = 1e-6;

/// Everything a check run needs, fitted from a config.
pub struct Fitted {
    pub system: DynamicalSystem,
    pub snapshots: SnapshotSet,
    pub koopman: KoopmanApproximation,
    pub projectors: Vec<(ProjectorSpec, Projector)>,
    pub solver: ClosestPointConfig,
}

pub fn fit_from_config(cfg: &ExperimentConfig, strict: bool) -> Result<Fitted> {
    let system = cfg.system()?;
    let dictionary = cfg.dictionary_for(&system)?;
    let points = sample_uniform(system.domain(), cfg.edmd.m, cfg.edmd.seed);
    let snapshots =
        build_snapshots(&system, &points, cfg.edmd.dt, cfg.edmd.flow_tol, strict)?.with_seed(cfg.edmd.seed);
    let koopman = fit_with(&snapshots, &dictionary, &cfg.fit_options())?;
    let sigma_snaps = match cfg.edmd.sigma_data {
        SigmaData::Training => snapshots.clone(),
        SigmaData::HeldOut => {
            let seed = cfg.edmd.seed.wrapping_add(HELD_OUT_SEED_OFFSET);
            let held = sample_uniform(system.domain(), cfg.edmd.m, seed);
            build_snapshots(&system, &held, cfg.edmd.dt, cfg.edmd.flow_tol, strict)?.with_seed(seed)
        }
    };
    let solver = cfg.solver_config(&system);
    let projectors = cfg
        .projector_specs()?
        .into_iter()
        .map(|spec| {
            let p = spec.build(&koopman, &sigma_snaps, system.domain(), &solver)?;
            Ok((spec, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fitted { system, snapshots, koopman, projectors, solver })
}

/// Offset from the training seed for the held-out covariance snapshots.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

/// The full check suite for a config.
pub fn run_checks(cfg: &ExperimentConfig, strict: bool) -> Result<Vec<CheckOutcome>> {
    let fitted = fit_from_config(cfg, strict)?;
    let Fitted { system, snapshots, koopman: k, projectors, solver } = &fitted;
    let dict = &k.dictionary;
    let seed = cfg.edmd.seed;
    let mut out = Vec::new();

    out.push(CheckOutcome::new(
        "fit",
        true,
        format!("N={} m={} residual_rms={:e} condition={:e}", k.n(), k.m, k.residual_rms, k.condition_number),
    ));

    if let Ok(err) = example1_exactness(system, k) {
        out.push(CheckOutcome::new(
            "invariant_exactness",
            err <= EXACTNESS_TOL,
            format!("‖K̂ − exp(Δt·A)‖_F = {err:e}"),
        ));
    }

    let ne = normal_equation_residual(k, snapshots);
    out.push(CheckOutcome::new("normal_equations", ne <= STATIONARITY_TOL, format!("relative residual {ne:e}")));

    let ws = weighted_stationarity_worst(k, snapshots, 20, seed);
    out.push(CheckOutcome::new(
        "weighted_stationarity",
        ws <= STATIONARITY_TOL,
        format!("worst relative residual over 20 psd weights {ws:e}"),
    ));

    let probes = sample_uniform(system.domain(), 100, seed ^ 0x0fd);
    let jac = jacobian_fd_error(dict, &probes);
    out.push(CheckOutcome::new("jacobian", jac <= JACOBIAN_TOL, format!("worst relative FD error {jac:e}")));

    if dict.coordinate_indices().is_some() {
        let pts = perturbed_lifted_points(dict, system.domain(), 200, 0.1, seed ^ 0xc0);
        let worst = coordinate_agreement(dict, &pts, solver)?;
        out.push(CheckOutcome::new(
            "coordinate_equals_closest_point",
            worst <= COORDINATE_AGREEMENT_TOL,
            format!("worst state discrepancy over 200 points {worst:e}"),
        ));
    }

    let test_points = sample_uniform(system.domain(), cfg.evaluation.check_points, seed ^ 0xb0);
    let grid_probes = crate::experiments::grid_points(system, 10);
    for (spec, projector) in projectors {
        let Some(metric) = projector.metric() else { continue };
        let mc = check_metric_condition(dict, metric, &grid_probes);
        out.push(CheckOutcome::new(
            &format!("metric_condition[{}]", spec.name()),
            mc.ok,
            format!("min |det(DΨᵀ W DΨ)| = {:e}", mc.min_abs_det),
        ));
        let report = projection_bound_check(k, metric, projector, &test_points, system)?;
        let mut detail = format!(
            "{} violations of {} points ({} skipped), max ratio {:.3}",
            report.violations.len(),
            report.checked,
            report.skipped,
            report.max_ratio
        );
        if report.unconverged > 0 {
            detail += &format!(", solver did not converge at {} points", report.unconverged);
        }
        out.push(CheckOutcome::new(&format!("projection_bound[{}]", spec.name()), report.ok(), detail));
    }
    Ok(out)
}
