//! Metrics on the lifted space and projections back onto `M = im(Ψ)`.

mod metric;
mod projection;

pub use metric::{
    check_metric_condition, check_metric_condition_with, geometric_metric, Metric, MetricConditionReport,
    COVARIANCE_MAX_CONDITION, COVARIANCE_RIDGE, INVARIANT_RESIDUAL, METRIC_CONDITION_THRESHOLD,
};
pub use projection::{
    project_closest, project_closest_seeded, project_closest_with, project_coordinate, ClosestPoint,
    ClosestPointConfig, Recover, ReconstructionMap, RECONSTRUCTION_EPS,
};

use crate::dictionary::Dictionary;
use crate::dynamics::DynamicalSystem;
use crate::edmd::KoopmanApproximation;
use crate::{Error, Result, Vector};

/// How a propagated lifted point is brought back to a state.
#[derive(Clone, Debug)]
pub enum Projector {
    /// No projection: the lifted point is kept and the state is read from the
    /// coordinate observables.
    None,
    Coordinate { reconstruction: ReconstructionMap },
    ClosestPoint {
        metric: Metric,
        config: ClosestPointConfig,
        /// Optional cheap guess added to the multistart set.
        seed_map: Option<ReconstructionMap>,
        label: String,
    },
}

/// Result of applying a [`Projector`] to a lifted point.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub x: Vector,
    pub p: Vector,
    pub converged: bool,
    /// `‖z − p‖_W` for closest-point projectors, `0` otherwise.
    pub residual: f64,
}

impl Projector {
    pub fn kind(&self) -> &'static str {
        match self {
            Projector::None => "none",
            Projector::Coordinate { .. } => "coordinate",
            Projector::ClosestPoint { .. } => "closest_point",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Projector::ClosestPoint { label, .. } => label.clone(),
            other => other.kind().to_string(),
        }
    }

    pub fn closest_point(metric: Metric, config: ClosestPointConfig, label: impl Into<String>) -> Self {
        Projector::ClosestPoint { metric, config, seed_map: None, label: label.into() }
    }

    pub fn with_seed_map(self, map: ReconstructionMap) -> Self {
        match self {
            Projector::ClosestPoint { metric, config, label, .. } => {
                Projector::ClosestPoint { metric, config, seed_map: Some(map), label }
            }
            other => other,
        }
    }

    pub fn metric(&self) -> Option<&Metric> {
        match self {
            Projector::ClosestPoint { metric, .. } => Some(metric),
            _ => None,
        }
    }

    /// Projects `z`. `hints` are nearby states (e.g. the previous rollout
    /// state) used to warm-start the closest-point solver.
    pub fn project(&self, dictionary: &Dictionary, z: &Vector, hints: &[Vector]) -> Result<Projection> {
        if z.len() != dictionary.len() {
            return Err(Error::Dimension { expected: dictionary.len(), got: z.len() });
        }
        match self {
            Projector::None => {
                let x = dictionary.read_coordinates(z.as_slice())?;
                Ok(Projection { x, p: z.clone(), converged: true, residual: 0.0 })
            }
            Projector::Coordinate { reconstruction } => {
                let (x, p) = project_coordinate(dictionary, reconstruction, z)?;
                Ok(Projection { x, p, converged: true, residual: 0.0 })
            }
            Projector::ClosestPoint { metric, config, seed_map, .. } => {
                let extra: Vec<Vector> = seed_map.iter().filter_map(|m| m.apply(z.as_slice()).ok()).collect();
                let cp = project_closest_with(dictionary, metric, z, config, hints, &extra);
                Ok(Projection { x: cp.x, p: cp.p, converged: cp.converged, residual: cp.residual })
            }
        }
    }
}

/// One point where `‖π_W(K̂Ψ(x̂)) − Ψ(x(Δt))‖_W ≤ 2‖K̂Ψ(x̂) − Ψ(x(Δt))‖_W` failed.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundViolation {
    pub x: Vector,
    pub lhs: f64,
    pub rhs: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundReport {
    pub checked: usize,
    /// Points skipped because the reference flow failed or left the domain.
    pub skipped: usize,
    pub unconverged: usize,
    pub violations: Vec<BoundViolation>,
    /// Largest `lhs / rhs` over points with `rhs > 0`.
    pub max_ratio: f64,
}

impl BoundReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance of the reference flows used by the checks and error measures.
pub const REFERENCE_TOL: f64 = 1e-12;

/// Checks the projected one-step error against twice the unprojected one in
/// the metric `W`, with slack `1e-8·(1 + ‖K̂Ψ(x̂)‖_W)`.
pub fn projection_bound_check(
    k: &KoopmanApproximation,
    metric: &Metric,
    projector: &Projector,
    test_points: &[Vector],
    system: &DynamicalSystem,
) -> Result<BoundReport> {
    use rayon::prelude::*;

    if !matches!(projector, Projector::ClosestPoint { .. }) {
        return Err(Error::InvalidArgument("bound check needs a closest-point projector".into()));
    }
    let dict = &k.dictionary;
    let outcomes: Vec<Option<(f64, f64, f64, bool)>> = test_points
        .par_iter()
        .map(|x| -> Result<Option<(f64, f64, f64, bool)>> {
            let truth = system.flow(x.as_slice(), k.dt, REFERENCE_TOL, REFERENCE_TOL)?;
            if truth.left_domain {
                return Ok(None);
            }
            let target = dict.evaluate(truth.state.as_slice());
            let z = k.advance_state(x.as_slice());
            let proj = projector.project(dict, &z, &[])?;
            let lhs = metric.norm(&(&proj.p - &target));
            let rhs = 2.0 * metric.norm(&(&z - &target));
            let slack = 1e-8 * (1.0 + metric.norm(&z));
            Ok(Some((lhs, rhs, slack, proj.converged)))
        })
        .map(|r| r.unwrap_or(None))
        .collect();

    let mut report = BoundReport::default();
    for (x, outcome) in test_points.iter().zip(outcomes) {
        let Some((lhs, rhs, slack, converged)) = outcome else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        if !converged {
            report.unconverged += 1;
        }
        if rhs > 0.0 {
            report.max_ratio = report.max_ratio.max(lhs / rhs);
        }
        if !(lhs <= rhs + slack) {
            report.violations.push(BoundViolation { x: x.clone(), lhs, rhs, converged });
        }
    }
    Ok(report)
}

/// Projector choice by name, resolved against a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub enum ProjectorSpec {
    None,
    Coordinate,
    /// Closest point under the residual-covariance metric.
    Geometric,
    /// Closest point under a given metric.
    ClosestPoint(Metric),
}

impl ProjectorSpec {
    /// `none`, `coordinate`, `geometric` or `closest_point:<metric csv>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(ProjectorSpec::None),
            "coordinate" => Ok(ProjectorSpec::Coordinate),
            "geometric" => Ok(ProjectorSpec::Geometric),
            other => match other.strip_prefix("closest_point:") {
                Some(path) => Ok(ProjectorSpec::ClosestPoint(Metric::read_csv(std::path::Path::new(path.trim()))?)),
                None => Err(Error::Config(format!(
                    "unknown projector `{other}` (expected none, coordinate, geometric or closest_point:<file>)"
                ))),
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProjectorSpec::None => "none",
            ProjectorSpec::Coordinate => "coordinate",
            ProjectorSpec::Geometric => "geometric",
            ProjectorSpec::ClosestPoint(_) => "closest_point",
        }
    }

    /// Coordinate projectors use [`ReconstructionMap::infer`] on `domain`;
    /// closest-point projectors search `config.search_box` and are seeded by
    /// the same reconstruction when one exists.
    pub fn build(
        &self,
        k: &KoopmanApproximation,
        snapshots: &crate::edmd::SnapshotSet,
        domain: &crate::dynamics::Domain,
        config: &ClosestPointConfig,
    ) -> Result<Projector> {
        let dict = &k.dictionary;
        let seeded = |p: Projector| match ReconstructionMap::infer(dict, domain) {
            Ok(map) => p.with_seed_map(map),
            Err(_) => p,
        };
        Ok(match self {
            ProjectorSpec::None => Projector::None,
            ProjectorSpec::Coordinate => Projector::Coordinate { reconstruction: ReconstructionMap::infer(dict, domain)? },
            ProjectorSpec::Geometric => {
                seeded(Projector::closest_point(geometric_metric(k, snapshots)?, config.clone(), "geometric"))
            }
            ProjectorSpec::ClosestPoint(w) => {
                if w.dim() != dict.len() {
                    return Err(Error::Dimension { expected: dict.len(), got: w.dim() });
                }
                seeded(Projector::closest_point(w.clone(), config.clone(), "closest_point"))
            }
        })
    }
}
