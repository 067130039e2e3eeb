//! Error measures for surrogates: one-step errors on grids and along
//! trajectories, mean rollout errors, and time-step sweeps.
//!
//! A failed step (projection error, degenerate reconstruction, flow failure)
//! is recorded as `+∞` and flagged rather than aborting the evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::dictionary::{variable_names, Dictionary};
use crate::dynamics::DynamicalSystem;
use crate::edmd::{build_snapshots, fit_with, sample_uniform, FitOptions};
use crate::io::{fmt_f64, write_records, write_table};
use crate::manifold::{ClosestPointConfig, ProjectorSpec, REFERENCE_TOL};
use crate::surrogate::Surrogate;
use crate::{Error, Result, Vector};

/// One-step error at a point, with whether it can be trusted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepError {
    pub value: f64,
    /// The step and reference flow succeeded and the projection converged.
    pub ok: bool,
}

/// `‖F̂(x̂) − x(Δt; x̂)‖₂` with the reference flow at tolerance `1e-12`.
pub fn one_step_error(surrogate: &Surrogate, system: &DynamicalSystem, x: &[f64]) -> f64 {
    one_step_error_detail(surrogate, system, x).value
}

pub fn one_step_error_detail(surrogate: &Surrogate, system: &DynamicalSystem, x: &[f64]) -> StepError {
    let failed = StepError { value: f64::INFINITY, ok: false };
    let truth = match system.flow(x, surrogate.dt(), REFERENCE_TOL, REFERENCE_TOL) {
        Ok(t) if !t.left_domain => t.state,
        _ => return failed,
    };
    match surrogate.step_projection(x) {
        Ok(p) => {
            let value = (&p.x - truth).norm();
            if value.is_finite() {
                StepError { value, ok: p.converged }
            } else {
                failed
            }
        }
        Err(e) => {
            log::debug!("step failed at {x:?}: {e}");
            failed
        }
    }
}

/// One-step errors on a tensor grid, last axis varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorGrid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Per node: the error is finite and every projection involved converged.
    pub valid: Vec<bool>,
    pub metric_name: String,
    pub surrogate_descriptor: String,
}

impl ErrorGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, flat: usize) -> Vector {
        let mut x = Vector::zeros(self.axes.len());
        let mut rest = flat;
        for k in (0..self.axes.len()).rev() {
            let n = self.axes[k].len();
            x[k] = self.axes[k][rest % n];
            rest /= n;
        }
        x
    }

    pub fn nodes(&self) -> Vec<Vector> {
        let count = self.axes.iter().map(Vec::len).product();
        (0..count).map(|i| self.node(i)).collect()
    }

    /// Node-wise `self − other`; a node is valid only if it is valid in both.
    pub fn difference(&self, other: &ErrorGrid) -> Result<ErrorGrid> {
        if self.axes != other.axes {
            return Err(Error::InvalidArgument("grids have different axes".into()));
        }
        let valid: Vec<bool> = self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect();
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .zip(&valid)
            .map(|((a, b), ok)| if *ok { a - b } else { f64::NAN })
            .collect();
        Ok(ErrorGrid {
            axes: self.axes.clone(),
            values,
            valid,
            metric_name: format!("{} - {}", self.metric_name, other.metric_name),
            surrogate_descriptor: format!("{} - {}", self.surrogate_descriptor, other.surrogate_descriptor),
        })
    }

    /// Fraction of valid nodes with a value `≤ 0`, and the number of valid nodes.
    pub fn fraction_nonpositive(&self) -> (f64, usize) {
        let valid: Vec<f64> = self.values.iter().zip(&self.valid).filter(|(_, ok)| **ok).map(|(v, _)| *v).collect();
        if valid.is_empty() {
            return (0.0, 0);
        }
        let count = valid.iter().filter(|v| **v <= 0.0).count();
        (count as f64 / valid.len() as f64, valid.len())
    }

    /// Long form: one row per node, columns `x, v, error` (state names per dimension).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = variable_names(self.axes.len());
        header.push("error".into());
        let comments = vec![
            format!("metric={}", self.metric_name),
            format!("surrogate={}", self.surrogate_descriptor),
            format!("invalid_nodes={}", self.valid.iter().filter(|v| !**v).count()),
        ];
        let rows = (0..self.len()).map(|i| {
            let mut row: Vec<f64> = self.node(i).iter().copied().collect();
            row.push(self.values[i]);
            row
        });
        write_table(path, &comments, &header, rows)
    }
}

/// One-step errors on a uniform grid over the system's domain, endpoints included.
pub fn error_grid(surrogate: &Surrogate, system: &DynamicalSystem, resolution: &[usize]) -> Result<ErrorGrid> {
    let domain = system.domain();
    if resolution.len() != domain.dim() {
        return Err(Error::Dimension { expected: domain.dim(), got: resolution.len() });
    }
    let axes: Vec<Vec<f64>> = resolution.iter().enumerate().map(|(k, &n)| domain.linspace(k, n)).collect();
    let mut grid = ErrorGrid {
        axes,
        values: Vec::new(),
        valid: Vec::new(),
        metric_name: "one_step_error".into(),
        surrogate_descriptor: surrogate.label(),
    };
    let nodes = grid.nodes();
    let errors: Vec<StepError> =
        nodes.par_iter().map(|x| one_step_error_detail(surrogate, system, x.as_slice())).collect();
    grid.values = errors.iter().map(|e| e.value).collect();
    grid.valid = errors.iter().map(|e| e.ok).collect();
    Ok(grid)
}

/// Reference states `x(k·dt; x0)` for `k = 0..=n_steps`, shorter if the
/// trajectory leaves the inflated domain.
pub fn reference_trajectory(system: &DynamicalSystem, x0: &[f64], dt: f64, n_steps: usize) -> Result<Vec<Vector>> {
    let mut out = vec![Vector::from_column_slice(x0)];
    for _ in 0..n_steps {
        let last = out.last().unwrap();
        let next = system.flow(last.as_slice(), dt, REFERENCE_TOL, REFERENCE_TOL)?;
        if next.left_domain {
            break;
        }
        out.push(next.state);
    }
    Ok(out)
}

/// Mean rollout error over a set of initial conditions, per surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanErrorSeries {
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    /// `means[s][k]`: mean over `x0` of `‖x̂(k) − x(k·dt)‖` for surrogate `s`.
    pub means: Vec<Vec<f64>>,
    /// Rollouts per surrogate that stopped before `n_steps`.
    pub diverged: Vec<usize>,
}

impl MeanErrorSeries {
    /// Wide form: `t` followed by one column per surrogate.
    pub fn write_csv(&self, path: &Path, column_names: &[String]) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(column_names.iter().cloned());
        let comments: Vec<String> = self
            .labels
            .iter()
            .zip(&self.diverged)
            .map(|(l, d)| format!("surrogate={l} diverged={d}"))
            .collect();
        let rows = self.times.iter().enumerate().map(|(k, t)| {
            std::iter::once(*t).chain(self.means.iter().map(|m| m[k])).collect::<Vec<_>>()
        });
        write_table(path, &comments, &header, rows)
    }
}

/// Trajectories that stop early keep contributing their last finite error.
pub fn mean_error_over_time(
    surrogates: &[&Surrogate],
    system: &DynamicalSystem,
    x0_set: &[Vector],
    n_steps: usize,
) -> Result<MeanErrorSeries> {
    let Some(first) = surrogates.first() else {
        return Err(Error::InvalidArgument("no surrogates".into()));
    };
    let dt = first.dt();
    if surrogates.iter().any(|s| (s.dt() - dt).abs() > 1e-15 * dt) {
        return Err(Error::InvalidArgument("surrogates have different time steps".into()));
    }
    if x0_set.is_empty() {
        return Err(Error::InvalidArgument("no initial conditions".into()));
    }
    let truths: Vec<Vec<Vector>> = x0_set
        .par_iter()
        .map(|x0| reference_trajectory(system, x0.as_slice(), dt, n_steps))
        .collect::<Result<_>>()?;

    let mut means = Vec::with_capacity(surrogates.len());
    let mut diverged = Vec::with_capacity(surrogates.len());
    for s in surrogates {
        let per_x0: Vec<(Vec<Option<f64>>, bool)> = x0_set
            .par_iter()
            .zip(&truths)
            .map(|(x0, truth)| {
                let r = s.rollout(x0.as_slice(), n_steps)?;
                let mut errs = vec![None; n_steps + 1];
                let mut last = None;
                for (k, slot) in errs.iter_mut().enumerate() {
                    let Some(t) = truth.get(k) else { break };
                    if let Some(x) = r.states.get(k) {
                        let e = (x - t).norm();
                        if e.is_finite() {
                            last = Some(e);
                        }
                    }
                    *slot = last;
                }
                Ok((errs, r.len() < n_steps + 1))
            })
            .collect::<Result<_>>()?;
        let mean: Vec<f64> = (0..=n_steps)
            .map(|k| {
                let vals: Vec<f64> = per_x0.iter().filter_map(|(e, _)| e[k]).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect();
        means.push(mean);
        diverged.push(per_x0.iter().filter(|(_, d)| *d).count());
    }
    Ok(MeanErrorSeries {
        times: (0..=n_steps).map(|k| k as f64 * dt).collect(),
        labels: surrogates.iter().map(|s| s.label()).collect(),
        means,
        diverged,
    })
}

/// Linear-interpolation quantile of sorted data; `+∞` entries sort last.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if frac == 0.0 || i + 1 >= sorted.len() {
        sorted[i]
    } else if sorted[i + 1].is_infinite() {
        sorted[i + 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Median and quartiles of one sweep cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Self { median: quantile(&v, 0.5), q25: quantile(&v, 0.25), q75: quantile(&v, 0.75) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub dts: Vec<f64>,
    pub projectors: Vec<String>,
    /// `cells[p][i]` for projector `p` at `dts[i]`; `None` where the fit failed.
    pub cells: Vec<Vec<Option<Quartiles>>>,
}

impl SweepResult {
    pub fn medians(&self, projector: usize) -> Vec<Option<f64>> {
        self.cells[projector].iter().map(|c| c.map(|q| q.median)).collect()
    }

    pub fn index_of(&self, projector: &str) -> Option<usize> {
        self.projectors.iter().position(|p| p == projector)
    }

    /// Long form `dt, projector, median, q25, q75`; missing cells are `NaN`.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let header: Vec<String> = ["dt", "projector", "median", "q25", "q75"].map(String::from).to_vec();
        let mut rows = Vec::new();
        for (i, dt) in self.dts.iter().enumerate() {
            for (p, name) in self.projectors.iter().enumerate() {
                let q = self.cells[p][i].unwrap_or(Quartiles { median: f64::NAN, q25: f64::NAN, q75: f64::NAN });
                rows.push(vec![fmt_f64(*dt), name.clone(), fmt_f64(q.median), fmt_f64(q.q25), fmt_f64(q.q75)]);
            }
        }
        write_records(path, comments, &header, rows)
    }
}

/// Inputs of a time-step sweep besides the system and dictionary.
#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub projectors: Vec<ProjectorSpec>,
    pub dts: Vec<f64>,
    pub m: usize,
    pub seed: u64,
    pub n_eval: usize,
    pub fit: FitOptions,
    pub solver: ClosestPointConfig,
    pub strict: bool,
}

/// Refits `K̂` (and `Σ`) at every time step and records quartiles of the
/// one-step error at `n_eval` random points, the same points for every `Δt`.
pub fn timestep_sweep(system: &DynamicalSystem, dictionary: &Dictionary, settings: &SweepSettings) -> SweepResult {
    let eval_points = sample_uniform(system.domain(), settings.n_eval, settings.seed ^ EVAL_SEED_SALT);
    let mut cells = vec![Vec::with_capacity(settings.dts.len()); settings.projectors.len()];
    for &dt in &settings.dts {
        let points = sample_uniform(system.domain(), settings.m, settings.seed);
        let fitted = build_snapshots(system, &points, dt, REFERENCE_TOL, settings.strict)
            .and_then(|snaps| fit_with(&snaps, dictionary, &settings.fit).map(|k| (k, snaps)));
        let (k, snaps) = match fitted {
            Ok(v) => v,
            Err(e) => {
                log::warn!("sweep: fit at dt = {dt} failed: {e}");
                cells.iter_mut().for_each(|c| c.push(None));
                continue;
            }
        };
        for (p, spec) in settings.projectors.iter().enumerate() {
            let cell = spec
                .build(&k, &snaps, system.domain(), &settings.solver)
                .and_then(|proj| Surrogate::new(k.clone(), proj))
                .map(|s| {
                    let errs: Vec<f64> =
                        eval_points.par_iter().map(|x| one_step_error(&s, system, x.as_slice())).collect();
                    Quartiles::of(&errs)
                });
            match cell {
                Ok(q) => cells[p].push(Some(q)),
                Err(e) => {
                    log::warn!("sweep: projector {} at dt = {dt} failed: {e}", spec.name());
                    cells[p].push(None);
                }
            }
        }
    }
    SweepResult {
        dts: settings.dts.clone(),
        projectors: settings.projectors.iter().map(|p| p.name().to_string()).collect(),
        cells,
    }
}

/// Evaluation points are drawn from a stream distinct from the training points.
pub const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// One-step errors along the true trajectory from `x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub valid: Vec<bool>,
    pub label: String,
}

impl ErrorSeries {
    pub fn median(&self) -> f64 {
        Quartiles::of(&self.errors).median
    }

    /// Columns `t, error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = vec!["t".to_string(), "error".to_string()];
        let comments = vec![
            format!("surrogate={}", self.label),
            format!("invalid_points={}", self.valid.iter().filter(|v| !**v).count()),
        ];
        write_table(path, &comments, &header, self.times.iter().zip(&self.errors).map(|(t, e)| vec![*t, *e]))
    }
}

/// Isolates projection quality from error accumulation: every step starts on
/// the true trajectory.
pub fn trajectory_error_series(
    surrogate: &Surrogate,
    system: &DynamicalSystem,
    x0: &[f64],
    n_steps: usize,
) -> Result<ErrorSeries> {
    let dt = surrogate.dt();
    let truth = reference_trajectory(system, x0, dt, n_steps)?;
    if truth.len() < n_steps + 1 {
        log::warn!("reference trajectory left the domain after {} steps", truth.len() - 1);
    }
    let errs: Vec<StepError> =
        truth.par_iter().map(|x| one_step_error_detail(surrogate, system, x.as_slice())).collect();
    Ok(ErrorSeries {
        times: (0..truth.len()).map(|k| k as f64 * dt).collect(),
        errors: errs.iter().map(|e| e.value).collect(),
        valid: errs.iter().map(|e| e.ok).collect(),
        label: surrogate.label(),
    })
}
