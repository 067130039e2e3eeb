//! The benchmark runs behind each reproduced figure.
//!
//! Every run is deterministic given [`RunOptions::seed`]. CSV files are
//! written only when an output directory is given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dictionary::Dictionary;
use crate::dynamics::systems::system_by_name;
use crate::dynamics::DynamicalSystem;
use crate::edmd::{build_snapshots, fit_with, sample_uniform, FitOptions, SnapshotSet};
use crate::evaluation::{
    error_grid, one_step_error, EVAL_SEED_SALT, mean_error_over_time, reference_trajectory, timestep_sweep, trajectory_error_series, ErrorGrid,
    ErrorSeries, MeanErrorSeries, SweepResult, SweepSettings,
};
use crate::io::{fmt_f64, write_records};
use crate::manifold::{ClosestPointConfig, ProjectorSpec, REFERENCE_TOL};
use crate::surrogate::{Rollout, Surrogate};
use crate::{Error, KoopmanApproximation, Result, Vector};

pub const FIGURES: [&str; 4] = ["fig3", "fig45", "fig6", "fig7"];

/// Settings shared by every figure.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    /// Snapshot pairs per fit.
    pub m: usize,
    pub strict: bool,
    pub fit: FitOptions,
    /// Closest-point starts per axis.
    pub multistart_grid: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed: 42, m: 10_000, strict: false, fit: FitOptions::default(), multistart_grid: 5 }
    }
}

impl RunOptions {
    fn solver(&self, system: &DynamicalSystem) -> ClosestPointConfig {
        ClosestPointConfig { multistart_grid: self.multistart_grid, ..ClosestPointConfig::new(system.inflated_domain()) }
    }
}

fn builtin(name: &str) -> Result<DynamicalSystem> {
    system_by_name(name, &BTreeMap::new())
}

/// Training snapshots drawn uniformly over the system's domain.
pub fn training_snapshots(system: &DynamicalSystem, dt: f64, opts: &RunOptions) -> Result<SnapshotSet> {
    let points = sample_uniform(system.domain(), opts.m, opts.seed);
    Ok(build_snapshots(system, &points, dt, REFERENCE_TOL, opts.strict)?.with_seed(opts.seed))
}

/// Fits `dictionary` and builds one surrogate per projector, bounded by the inflated domain.
pub fn surrogates_for(
    system: &DynamicalSystem,
    snapshots: &SnapshotSet,
    dictionary: &Dictionary,
    projectors: &[ProjectorSpec],
    opts: &RunOptions,
) -> Result<(KoopmanApproximation, Vec<Surrogate>)> {
    let k = fit_with(snapshots, dictionary, &opts.fit)?;
    let solver = opts.solver(system);
    let surrogates = projectors
        .iter()
        .map(|spec| {
            let p = spec.build(&k, snapshots, system.domain(), &solver)?;
            Ok(Surrogate::new(k.clone(), p)?.strict(opts.strict).with_bounds(system.inflated_domain()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((k, surrogates))
}

fn monomials(degree: u32, dim: usize) -> Dictionary {
    Dictionary::monomial(degree, dim, &[]).expect("monomial dictionary without exclusions")
}

/// Uniform `n^d` grid over the domain, endpoints included.
pub fn grid_points(system: &DynamicalSystem, n: usize) -> Vec<Vector> {
    let d = system.dim();
    let axes: Vec<Vec<f64>> = (0..d).map(|k| system.domain().linspace(k, n)).collect();
    (0..n.pow(d as u32))
        .map(|mut flat| {
            let mut x = Vector::zeros(d);
            for k in (0..d).rev() {
                x[k] = axes[k][flat % n];
                flat /= n;
            }
            x
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Duffing: trajectories and mean error with and without projection

#[derive(Clone, Debug)]
pub struct Fig3Settings {
    pub dt: f64,
    pub x0: Vec<f64>,
    pub horizon: usize,
    pub grid_per_axis: usize,
    pub mean_steps: usize,
}

impl Default for Fig3Settings {
    fn default() -> Self {
        Self { dt: 0.01, x0: vec![1.5, 0.0], horizon: 2000, grid_per_axis: 10, mean_steps: 1000 }
    }
}

/// Column names of the three surrogates, in order.
pub const FIG3_COLUMNS: [&str; 3] = ["coordinate_v3", "coordinate_v5", "none_v5"];

#[derive(Clone, Debug)]
pub struct Fig3Result {
    pub rollouts: Vec<Rollout>,
    pub truth: Vec<Vector>,
    pub mean: MeanErrorSeries,
    pub files: Vec<PathBuf>,
}

pub fn fig3(opts: &RunOptions, settings: &Fig3Settings, out: Option<&Path>) -> Result<Fig3Result> {
    let system = builtin("duffing")?;
    let snaps = training_snapshots(&system, settings.dt, opts)?;
    let (_, mut v3) = surrogates_for(&system, &snaps, &monomials(3, 2), &[ProjectorSpec::Coordinate], opts)?;
    let (_, mut v5) =
        surrogates_for(&system, &snaps, &monomials(5, 2), &[ProjectorSpec::Coordinate, ProjectorSpec::None], opts)?;
    let none_v5 = v5.pop().unwrap();
    let surrogates = [v3.pop().unwrap(), v5.pop().unwrap(), none_v5];

    let truth = reference_trajectory(&system, &settings.x0, settings.dt, settings.horizon)?;
    let rollouts = surrogates.iter().map(|s| s.rollout(&settings.x0, settings.horizon)).collect::<Result<Vec<_>>>()?;
    let x0_set = grid_points(&system, settings.grid_per_axis);
    let refs: Vec<&Surrogate> = surrogates.iter().collect();
    let mean = mean_error_over_time(&refs, &system, &x0_set, settings.mean_steps)?;

    let mut files = Vec::new();
    if let Some(dir) = out {
        for (name, r) in FIG3_COLUMNS.iter().zip(&rollouts) {
            let path = dir.join(format!("fig3_rollout_{name}.csv"));
            write_rollout_with_truth(&path, r, &truth, opts.seed)?;
            files.push(path);
        }
        let path = dir.join("fig3_mean_error.csv");
        mean.write_csv(&path, &FIG3_COLUMNS.map(String::from))?;
        files.push(path);
    }
    Ok(Fig3Result { rollouts, truth, mean, files })
}

/// Columns `t, x, v, x_true, v_true`; entries past a divergence or the end of the reference are `NaN`.
fn write_rollout_with_truth(path: &Path, r: &Rollout, truth: &[Vector], seed: u64) -> Result<()> {
    let d = truth[0].len();
    let names = crate::dictionary::variable_names(d);
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("{n}_true")));
    let mut comments = vec![format!("dt={}", fmt_f64(r.dt)), format!("seed={seed}")];
    if let Some(k) = r.diverged_at {
        comments.push(format!("diverged_at={k}"));
    }
    let n = r.len().max(truth.len());
    let nan = Vector::from_element(d, f64::NAN);
    let rows = (0..n).map(|k| {
        let x = r.states.get(k).unwrap_or(&nan);
        let t = truth.get(k).unwrap_or(&nan);
        std::iter::once(k as f64 * r.dt).chain(x.iter().copied()).chain(t.iter().copied()).map(fmt_f64).collect()
    });
    write_records(path, &comments, &header, rows)
}

// ---------------------------------------------------------------------------
// Pendulum: one-step error heatmaps

#[derive(Clone, Debug)]
pub struct Fig45Settings {
    pub dt: f64,
    pub resolution: usize,
    pub degrees: Vec<u32>,
}

impl Default for Fig45Settings {
    fn default() -> Self {
        Self { dt: 0.01, resolution: 50, degrees: vec![2, 3] }
    }
}

#[derive(Clone, Debug)]
pub struct Fig45Result {
    /// Per degree: `(coordinate, geometric, geometric − coordinate)`.
    pub grids: Vec<(u32, ErrorGrid, ErrorGrid, ErrorGrid)>,
    pub files: Vec<PathBuf>,
}

pub fn fig45(opts: &RunOptions, settings: &Fig45Settings, out: Option<&Path>) -> Result<Fig45Result> {
    let system = builtin("pendulum")?;
    let snaps = training_snapshots(&system, settings.dt, opts)?;
    let res = [settings.resolution; 2];
    let mut grids = Vec::new();
    let mut files = Vec::new();
    for &degree in &settings.degrees {
        let specs = [ProjectorSpec::Coordinate, ProjectorSpec::Geometric];
        let (_, s) = surrogates_for(&system, &snaps, &monomials(degree, 2), &specs, opts)?;
        let coordinate = error_grid(&s[0], &system, &res)?;
        let geometric = error_grid(&s[1], &system, &res)?;
        let diff = geometric.difference(&coordinate)?;
        if let Some(dir) = out {
            for (name, g) in [("coordinate", &coordinate), ("geometric", &geometric)] {
                let path = dir.join(format!("fig45_grid_v{degree}_{name}.csv"));
                g.write_csv(&path)?;
                files.push(path);
            }
            let path = dir.join(format!("fig45_diff_v{degree}.csv"));
            diff.write_csv(&path)?;
            files.push(path);
        }
        grids.push((degree, coordinate, geometric, diff));
    }
    Ok(Fig45Result { grids, files })
}

// ---------------------------------------------------------------------------
// Pendulum: median one-step error against the time step

#[derive(Clone, Debug)]
pub struct Fig6Settings {
    pub dts: Vec<f64>,
    pub degrees: Vec<u32>,
    pub n_eval: usize,
}

impl Default for Fig6Settings {
    fn default() -> Self {
        Self { dts: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2], degrees: vec![2, 3], n_eval: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct Fig6Result {
    pub sweeps: Vec<(u32, SweepResult)>,
    pub files: Vec<PathBuf>,
}

pub fn fig6(opts: &RunOptions, settings: &Fig6Settings, out: Option<&Path>) -> Result<Fig6Result> {
    let system = builtin("pendulum")?;
    let mut sweeps = Vec::new();
    let mut files = Vec::new();
    for &degree in &settings.degrees {
        let sweep_settings = SweepSettings {
            projectors: vec![ProjectorSpec::Coordinate, ProjectorSpec::Geometric],
            dts: settings.dts.clone(),
            m: opts.m,
            seed: opts.seed,
            n_eval: settings.n_eval,
            fit: opts.fit.clone(),
            solver: opts.solver(&system),
            strict: opts.strict,
        };
        let sweep = timestep_sweep(&system, &monomials(degree, 2), &sweep_settings);
        if let Some(dir) = out {
            let path = dir.join(format!("fig6_sweep_v{degree}.csv"));
            let comments = vec![format!("system=pendulum degree={degree} m={} seed={}", opts.m, opts.seed)];
            sweep.write_csv(&path, &comments)?;
            files.push(path);
        }
        sweeps.push((degree, sweep));
    }
    Ok(Fig6Result { sweeps, files })
}

// ---------------------------------------------------------------------------
// Lorenz without the x observable: one-step errors along a trajectory

#[derive(Clone, Debug)]
pub struct Fig7Settings {
    pub dt: f64,
    pub x0: Vec<f64>,
    pub n_steps: usize,
}

impl Default for Fig7Settings {
    fn default() -> Self {
        Self { dt: 0.01, x0: vec![1.0, 1.0, 25.0], n_steps: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct Fig7Result {
    pub coordinate: ErrorSeries,
    pub geometric: ErrorSeries,
    pub files: Vec<PathBuf>,
}

pub fn lorenz_dictionary() -> Dictionary {
    Dictionary::monomial(4, 3, &[vec![1, 0, 0]]).expect("x is a monomial of degree 1")
}

pub fn fig7(opts: &RunOptions, settings: &Fig7Settings, out: Option<&Path>) -> Result<Fig7Result> {
    let system = builtin("lorenz")?;
    if settings.x0.len() != 3 {
        return Err(Error::Dimension { expected: 3, got: settings.x0.len() });
    }
    let snaps = training_snapshots(&system, settings.dt, opts)?;
    let specs = [ProjectorSpec::Coordinate, ProjectorSpec::Geometric];
    let (_, s) = surrogates_for(&system, &snaps, &lorenz_dictionary(), &specs, opts)?;
    let coordinate = trajectory_error_series(&s[0], &system, &settings.x0, settings.n_steps)?;
    let geometric = trajectory_error_series(&s[1], &system, &settings.x0, settings.n_steps)?;
    let mut files = Vec::new();
    if let Some(dir) = out {
        for (name, series) in [("coordinate", &coordinate), ("geometric", &geometric)] {
            let path = dir.join(format!("fig7_series_{name}.csv"));
            series.write_csv(&path)?;
            files.push(path);
        }
    }
    Ok(Fig7Result { coordinate, geometric, files })
}

// ---------------------------------------------------------------------------
// Duffing: order of the one-step error in the time step

#[derive(Clone, Debug)]
pub struct OrderSettings {
    pub dts: Vec<f64>,
    pub degree: u32,
    pub n_eval: usize,
}

impl Default for OrderSettings {
    fn default() -> Self {
        Self { dts: vec![0.002, 0.005, 0.01, 0.02, 0.05], degree: 3, n_eval: 100 }
    }
}

#[derive(Clone, Debug)]
pub struct OrderResult {
    pub dts: Vec<f64>,
    /// Largest one-step error of the coordinate-projected surrogate per `dt`.
    pub max_errors: Vec<f64>,
    pub slope: f64,
}

/// Refits at every `dt` on the same sample points and evaluates on one fixed set.
pub fn dt_order(opts: &RunOptions, settings: &OrderSettings) -> Result<OrderResult> {
    use rayon::prelude::*;
    let system = builtin("duffing")?;
    let dict = monomials(settings.degree, 2);
    let eval = sample_uniform(system.domain(), settings.n_eval, opts.seed ^ EVAL_SEED_SALT);
    let mut max_errors = Vec::with_capacity(settings.dts.len());
    for &dt in &settings.dts {
        let snaps = training_snapshots(&system, dt, opts)?;
        let (_, s) = surrogates_for(&system, &snaps, &dict, &[ProjectorSpec::Coordinate], opts)?;
        let worst = eval
            .par_iter()
            .map(|x| one_step_error(&s[0], &system, x.as_slice()))
            .reduce(|| 0.0, f64::max);
        max_errors.push(worst);
    }
    let slope = loglog_slope(&settings.dts, &max_errors);
    Ok(OrderResult { dts: settings.dts.clone(), max_errors, slope })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Runs a figure by name with default settings, returning the files written.
pub fn reproduce(figure: &str, opts: &RunOptions, out: &Path) -> Result<Vec<PathBuf>> {
    match figure {
        "fig3" => Ok(fig3(opts, &Fig3Settings::default(), Some(out))?.files),
        "fig45" => Ok(fig45(opts, &Fig45Settings::default(), Some(out))?.files),
        "fig6" => Ok(fig6(opts, &Fig6Settings::default(), Some(out))?.files),
        "fig7" => Ok(fig7(opts, &Fig7Settings::default(), Some(out))?.files),
        other => Err(Error::InvalidArgument(format!("unknown figure `{other}` (expected one of {FIGURES:?})"))),
    }
}
