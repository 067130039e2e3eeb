//! Snapshot generation and the least-squares compression `K̂` of the Koopman operator.
//!
//! `K̂` minimizes `Σⱼ ‖Ψ(yⱼ) − K Ψ(xⱼ)‖²` over the snapshot pairs
//! `yⱼ = x(Δt; xⱼ)`, i.e. `K̂ = (Ψ_Y Ψ_Xᵀ)(Ψ_X Ψ_Xᵀ + ridge·I)⁻¹` with the data
//! matrices holding one snapshot per column. The normal equations are never
//! formed: the regression is solved from a QR factorization of the (column
//! scaled) data matrix, with an SVD of the triangular factor to measure
//! conditioning.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::dynamics::{Domain, DynamicalSystem};
use crate::error::check_dim;
use crate::io;
use crate::{Error, Matrix, Result, Vector};

/// Drop rate above which snapshot generation complains (and fails in strict mode).
pub const MAX_DROP_FRACTION: f64 = 0.10;
/// Gram condition number above which the SVD-based pseudoinverse is used.
pub const PINV_CONDITION: f64 = 1e12;

/// `m` points drawn i.i.d. uniformly from the box.
pub fn sample_uniform(domain: &Domain, m: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            Vector::from_iterator(
                domain.dim(),
                domain.lo().iter().zip(domain.hi()).map(|(l, h)| rng.random_range(*l..=*h)),
            )
        })
        .collect()
}

/// Pairs `(xⱼ, x(Δt; xⱼ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub x_points: Vec<Vector>,
    pub y_points: Vec<Vector>,
    pub dt: f64,
    pub seed: Option<u64>,
    pub system_name: String,
    /// Input points discarded because their flow left the inflated domain.
    pub dropped: usize,
}

impl SnapshotSet {
    pub fn new(x_points: Vec<Vector>, y_points: Vec<Vector>, dt: f64, system_name: impl Into<String>) -> Result<Self> {
        check_dim(x_points.len(), y_points.len())?;
        if x_points.is_empty() {
            return Err(Error::InvalidArgument("snapshot set is empty".into()));
        }
        let d = x_points[0].len();
        for p in x_points.iter().chain(&y_points) {
            check_dim(d, p.len())?;
        }
        Ok(Self { x_points, y_points, dt, seed: None, system_name: system_name.into(), dropped: 0 })
    }

    pub fn len(&self) -> usize {
        self.x_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x_points[0].len()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Writes `x1..xd, y1..yd` columns under a `#`-comment header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.extend((1..=d).map(|i| format!("y{i}")));
        let mut comments = vec![
            format!("system={}", self.system_name),
            format!("dt={}", io::fmt_f64(self.dt)),
        ];
        if let Some(seed) = self.seed {
            comments.push(format!("seed={seed}"));
        }
        let rows = self.x_points.iter().zip(&self.y_points).map(|(x, y)| x.iter().chain(y.iter()).copied().collect());
        io::write_table(path, &comments, &header, rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let table = io::read_table(path)?;
        let width = table.header.len();
        if width == 0 || width % 2 != 0 {
            return Err(Error::Config(format!("{}: expected 2·d columns, found {width}", path.display())));
        }
        let d = width / 2;
        let meta = |key: &str| table.comments.iter().find_map(|c| c.strip_prefix(&format!("{key}=")).map(str::to_string));
        let dt = meta("dt")
            .ok_or_else(|| Error::Config("snapshot csv lacks `dt`".into()))?
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad dt: {e}")))?;
        let system = meta("system").unwrap_or_default();
        let (xs, ys) = table
            .rows
            .iter()
            .map(|r| (Vector::from_column_slice(&r[..d]), Vector::from_column_slice(&r[d..])))
            .unzip();
        let mut set = Self::new(xs, ys, dt, system)?;
        if let Some(seed) = meta("seed") {
            set.seed = Some(seed.parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?);
        }
        Ok(set)
    }
}

/// Integrates every point over `dt`; points whose flow leaves the inflated
/// domain are dropped and counted.
///
/// More than [`MAX_DROP_FRACTION`] dropped is a warning, or an error when `strict`.
pub fn build_snapshots(
    system: &DynamicalSystem,
    points: &[Vector],
    dt: f64,
    tol: f64,
    strict: bool,
) -> Result<SnapshotSet> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to integrate".into()));
    }
    let flows: Vec<Option<Vector>> = points
        .par_iter()
        .map(|x| match system.flow(x.as_slice(), dt, tol, tol) {
            Ok(r) if !r.left_domain => Ok(Some(r.state)),
            Ok(_) | Err(Error::Integration { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for (x, y) in points.iter().zip(flows) {
        if let Some(y) = y {
            xs.push(x.clone());
            ys.push(y);
        }
    }
    let dropped = points.len() - xs.len();
    if dropped > 0 {
        info!("{}: dropped {dropped} of {} snapshot points", system.name(), points.len());
    }
    if dropped as f64 > MAX_DROP_FRACTION * points.len() as f64 {
        if strict || xs.is_empty() {
            return Err(Error::TooManyDropped { dropped, total: points.len() });
        }
        warn!("{}: {dropped} of {} snapshot points left the domain", system.name(), points.len());
    }
    let mut set = SnapshotSet::new(xs, ys, dt, system.name())?;
    set.dropped = dropped;
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Qr,
    PseudoInverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub ridge: f64,
    /// Divide each observable by its largest magnitude over the samples before solving.
    pub scale_observables: bool,
    /// Return the minimum-norm solution instead of failing on a rank-deficient Gram matrix.
    pub allow_rank_deficient: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { ridge: 0.0, scale_observables: true, allow_rank_deficient: false }
    }
}

/// The fitted matrix `K̂` together with fit diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanApproximation {
    pub k: Matrix,
    pub dictionary: Dictionary,
    pub dt: f64,
    pub m: usize,
    /// Condition number of the (scaled, regularized) Gram matrix.
    pub condition_number: f64,
    pub residual_rms: f64,
    /// Per-observable scale used during the solve.
    pub scales: Vector,
    pub ridge: f64,
    pub method: SolveMethod,
    pub system_name: String,
}

fn lifted_rows(dictionary: &Dictionary, points: &[Vector]) -> Matrix {
    let n = dictionary.len();
    let mut out = Matrix::zeros(points.len(), n);
    for (j, p) in points.iter().enumerate() {
        let z = dictionary.evaluate(p.as_slice());
        out.row_mut(j).copy_from(&z.transpose());
    }
    out
}

pub fn fit(snapshots: &SnapshotSet, dictionary: &Dictionary, ridge: f64) -> Result<KoopmanApproximation> {
    fit_with(snapshots, dictionary, &FitOptions { ridge, ..FitOptions::default() })
}

pub fn fit_with(snapshots: &SnapshotSet, dictionary: &Dictionary, opts: &FitOptions) -> Result<KoopmanApproximation> {
    check_dim(dictionary.dim(), snapshots.dim())?;
    if !(opts.ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {}", opts.ridge)));
    }
    let n = dictionary.len();
    let m = snapshots.len();
    if m < n {
        warn!("fitting {n} observables from only {m} snapshots");
    }

    let psi_x = lifted_rows(dictionary, &snapshots.x_points);
    let psi_y = lifted_rows(dictionary, &snapshots.y_points);

    let scales = Vector::from_iterator(
        n,
        (0..n).map(|i| {
            let s = if opts.scale_observables { psi_x.column(i).amax() } else { 1.0 };
            if s > 0.0 && s.is_finite() { s } else { 1.0 }
        }),
    );

    // Rows: scaled snapshots, then √ridge·diag(1/s) for the Tikhonov term.
    let rows = m + if opts.ridge > 0.0 { n } else { 0 };
    let mut a = Matrix::zeros(rows, n);
    let mut b = Matrix::zeros(rows, n);
    for i in 0..n {
        let inv = 1.0 / scales[i];
        a.view_mut((0, i), (m, 1)).copy_from(&(psi_x.column(i) * inv));
        b.view_mut((0, i), (m, 1)).copy_from(&(psi_y.column(i) * inv));
        if opts.ridge > 0.0 {
            a[(m + i, i)] = opts.ridge.sqrt() * inv;
        }
    }

    let qr = a.qr();
    let qtb = qr.q().transpose() * &b;
    let r = qr.r();
    let svd = r.clone().svd(true, true);
    let sv = &svd.singular_values;
    let s_max = sv.max();
    let s_min = sv.min();
    let condition_number = if s_min > 0.0 { (s_max / s_min).powi(2) } else { f64::INFINITY };
    let rank_tol = s_max * rows.max(n) as f64 * f64::EPSILON;
    let rank = sv.iter().filter(|s| **s > rank_tol).count();

    let (y, method) = if rank < n {
        if !opts.allow_rank_deficient {
            return Err(Error::SingularGram { rank, n, condition: condition_number });
        }
        warn!("Gram matrix has rank {rank} < {n}; using the minimum-norm solution");
        (svd.solve(&qtb, rank_tol).map_err(|e| Error::InvalidArgument(e.into()))?, SolveMethod::PseudoInverse)
    } else if condition_number > PINV_CONDITION {
        warn!("Gram condition number {condition_number:.3e} exceeds {PINV_CONDITION:e}; using pseudoinverse");
        (svd.solve(&qtb, rank_tol).map_err(|e| Error::InvalidArgument(e.into()))?, SolveMethod::PseudoInverse)
    } else {
        let y = r
            .solve_upper_triangular(&qtb)
            .ok_or(Error::SingularGram { rank, n, condition: condition_number })?;
        (y, SolveMethod::Qr)
    };

    // y solves the scaled problem for Kᵀ; undo the scaling: K_ji = s_j · y_ij / s_i
    let k = Matrix::from_fn(n, n, |j, i| scales[j] * y[(i, j)] / scales[i]);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularGram { rank, n, condition: condition_number });
    }

    let resid = &psi_y - &psi_x * k.transpose();
    let residual_rms = (resid.norm_squared() / m as f64).sqrt();

    Ok(KoopmanApproximation {
        k,
        dictionary: dictionary.clone(),
        dt: snapshots.dt,
        m,
        condition_number,
        residual_rms,
        scales,
        ridge: opts.ridge,
        method,
        system_name: snapshots.system_name.clone(),
    })
}

/// Empirical Gram matrices `G_X = Ψ_X Ψ_Xᵀ / m` and `G_YX = Ψ_Y Ψ_Xᵀ / m`.
pub fn gram_matrices(snapshots: &SnapshotSet, dictionary: &Dictionary) -> (Matrix, Matrix) {
    let psi_x = lifted_rows(dictionary, &snapshots.x_points);
    let psi_y = lifted_rows(dictionary, &snapshots.y_points);
    let m = snapshots.len() as f64;
    let gx = psi_x.transpose() * &psi_x / m;
    let gyx = psi_y.transpose() * &psi_x / m;
    (gx, gyx)
}

/// `‖W(K G_X − G_YX)‖_F / (‖W‖_F ‖G_X‖_F)`, zero at any stationary point of
/// the `W`-weighted regression cost.
pub fn weighted_stationarity(k: &Matrix, gx: &Matrix, gyx: &Matrix, w: &Matrix) -> f64 {
    let denom = w.norm() * gx.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (w * (k * gx - gyx)).norm() / denom
}

/// Weighted empirical cost `Σⱼ ‖Ψ(yⱼ) − KΨ(xⱼ)‖²_W`.
pub fn weighted_cost(k: &Matrix, snapshots: &SnapshotSet, dictionary: &Dictionary, w: &Matrix) -> f64 {
    snapshots
        .x_points
        .iter()
        .zip(&snapshots.y_points)
        .map(|(x, y)| {
            let r = dictionary.evaluate(y.as_slice()) - k * dictionary.evaluate(x.as_slice());
            (r.transpose() * w * &r)[(0, 0)]
        })
        .sum()
}

impl KoopmanApproximation {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    /// `K̂ z`.
    pub fn advance(&self, z: &Vector) -> Vector {
        &self.k * z
    }

    /// `K̂ Ψ(x)`.
    pub fn advance_state(&self, x: &[f64]) -> Vector {
        &self.k * self.dictionary.evaluate(x)
    }

    /// Lifted residuals `K̂Ψ(xⱼ) − Ψ(yⱼ)`.
    pub fn residuals(&self, snapshots: &SnapshotSet) -> Vec<Vector> {
        snapshots
            .x_points
            .iter()
            .zip(&snapshots.y_points)
            .map(|(x, y)| self.advance_state(x.as_slice()) - self.dictionary.evaluate(y.as_slice()))
            .collect()
    }

    /// Writes `K̂` as a labelled CSV matrix and the metadata to `<stem>.meta.toml`.
    pub fn save(&self, matrix_path: &Path) -> Result<()> {
        let header = self.dictionary.labels().to_vec();
        let rows = self.k.row_iter().map(|r| r.iter().copied().collect());
        io::write_table(matrix_path, &[], &header, rows)?;
        let meta = KoopmanMeta {
            system: self.system_name.clone(),
            dim: self.dictionary.dim(),
            exponents: self.dictionary.exponents().to_vec(),
            labels: self.dictionary.labels().to_vec(),
            dt: self.dt,
            m: self.m,
            ridge: self.ridge,
            condition_number: self.condition_number,
            residual_rms: self.residual_rms,
            scales: self.scales.iter().copied().collect(),
            method: self.method,
        };
        let text = toml::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(sidecar_path(matrix_path), text)?;
        Ok(())
    }

    pub fn load(matrix_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(matrix_path))?;
        let meta: KoopmanMeta = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let dictionary = Dictionary::from_exponents(meta.dim, meta.exponents)?;
        let table = io::read_table(matrix_path)?;
        let n = dictionary.len();
        if table.rows.len() != n || table.header.len() != n {
            return Err(Error::Config(format!("{}: expected a {n}×{n} matrix", matrix_path.display())));
        }
        let k = Matrix::from_fn(n, n, |i, j| table.rows[i][j]);
        Ok(Self {
            k,
            dictionary,
            dt: meta.dt,
            m: meta.m,
            condition_number: meta.condition_number,
            residual_rms: meta.residual_rms,
            scales: Vector::from_vec(meta.scales),
            ridge: meta.ridge,
            method: meta.method,
            system_name: meta.system,
        })
    }
}

pub fn sidecar_path(matrix_path: &Path) -> std::path::PathBuf {
    matrix_path.with_extension("meta.toml")
}

#[derive(Serialize, Deserialize)]
struct KoopmanMeta {
    system: String,
    dim: usize,
    labels: Vec<String>,
    exponents: Vec<Vec<u32>>,
    dt: f64,
    m: usize,
    ridge: f64,
    condition_number: f64,
    residual_rms: f64,
    scales: Vec<f64>,
    method: SolveMethod,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::system_by_name;
    use std::collections::BTreeMap;

    fn sys(name: &str) -> DynamicalSystem {
        system_by_name(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn sampling_is_contained_and_deterministic() {
        let unit = Domain::cube(2, 0.0, 1.0).unwrap();
        let a = sample_uniform(&unit, 4, 7);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|p| unit.contains(p.as_slice())));
        assert_eq!(a, sample_uniform(&unit, 4, 7));
        assert_ne!(a, sample_uniform(&unit, 4, 8));
    }

    #[test]
    fn sample_means_are_centered() {
        let dom = Domain::cube(2, -2.0, 2.0).unwrap();
        let pts = sample_uniform(&dom, 10_000, 3);
        // uniform on [-2, 2]: variance 16/12
        let stderr = (16.0f64 / 12.0 / 10_000.0).sqrt();
        for axis in 0..2 {
            let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 4.0 * stderr, "axis {axis}: mean {mean}");
        }
    }

    #[test]
    fn zero_field_snapshots_are_identity() {
        let zero = sys("zero");
        let pts = sample_uniform(zero.domain(), 20, 1);
        let snaps = build_snapshots(&zero, &pts, 0.1, 1e-10, true).unwrap();
        assert_eq!(snaps.x_points, snaps.y_points);
    }

    #[test]
    fn equilibrium_and_taylor_snapshots() {
        let snaps = build_snapshots(&sys("duffing"), &[Vector::from_vec(vec![1.0, 0.0])], 0.01, 1e-10, true).unwrap();
        assert_eq!(snaps.y_points[0].as_slice(), &[1.0, 0.0]);

        // pendulum from (π/2, 0): x + dt·f + dt²/2·Df·f = (π/2 − dt²/2, −dt)
        let dt = 0.01;
        let x0 = std::f64::consts::FRAC_PI_2;
        let snaps = build_snapshots(&sys("pendulum"), &[Vector::from_vec(vec![x0, 0.0])], dt, 1e-12, true).unwrap();
        let y = &snaps.y_points[0];
        assert!((y[0] - (x0 - 5e-5)).abs() < 1e-7);
        assert!((y[1] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn strict_mode_rejects_excessive_drops() {
        let ex2 = sys("example2");
        // x1 = -1 blows up at t = 1, far outside the inflated box
        let pts: Vec<Vector> = (0..10).map(|i| Vector::from_vec(vec![-1.0, 0.1 * i as f64 - 0.5])).collect();
        assert!(matches!(build_snapshots(&ex2, &pts, 0.9, 1e-10, true), Err(Error::TooManyDropped { .. })));
        let mut mixed = pts.clone();
        mixed.extend(sample_uniform(&Domain::cube(2, 0.0, 1.0).unwrap(), 10, 2));
        let lax = build_snapshots(&ex2, &mixed, 0.9, 1e-10, false).unwrap();
        assert_eq!(lax.dropped, 10);
        assert_eq!(lax.len(), 10);
    }

    #[test]
    fn zero_field_fit_is_identity() {
        let zero = sys("zero");
        let pts = sample_uniform(zero.domain(), 200, 5);
        let snaps = build_snapshots(&zero, &pts, 0.1, 1e-10, true).unwrap();
        for deg in 1..=4 {
            let dict = Dictionary::monomial(deg, 2, &[]).unwrap();
            let fit = fit(&snaps, &dict, 0.0).unwrap();
            let err = (&fit.k - Matrix::identity(dict.len(), dict.len())).norm();
            assert!(err < 1e-10, "degree {deg}: {err:e}");
            assert!(fit.residual_rms < 1e-10);
            assert!(fit.condition_number >= 1.0);
        }
    }

    #[test]
    fn rank_deficient_without_ridge_errors() {
        let zero = sys("zero");
        let pts = sample_uniform(zero.domain(), 4, 5);
        let snaps = build_snapshots(&zero, &pts, 0.1, 1e-10, true).unwrap();
        let dict = Dictionary::monomial(3, 2, &[]).unwrap();
        assert!(matches!(fit(&snaps, &dict, 0.0), Err(Error::SingularGram { .. })));
        let ok = fit(&snaps, &dict, 1e-6).unwrap();
        assert!(ok.k.iter().all(|v| v.is_finite()));
        let forced = fit_with(&snaps, &dict, &FitOptions { allow_rank_deficient: true, ..Default::default() }).unwrap();
        assert_eq!(forced.method, SolveMethod::PseudoInverse);
    }

    #[test]
    fn ridge_matches_regularized_normal_equations() {
        let pend = sys("pendulum");
        let pts = sample_uniform(pend.domain(), 300, 9);
        let snaps = build_snapshots(&pend, &pts, 0.05, 1e-10, true).unwrap();
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let ridge = 2.5;
        let fitted = fit(&snaps, &dict, ridge).unwrap();
        let (gx, gyx) = gram_matrices(&snaps, &dict);
        let m = snaps.len() as f64;
        let lhs = &fitted.k * (&gx * m + Matrix::identity(6, 6) * ridge);
        let rel = (lhs - &gyx * m).norm() / (gyx.norm() * m);
        assert!(rel < 1e-10, "{rel:e}");
    }

    #[test]
    fn normal_equations_hold() {
        let pend = sys("pendulum");
        let pts = sample_uniform(pend.domain(), 2000, 4);
        let snaps = build_snapshots(&pend, &pts, 0.01, 1e-10, true).unwrap();
        for deg in [2, 3, 5] {
            let dict = Dictionary::monomial(deg, 2, &[]).unwrap();
            let fitted = fit(&snaps, &dict, 0.0).unwrap();
            let (gx, gyx) = gram_matrices(&snaps, &dict);
            let rel = (&fitted.k * &gx - &gyx).norm() / (fitted.k.norm() * gx.norm() + gyx.norm());
            assert!(rel < 1e-8, "degree {deg}: {rel:e}");
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let pend = sys("pendulum");
        let run = || {
            let pts = sample_uniform(pend.domain(), 500, 21);
            let snaps = build_snapshots(&pend, &pts, 0.01, 1e-10, true).unwrap();
            fit(&snaps, &Dictionary::monomial(3, 2, &[]).unwrap(), 0.0).unwrap().k
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pend = sys("pendulum");
        let pts = sample_uniform(pend.domain(), 50, 2);
        let snaps = build_snapshots(&pend, &pts, 0.01, 1e-10, true).unwrap().with_seed(2);
        let path = dir.path().join("snaps.csv");
        snaps.write_csv(&path).unwrap();
        assert_eq!(SnapshotSet::read_csv(&path).unwrap(), snaps);

        let fitted = fit(&snaps, &Dictionary::monomial(2, 2, &[]).unwrap(), 0.0).unwrap();
        let kpath = dir.path().join("K.csv");
        fitted.save(&kpath).unwrap();
        assert_eq!(KoopmanApproximation::load(&kpath).unwrap(), fitted);
    }
}
