//! Positive-semidefinite weights `W` on the lifted space.

use log::info;
use nalgebra::SymmetricEigen;

use crate::dictionary::Dictionary;
use crate::edmd::{KoopmanApproximation, SnapshotSet};
use crate::{Error, Matrix, Result, Vector};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
/// Singular values below this fraction of the largest count as zero in `det†`.
const PSEUDODET_CUTOFF: f64 = 1e-12;
/// Covariance conditioning above which a multiple of the identity is added.
pub const COVARIANCE_MAX_CONDITION: f64 = 1e12;
pub const COVARIANCE_RIDGE: f64 = 1e-10;
/// RMS of the (scaled) residuals below which the dictionary is treated as invariant.
pub const INVARIANT_RESIDUAL: f64 = 1e-10;

/// Weighted semi-inner product `⟨u, v⟩_W = uᵀ W v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    w: Matrix,
    normalized: bool,
}

impl Metric {
    /// Validates symmetry and positive semidefiniteness of `w`.
    pub fn new(w: Matrix) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::InvalidArgument("metric must be a non-empty square matrix".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("metric has non-finite entries".into()));
        }
        let scale = w.norm();
        if (&w - w.transpose()).norm() > SYMMETRY_TOL * scale {
            return Err(Error::InvalidArgument("metric is not symmetric".into()));
        }
        let w = (&w + w.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(w.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(format!("metric is indefinite (eigenvalue {min_eig:e})")));
        }
        Ok(Self { w, normalized: false })
    }

    pub fn identity(n: usize) -> Self {
        Self { w: Matrix::identity(n, n), normalized: true }
    }

    /// Zero weight everywhere; satisfies no metric condition. Useful in tests.
    pub fn zero(n: usize) -> Self {
        Self { w: Matrix::zeros(n, n), normalized: false }
    }

    /// The block matrix `C` with ones on the coordinate observables.
    pub fn coordinate(dictionary: &Dictionary) -> Result<Self> {
        let idx = dictionary
            .coordinate_indices()
            .ok_or(Error::MissingCoordinates("the coordinate metric needs every coordinate observable"))?;
        let n = dictionary.len();
        let mut w = Matrix::zeros(n, n);
        for &i in idx {
            w[(i, i)] = 1.0;
        }
        Ok(Self { w, normalized: true })
    }

    /// `det(Σ)^{1/N} Σ⁻¹` for the second moment `Σ` of the given residuals.
    pub fn from_residuals(residuals: &[Vector]) -> Result<Self> {
        let n = residuals.first().map(|r| r.len()).ok_or_else(|| Error::InvalidArgument("no residuals".into()))?;
        covariance_metric(residuals, &Vector::from_element(n, 1.0))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `‖v‖²_W`, clamped at zero.
    pub fn norm_sq(&self, v: &Vector) -> f64 {
        v.dot(&(&self.w * v)).max(0.0)
    }

    pub fn norm(&self, v: &Vector) -> f64 {
        self.norm_sq(v).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { w: &self.w * alpha, normalized: false }
    }

    /// Singular values of `W` above the pseudodeterminant cutoff.
    fn nonzero_singular_values(&self) -> Vec<f64> {
        let sv: Vec<f64> = SymmetricEigen::new(self.w.clone()).eigenvalues.iter().map(|v| v.abs()).collect();
        let top = sv.iter().copied().fold(0.0, f64::max);
        sv.into_iter().filter(|s| *s > PSEUDODET_CUTOFF * top).collect()
    }

    /// `(log det†(W), rank)`. Uses the Cholesky factor when `W` is positive
    /// definite, which stays accurate when eigenvalues span more than the cutoff.
    fn log_det_and_rank(&self) -> (f64, usize) {
        if let Some(ch) = nalgebra::Cholesky::new(self.w.clone()) {
            let l = ch.l_dirty();
            let diag: Vec<f64> = (0..self.dim()).map(|i| l[(i, i)]).collect();
            if diag.iter().all(|d| d.is_finite() && *d > 0.0) {
                return (2.0 * diag.iter().map(|d| d.ln()).sum::<f64>(), self.dim());
            }
        }
        let sv = self.nonzero_singular_values();
        (sv.iter().map(|s| s.ln()).sum(), sv.len())
    }

    /// `log det†(W)`; `-inf` for the zero matrix.
    pub fn log_pseudo_determinant(&self) -> f64 {
        match self.log_det_and_rank() {
            (_, 0) => f64::NEG_INFINITY,
            (log_det, _) => log_det,
        }
    }

    /// Product of the nonzero singular values.
    pub fn pseudo_determinant(&self) -> f64 {
        self.log_pseudo_determinant().exp()
    }

    /// Rescales so that `det†(W) = 1`; the projection is unchanged by this.
    pub fn normalize(&self) -> Self {
        let (log_det, rank) = self.log_det_and_rank();
        if rank == 0 {
            return self.clone();
        }
        let alpha = (-log_det / rank as f64).exp();
        Self { w: &self.w * alpha, normalized: true }
    }

    /// Plain CSV matrix, one row per line, no header.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("w{j}")).collect();
        let comments = vec![format!("normalized={}", self.normalized)];
        crate::io::write_table(path, &comments, &header, self.w.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()))
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let table = crate::io::read_table(path)?;
        let n = table.rows.len();
        if table.rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!("{}: metric must be square", path.display())));
        }
        let w = Matrix::from_fn(n, n, |i, j| table.rows[i][j]);
        let mut m = Self::new(w)?;
        m.normalized = table.comments.iter().any(|c| c.trim() == "normalized=true");
        Ok(m)
    }

    /// Symmetry, semidefiniteness and (when flagged) unit pseudodeterminant.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let scale = self.w.norm();
        let asym = (&self.w - self.w.transpose()).norm();
        if asym > SYMMETRY_TOL * scale {
            return Err(format!("asymmetry {asym:e}"));
        }
        let min_eig = SymmetricEigen::new(self.w.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL * scale {
            return Err(format!("negative eigenvalue {min_eig:e}"));
        }
        if self.normalized {
            let det = self.pseudo_determinant();
            if (det - 1.0).abs() > 1e-6 {
                return Err(format!("pseudodeterminant {det} != 1"));
            }
        }
        Ok(())
    }
}

/// Builds `det(Σ)^{1/N} Σ⁻¹` from residuals, working in coordinates where
/// component `i` is divided by `scales[i]`; the result is expressed in the
/// original coordinates.
fn covariance_metric(residuals: &[Vector], scales: &Vector) -> Result<Metric> {
    let n = scales.len();
    let m = residuals.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no residuals".into()));
    }
    let mut sigma = Matrix::zeros(n, n);
    for r in residuals {
        if r.len() != n {
            return Err(Error::Dimension { expected: n, got: r.len() });
        }
        let rs = r.component_div(scales);
        sigma.syger(1.0, &rs, &rs, 1.0);
    }
    sigma /= m as f64;
    sigma.fill_upper_triangle_with_lower_triangle();

    let trace = sigma.trace();
    if !trace.is_finite() {
        return Err(Error::InvalidArgument("non-finite residuals".into()));
    }
    if trace.sqrt() <= INVARIANT_RESIDUAL {
        info!("residuals vanish (rms {:e}); using the identity metric", trace.sqrt());
        return Ok(Metric::identity(n));
    }

    let mut eig = SymmetricEigen::new(sigma.clone());
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 0.0 || hi / lo > COVARIANCE_MAX_CONDITION {
        let shift = COVARIANCE_RIDGE * trace / n as f64;
        info!("residual covariance is ill-conditioned (eigenvalues {lo:e}..{hi:e}); adding {shift:e}·I");
        for i in 0..n {
            sigma[(i, i)] += shift;
        }
        eig = SymmetricEigen::new(sigma);
    }
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::InvalidArgument("residual covariance is not positive definite".into()));
    }

    // W = D Σ̃⁻¹ D with D = diag(1/s), scaled to det(W) = 1
    let inv = &eig.eigenvectors
        * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();
    let log_det = -eig.eigenvalues.iter().map(|l| l.ln()).sum::<f64>() - 2.0 * scales.iter().map(|s| s.ln()).sum::<f64>();
    let c = (-log_det / n as f64).exp();
    let mut w = Matrix::from_fn(n, n, |i, j| c * inv[(i, j)] / (scales[i] * scales[j]));
    w = (&w + w.transpose()) * 0.5;
    Ok(Metric { w, normalized: true })
}

/// The geometric metric `det(Σ)^{1/N} Σ⁻¹`, `Σ` estimated from the one-step
/// lifted residuals `K̂Ψ(xⱼ) − Ψ(yⱼ)` over the given snapshots.
pub fn geometric_metric(k: &KoopmanApproximation, snapshots: &SnapshotSet) -> Result<Metric> {
    if snapshots.dim() != k.dictionary.dim() {
        return Err(Error::Dimension { expected: k.dictionary.dim(), got: snapshots.dim() });
    }
    covariance_metric(&k.residuals(snapshots), &k.scales)
}

/// Outcome of checking `det(DΨ(x)ᵀ W DΨ(x)) ≠ 0` on a set of probes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricConditionReport {
    pub min_abs_det: f64,
    pub worst_probe: Option<Vector>,
    pub ok: bool,
}

pub const METRIC_CONDITION_THRESHOLD: f64 = 1e-10;

pub fn check_metric_condition(dictionary: &Dictionary, metric: &Metric, probes: &[Vector]) -> MetricConditionReport {
    check_metric_condition_with(dictionary, metric, probes, METRIC_CONDITION_THRESHOLD)
}

pub fn check_metric_condition_with(
    dictionary: &Dictionary,
    metric: &Metric,
    probes: &[Vector],
    threshold: f64,
) -> MetricConditionReport {
    let mut min_abs_det = f64::INFINITY;
    let mut worst_probe = None;
    for x in probes {
        let j = dictionary.jacobian(x.as_slice());
        let det = (j.transpose() * metric.matrix() * &j).determinant().abs();
        if det < min_abs_det || det.is_nan() {
            min_abs_det = det;
            worst_probe = Some(x.clone());
        }
    }
    MetricConditionReport { min_abs_det, worst_probe, ok: min_abs_det > threshold }
}
