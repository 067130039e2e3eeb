//! Maps from the ambient lifted space back onto `M = im(Ψ)`.

use std::cmp::Ordering;

use nalgebra::{Cholesky, Dyn};

use crate::dictionary::Dictionary;
use crate::dynamics::Domain;
use crate::manifold::Metric;
use crate::{Error, Matrix, Result, Vector};

/// Denominators with magnitude at or below this make a quotient rule degenerate.
pub const RECONSTRUCTION_EPS: f64 = 1e-8;

/// How one state coordinate is recovered from a lifted point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recover {
    /// `x_j = z[i]`.
    Component(usize),
    /// `x_j = z[numerator] / z[denominator]`, e.g. `x = (x·z) / z`.
    Quotient { numerator: usize, denominator: usize },
}

/// Left inverse of `Ψ` on `M`, used by the coordinate projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionMap {
    rules: Vec<Recover>,
    labels: Vec<String>,
    description: String,
}

impl ReconstructionMap {
    /// Reads the coordinate observables.
    pub fn coordinates(dictionary: &Dictionary) -> Result<Self> {
        let idx = dictionary
            .coordinate_indices()
            .ok_or(Error::MissingCoordinates("coordinate reconstruction needs every coordinate observable"))?;
        Ok(Self::from_rules(dictionary, idx.iter().map(|&i| Recover::Component(i)).collect()))
    }

    /// Coordinates where available; a missing `x_j` is recovered as
    /// `(x_j·x_k) / x_k` through a coordinate `x_k` that stays away from zero on `domain`.
    pub fn infer(dictionary: &Dictionary, domain: &Domain) -> Result<Self> {
        let d = dictionary.dim();
        let unit = |j: usize| -> Vec<u32> { (0..d).map(|k| u32::from(k == j)).collect() };
        let mut rules = Vec::with_capacity(d);
        for j in 0..d {
            if let Some(i) = dictionary.index_of_exponent(&unit(j)) {
                rules.push(Recover::Component(i));
                continue;
            }
            let rule = (0..d)
                .filter(|&k| k != j && (domain.lo()[k] > 0.0 || domain.hi()[k] < 0.0))
                .find_map(|k| {
                    let den = dictionary.index_of_exponent(&unit(k))?;
                    let mut prod = unit(j);
                    prod[k] += 1;
                    let num = dictionary.index_of_exponent(&prod)?;
                    Some(Recover::Quotient { numerator: num, denominator: den })
                })
                .ok_or(Error::MissingCoordinates("no observable pair recovers a missing coordinate"))?;
            rules.push(rule);
        }
        Ok(Self::from_rules(dictionary, rules))
    }

    pub fn from_rules(dictionary: &Dictionary, rules: Vec<Recover>) -> Self {
        let labels = dictionary.labels().to_vec();
        let names = crate::dictionary::variable_names(dictionary.dim());
        let description = rules
            .iter()
            .zip(&names)
            .map(|(r, n)| match *r {
                Recover::Component(i) => format!("{n} = {}", labels[i]),
                Recover::Quotient { numerator, denominator } => {
                    format!("{n} = ({})/({})", labels[numerator], labels[denominator])
                }
            })
            .collect::<Vec<_>>()
            .join(", ");
        Self { rules, labels, description }
    }

    pub fn rules(&self) -> &[Recover] {
        &self.rules
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vector> {
        let mut x = Vector::zeros(self.rules.len());
        for (j, r) in self.rules.iter().enumerate() {
            x[j] = match *r {
                Recover::Component(i) => z[i],
                Recover::Quotient { numerator, denominator } => {
                    let den = z[denominator];
                    if !(den.abs() > RECONSTRUCTION_EPS) {
                        return Err(Error::DegenerateReconstruction {
                            component: self.labels[denominator].clone(),
                            value: den,
                        });
                    }
                    z[numerator] / den
                }
            };
        }
        Ok(x)
    }
}

/// `π(z) = Ψ(r(z))` with `r` the reconstruction; returns `(r(z), π(z))`.
pub fn project_coordinate(dictionary: &Dictionary, reconstruction: &ReconstructionMap, z: &Vector) -> Result<(Vector, Vector)> {
    let x = reconstruction.apply(z.as_slice())?;
    let p = dictionary.evaluate(x.as_slice());
    Ok((x, p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosestPointConfig {
    pub max_iters: usize,
    /// Bound on the preconditioned projected gradient `‖H⁻¹ DΨᵀW(z − Ψ(x))‖`
    /// relative to `1 + ‖x‖`, with `H` the exact Hessian of the half cost when
    /// positive definite and `DΨᵀWDΨ` otherwise (a step length in state units).
    pub grad_tol: f64,
    /// Multistart points per axis.
    pub multistart_grid: usize,
    pub search_box: Domain,
    pub damping_init: f64,
    /// Try caller-supplied seeds first and only fall back to the full multistart when none converges.
    pub warm_start: bool,
}

impl ClosestPointConfig {
    pub fn new(search_box: Domain) -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-10,
            multistart_grid: 5,
            search_box,
            damping_init: 1e-3,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.multistart_grid == 0 {
            return Err(Error::InvalidArgument("max_iters and multistart_grid must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.damping_init > 0.0) {
            return Err(Error::InvalidArgument("grad_tol and damping_init must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosestPoint {
    pub x: Vector,
    pub p: Vector,
    /// `‖z − p‖_W`.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct Objective<'a> {
    dictionary: &'a Dictionary,
    w: &'a Matrix,
    z: &'a Vector,
    bounds: &'a Domain,
}

struct LocalMin {
    x: Vector,
    cost: f64,
    converged: bool,
    iterations: usize,
}

const MAX_DAMPING_TRIES: usize = 40;

fn solve_spd(a: Matrix, b: &Vector) -> Option<Vector> {
    match Cholesky::<f64, Dyn>::new(a.clone()) {
        Some(ch) => Some(ch.solve(b)),
        None => a.lu().solve(b),
    }
}

impl Objective<'_> {
    fn residual(&self, x: &Vector) -> Vector {
        self.z - self.dictionary.evaluate(x.as_slice())
    }

    fn cost(&self, r: &Vector) -> f64 {
        r.dot(&(self.w * r))
    }

    /// Coordinates not pinned at a bound by the descent direction `g`.
    fn free_mask(&self, x: &Vector, g: &Vector) -> Vec<bool> {
        (0..x.len())
            .map(|i| {
                let at_lo = x[i] <= self.bounds.lo()[i] && g[i] < 0.0;
                let at_hi = x[i] >= self.bounds.hi()[i] && g[i] > 0.0;
                !(at_lo || at_hi)
            })
            .collect()
    }

    fn linearize(&self, x: &Vector, r: &Vector) -> Linearization {
        let jac = self.dictionary.jacobian(x.as_slice());
        let wj = self.w * &jac;
        let gauss_newton = jac.transpose() * &wj;
        let wr = self.w * r;
        // descent direction of the cost: +JᵀW r
        let g = jac.transpose() * &wr;
        let free = self.free_mask(x, &g);
        let idx: Vec<usize> = (0..x.len()).filter(|&i| free[i]).collect();
        let restrict = |h: &Matrix| Matrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
        // Newton when the exact Hessian is positive definite, since Gauss–Newton
        // alone converges slowly at large residuals; Gauss–Newton otherwise.
        let newton = restrict(&(&gauss_newton - self.dictionary.hessian_contract(x.as_slice(), wr.as_slice())));
        let h_ff = if Cholesky::<f64, Dyn>::new(newton.clone()).is_some() { newton } else { restrict(&gauss_newton) };
        let g_f = Vector::from_iterator(idx.len(), idx.iter().map(|&i| g[i]));
        let stationarity = if g_f.iter().all(|v| *v == 0.0) {
            0.0
        } else {
            let floor = 1e-14 * h_ff.trace().abs().max(f64::MIN_POSITIVE);
            let reg = &h_ff + Matrix::identity(idx.len(), idx.len()) * floor;
            solve_spd(reg, &g_f).map_or(f64::INFINITY, |s| s.norm())
        };
        Linearization { idx, h_ff, g_f, stationarity }
    }

    fn local_solve(&self, start: &Vector, cfg: &ClosestPointConfig) -> LocalMin {
        let tol = |x: &Vector| cfg.grad_tol * (1.0 + x.norm());
        let mut x = start.clone();
        self.bounds.clamp(x.as_mut_slice());
        let r = self.residual(&x);
        let mut cost = self.cost(&r);
        let mut lin = self.linearize(&x, &r);
        let mut mu = cfg.damping_init;
        let mut iterations = 0;

        loop {
            if lin.stationarity <= tol(&x) {
                return LocalMin { x, cost: cost.max(0.0), converged: true, iterations };
            }
            if iterations >= cfg.max_iters {
                break;
            }
            iterations += 1;

            let mut accepted = false;
            for _ in 0..MAX_DAMPING_TRIES {
                let mut a = lin.h_ff.clone();
                for k in 0..lin.idx.len() {
                    a[(k, k)] += mu * lin.h_ff[(k, k)].max(1e-300);
                }
                let Some(step) = solve_spd(a, &lin.g_f) else {
                    mu *= 10.0;
                    continue;
                };
                let mut trial = x.clone();
                for (k, &i) in lin.idx.iter().enumerate() {
                    trial[i] += step[k];
                }
                self.bounds.clamp(trial.as_mut_slice());
                let r_trial = self.residual(&trial);
                let c_trial = self.cost(&r_trial);
                let decreased = c_trial < cost;
                // Close to a minimizer with nonzero residual the cost change
                // drops below rounding; accept if the stationarity improves.
                let lin_trial = if decreased || c_trial <= cost * (1.0 + ROUNDING_ZONE) {
                    Some(self.linearize(&trial, &r_trial))
                } else {
                    None
                };
                if let Some(lt) = lin_trial {
                    if decreased || lt.stationarity < lin.stationarity {
                        x = trial;
                        cost = c_trial;
                        lin = lt;
                        mu = (mu / 10.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                }
                mu = (mu * 10.0).max(1e-8);
            }
            if !accepted {
                break;
            }
        }
        let converged = lin.stationarity <= tol(&x);
        LocalMin { x, cost: cost.max(0.0), converged, iterations }
    }
}

struct Linearization {
    idx: Vec<usize>,
    h_ff: Matrix,
    g_f: Vector,
    /// `‖H_ff⁻¹ g_f‖`, the length of the undamped (Gauss–)Newton step.
    stationarity: f64,
}

const ROUNDING_ZONE: f64 = 1e-12;

fn lexicographic(a: &Vector, b: &Vector) -> Ordering {
    a.iter().zip(b.iter()).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Lower cost wins; costs within a relative `1e-10` tie and go to the
/// lexicographically smaller `x`. Converged candidates beat unconverged ones.
fn better(cand: &LocalMin, best: &LocalMin) -> bool {
    if cand.converged != best.converged {
        return cand.converged;
    }
    let tol = 1e-10 * cand.cost.max(best.cost);
    if cand.cost < best.cost - tol {
        true
    } else if cand.cost <= best.cost + tol {
        lexicographic(&cand.x, &best.x) == Ordering::Less
    } else {
        false
    }
}

fn grid_starts(bounds: &Domain, per_axis: usize) -> Vec<Vector> {
    let d = bounds.dim();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            (0..per_axis)
                .map(|i| bounds.lo()[k] + bounds.width(k) * (i as f64 + 0.5) / per_axis as f64)
                .collect()
        })
        .collect();
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut flat| {
            let mut x = Vector::zeros(d);
            for k in (0..d).rev() {
                x[k] = axes[k][flat % per_axis];
                flat /= per_axis;
            }
            x
        })
        .collect()
}

fn pick(objective: &Objective<'_>, starts: &[Vector], cfg: &ClosestPointConfig) -> Option<LocalMin> {
    starts.iter().map(|s| objective.local_solve(s, cfg)).reduce(|best, cand| if better(&cand, &best) { cand } else { best })
}

fn finish(dictionary: &Dictionary, best: LocalMin) -> ClosestPoint {
    let p = dictionary.evaluate(best.x.as_slice());
    ClosestPoint { x: best.x, p, residual: best.cost.sqrt(), converged: best.converged, iterations: best.iterations }
}

/// `π_W(z) = argmin_{p ∈ M} ‖z − p‖_W` by damped Gauss–Newton from a grid
/// of starts over the search box (plus the coordinate read-out of `z` when
/// the dictionary has coordinates).
pub fn project_closest(dictionary: &Dictionary, metric: &Metric, z: &Vector, config: &ClosestPointConfig) -> ClosestPoint {
    project_closest_seeded(dictionary, metric, z, config, &[])
}

/// As [`project_closest`], trying `seeds` first when `config.warm_start` is set.
pub fn project_closest_seeded(
    dictionary: &Dictionary,
    metric: &Metric,
    z: &Vector,
    config: &ClosestPointConfig,
    seeds: &[Vector],
) -> ClosestPoint {
    project_closest_with(dictionary, metric, z, config, seeds, &[])
}

/// Full control over the starts: `warm` seeds are tried alone first (when
/// `config.warm_start`), `extra` points join the multistart set.
pub fn project_closest_with(
    dictionary: &Dictionary,
    metric: &Metric,
    z: &Vector,
    config: &ClosestPointConfig,
    warm: &[Vector],
    extra: &[Vector],
) -> ClosestPoint {
    assert_eq!(z.len(), dictionary.len(), "lifted point has wrong dimension");
    assert_eq!(metric.dim(), dictionary.len(), "metric has wrong dimension");
    let objective = Objective { dictionary, w: metric.matrix(), z, bounds: &config.search_box };
    let finite = |s: &&Vector| s.len() == dictionary.dim() && s.iter().all(|v| v.is_finite());
    let warm: Vec<Vector> = warm.iter().filter(finite).cloned().collect();

    if config.warm_start && !warm.is_empty() {
        if let Some(best) = pick(&objective, &warm, config) {
            if best.converged {
                return finish(dictionary, best);
            }
        }
    }

    let mut starts = warm;
    starts.extend(extra.iter().filter(finite).cloned());
    if let Ok(x) = dictionary.read_coordinates(z.as_slice()) {
        starts.push(x);
    }
    starts.extend(grid_starts(&config.search_box, config.multistart_grid));
    finish(dictionary, pick(&objective, &starts, config).expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parabola() -> Dictionary {
        Dictionary::from_exponents(1, vec![vec![1], vec![2]]).unwrap()
    }

    #[test]
    fn symmetric_minimizers_tie_toward_smaller_x() {
        let dict = parabola();
        let cfg = ClosestPointConfig::new(Domain::cube(1, -2.0, 2.0).unwrap());
        let z = Vector::from_vec(vec![0.0, 1.0]);
        let cp = project_closest(&dict, &Metric::identity(2), &z, &cfg);
        assert!(cp.converged);
        assert!((cp.x[0] + 0.5f64.sqrt()).abs() < 1e-9, "{}", cp.x[0]);
        assert!((cp.residual.powi(2) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn parabola_agrees_with_brute_force() {
        let dict = parabola();
        let cfg = ClosestPointConfig::new(Domain::cube(1, -2.0, 2.0).unwrap());
        for (a, b) in [(0.3, 1.7), (-1.0, 0.2), (1.5, -0.5), (0.0, 3.0)] {
            let z = Vector::from_vec(vec![a, b]);
            let cp = project_closest(&dict, &Metric::identity(2), &z, &cfg);
            let brute = (0..=40_000)
                .map(|i| -2.0 + 1e-4 * i as f64)
                .map(|x| ((a - x).powi(2) + (b - x * x).powi(2), x))
                .min_by(|p, q| p.0.total_cmp(&q.0))
                .unwrap();
            assert!((cp.residual.powi(2) - brute.0).abs() < 1e-7, "z = ({a}, {b})");
            assert!((cp.x[0] - brute.1).abs() < 2e-4, "z = ({a}, {b}): {} vs {}", cp.x[0], brute.1);
        }
    }

    #[test]
    fn on_manifold_points_are_fixed() {
        let dict = Dictionary::monomial(3, 2, &[]).unwrap();
        let cfg = ClosestPointConfig::new(Domain::cube(2, -3.0, 3.0).unwrap());
        let w = Metric::new(Matrix::from_fn(10, 10, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 })).unwrap();
        for x0 in [[0.5, -1.0], [1.9, 0.1], [-2.5, 2.5]] {
            let z = dict.evaluate(&x0);
            let cp = project_closest(&dict, &w, &z, &cfg);
            assert!(cp.residual <= 1e-8);
            assert!((cp.x[0] - x0[0]).abs() < 1e-8 && (cp.x[1] - x0[1]).abs() < 1e-8);
            let again = project_closest(&dict, &w, &cp.p, &cfg);
            assert!((&again.p - &cp.p).norm() <= 1e-8);
        }
    }

    #[test]
    fn coordinate_metric_reads_coordinates() {
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let cfg = ClosestPointConfig::new(Domain::cube(2, -3.0, 3.0).unwrap());
        let z = Vector::from_vec(vec![1.0, 1.0, 2.0, 99.0, 99.0, 99.0]);
        let cp = project_closest(&dict, &Metric::coordinate(&dict).unwrap(), &z, &cfg);
        assert!((cp.x[0] - 1.0).abs() < 1e-12 && (cp.x[1] - 2.0).abs() < 1e-12);
        let (x, p) = project_coordinate(&dict, &ReconstructionMap::coordinates(&dict).unwrap(), &z).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        assert_eq!(p.as_slice(), &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn coordinate_projection_is_identity_on_manifold() {
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let z = dict.evaluate(&[1.0, 2.0]);
        let (x, p) = project_coordinate(&dict, &ReconstructionMap::coordinates(&dict).unwrap(), &z).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        assert_eq!(p, z);
    }

    #[test]
    fn lorenz_quotient_reconstruction() {
        let dict = Dictionary::monomial(4, 3, &[vec![1, 0, 0]]).unwrap();
        let domain = Domain::new(vec![-20.0, -20.0, 10.0], vec![20.0, 20.0, 50.0]).unwrap();
        let recon = ReconstructionMap::infer(&dict, &domain).unwrap();
        assert_eq!(recon.description(), "x = (x*z)/(z), y = y, z = z");
        let mut z = Vector::from_element(dict.len(), 123.0);
        z[dict.index_of("y").unwrap()] = 1.0;
        z[dict.index_of("z").unwrap()] = 10.0;
        z[dict.index_of("x*z").unwrap()] = 20.0;
        let (x, _) = project_coordinate(&dict, &recon, &z).unwrap();
        assert_eq!(x.as_slice(), &[2.0, 1.0, 10.0]);

        z[dict.index_of("z").unwrap()] = 0.0;
        match project_coordinate(&dict, &recon, &z) {
            Err(Error::DegenerateReconstruction { component, .. }) => assert_eq!(component, "z"),
            other => panic!("expected degenerate reconstruction, got {other:?}"),
        }
        assert!(ReconstructionMap::coordinates(&dict).is_err());
    }

    #[test]
    fn grid_starts_cover_cell_centres() {
        let starts = grid_starts(&Domain::cube(2, 0.0, 1.0).unwrap(), 2);
        assert_eq!(starts.len(), 4);
        assert_eq!(starts[1].as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn scaling_the_metric_keeps_the_minimizer() {
        let dict = Dictionary::monomial(3, 2, &[]).unwrap();
        let cfg = ClosestPointConfig::new(Domain::cube(2, -3.0, 3.0).unwrap());
        let w = Metric::new(Matrix::from_fn(10, 10, |i, j| if i == j { 2.0 + (i as f64).sin() } else { 0.05 })).unwrap();
        let mut z = dict.evaluate(&[0.7, -0.4]);
        z[5] += 0.05;
        z[9] -= 0.08;
        let base = project_closest(&dict, &w, &z, &cfg);
        let doubled = project_closest(&dict, &w.scaled(2.0), &z, &cfg);
        assert!((&base.x - &doubled.x).norm() <= 1e-8);
    }

    #[test]
    fn box_constraint_is_respected() {
        let dict = parabola();
        let cfg = ClosestPointConfig::new(Domain::cube(1, -1.0, 1.0).unwrap());
        let z = dict.evaluate(&[3.0]);
        let cp = project_closest(&dict, &Metric::identity(2), &z, &cfg);
        assert_eq!(cp.x[0], 1.0);
        assert!(cp.converged);
    }
}
