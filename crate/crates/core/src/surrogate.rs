//! Discrete-time surrogate `x⁺ = Ψ⁻¹ ∘ π(K̂ Ψ(x))` and its rollouts.

use std::path::Path;

use crate::dictionary::{variable_names, Dictionary};
use crate::dynamics::Domain;
use crate::edmd::KoopmanApproximation;
use crate::io::{fmt_f64, write_records};
use crate::manifold::{Projection, Projector};
use crate::{Error, Result, Vector};

#[derive(Clone, Debug)]
pub struct Surrogate {
    koopman: KoopmanApproximation,
    projector: Projector,
    /// Non-convergence of the closest-point solver is an error instead of data.
    strict: bool,
    /// Rollouts stop once a state leaves this box.
    bounds: Option<Domain>,
}

impl Surrogate {
    pub fn new(koopman: KoopmanApproximation, projector: Projector) -> Result<Self> {
        let n = koopman.dictionary.len();
        if let Some(w) = projector.metric() {
            if w.dim() != n {
                return Err(Error::Dimension { expected: n, got: w.dim() });
            }
        }
        if matches!(projector, Projector::None) && koopman.dictionary.coordinate_indices().is_none() {
            return Err(Error::MissingCoordinates("unprojected surrogates read states from the coordinate observables"));
        }
        Ok(Self { koopman, projector, strict: false, bounds: None })
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_bounds(mut self, bounds: Domain) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn koopman(&self) -> &KoopmanApproximation {
        &self.koopman
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.koopman.dictionary
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn dt(&self) -> f64 {
        self.koopman.dt
    }

    pub fn label(&self) -> String {
        format!("{} (N={})", self.projector.label(), self.dictionary().len())
    }

    /// One surrogate step from `x`.
    pub fn step(&self, x: &[f64]) -> Result<Vector> {
        self.step_with_hint(x, None).map(|p| p.x)
    }

    /// One step with the projection details; non-convergence is reported
    /// through [`Projection::converged`] unless the surrogate is strict.
    pub fn step_projection(&self, x: &[f64]) -> Result<Projection> {
        self.step_with_hint(x, None)
    }

    fn step_with_hint(&self, x: &[f64], hint: Option<&Vector>) -> Result<Projection> {
        let dict = self.dictionary();
        if x.len() != dict.dim() {
            return Err(Error::Dimension { expected: dict.dim(), got: x.len() });
        }
        let z = self.koopman.advance_state(x);
        let hints: Vec<Vector> = hint.into_iter().cloned().collect();
        let proj = self.projector.project(dict, &z, &hints)?;
        if self.strict && !proj.converged {
            return Err(Error::ProjectionFailed { residual: proj.residual, point: z.as_slice().to_vec() });
        }
        Ok(proj)
    }

    fn outside(&self, x: &Vector) -> bool {
        x.iter().any(|v| !v.is_finite()) || self.bounds.as_ref().is_some_and(|b| !b.contains(x.as_slice()))
    }

    /// `n_steps` iterations from `x0`; `states[0] = x0`. Unprojected
    /// surrogates iterate in the lifted space as in [`rollout_lifted`].
    pub fn rollout(&self, x0: &[f64], n_steps: usize) -> Result<Rollout> {
        if matches!(self.projector, Projector::None) {
            let mut r = rollout_lifted(&self.koopman, self.dictionary(), x0, n_steps)?;
            if let Some(k) = r.states.iter().position(|x| self.outside(x)) {
                let keep = if r.states[k].iter().all(|v| v.is_finite()) { k + 1 } else { k };
                r.truncate(keep.max(1));
                r.diverged_at = Some(k.max(1));
            }
            return Ok(r);
        }
        let dt = self.dt();
        let mut x = Vector::from_column_slice(x0);
        let mut out = Rollout::start(x.clone(), dt);
        for k in 1..=n_steps {
            match self.step_with_hint(x.as_slice(), Some(&x)) {
                Ok(Projection { x: next, .. }) => {
                    let stop = self.outside(&next);
                    if next.iter().all(|v| v.is_finite()) {
                        out.push(k, next.clone(), None);
                    }
                    if stop {
                        out.diverged_at = Some(k);
                        break;
                    }
                    x = next;
                }
                Err(e) => {
                    log::debug!("rollout stopped at step {k}: {e}");
                    out.diverged_at = Some(k);
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// States (and, for unprojected runs, lifted points) along a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub lifted: Option<Vec<Vector>>,
    /// Step index at which the rollout left the domain or failed.
    pub diverged_at: Option<usize>,
    pub dt: f64,
}

impl Rollout {
    fn start(x0: Vector, dt: f64) -> Self {
        Self { times: vec![0.0], states: vec![x0], lifted: None, diverged_at: None, dt }
    }

    fn push(&mut self, k: usize, x: Vector, z: Option<Vector>) {
        self.times.push(k as f64 * self.dt);
        self.states.push(x);
        if let (Some(l), Some(z)) = (self.lifted.as_mut(), z) {
            l.push(z);
        }
    }

    fn truncate(&mut self, len: usize) {
        self.times.truncate(len);
        self.states.truncate(len);
        if let Some(l) = self.lifted.as_mut() {
            l.truncate(len);
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Columns `t, x1..xd` (named `x,v` / `x,y,z` in two and three dimensions).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.states.first().map_or(0, |x| x.len());
        let mut header = vec!["t".to_string()];
        header.extend(variable_names(d));
        let mut comments = vec![format!("dt={}", fmt_f64(self.dt))];
        if let Some(k) = self.diverged_at {
            comments.push(format!("diverged_at={k}"));
        }
        let rows = self.times.iter().zip(&self.states).map(|(t, x)| {
            std::iter::once(fmt_f64(*t)).chain(x.iter().map(|v| fmt_f64(*v))).collect::<Vec<_>>()
        });
        write_records(path, &comments, &header, rows)
    }
}

/// The unprojected surrogate `z(n+1) = K̂ z(n)`, `z(0) = Ψ(x0)`, with states
/// read from the coordinate observables.
pub fn rollout_lifted(k: &KoopmanApproximation, dictionary: &Dictionary, x0: &[f64], n_steps: usize) -> Result<Rollout> {
    if dictionary.len() != k.n() {
        return Err(Error::Dimension { expected: k.n(), got: dictionary.len() });
    }
    let mut z = dictionary.evaluate(x0);
    let mut out = Rollout::start(dictionary.read_coordinates(z.as_slice())?, k.dt);
    out.lifted = Some(vec![z.clone()]);
    for step in 1..=n_steps {
        z = k.advance(&z);
        let x = dictionary.read_coordinates(z.as_slice())?;
        out.push(step, x, Some(z.clone()));
        if z.iter().any(|v| !v.is_finite()) {
            out.diverged_at = Some(step);
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dynamics::systems::system_by_name;
    use crate::edmd::{build_snapshots, fit, sample_uniform};
    use crate::manifold::{ClosestPointConfig, Metric, ReconstructionMap};
    use crate::DynamicalSystem;

    fn fitted(system: &DynamicalSystem, dict: &Dictionary, dt: f64, m: usize) -> KoopmanApproximation {
        let points = sample_uniform(system.domain(), m, 11);
        let snaps = build_snapshots(system, &points, dt, 1e-12, false).unwrap();
        fit(&snaps, dict, 0.0).unwrap()
    }

    fn example1_dictionary() -> Dictionary {
        Dictionary::from_exponents(2, vec![vec![1, 0], vec![0, 1], vec![2, 0]]).unwrap()
    }

    #[test]
    fn coordinate_step_is_row_selection() {
        let sys = system_by_name("duffing", &BTreeMap::new()).unwrap();
        let dict = Dictionary::monomial(3, 2, &[]).unwrap();
        let k = fitted(&sys, &dict, 0.05, 500);
        let rows = dict.coordinate_indices().unwrap().to_vec();
        let recon = ReconstructionMap::coordinates(&dict).unwrap();
        let s = Surrogate::new(k.clone(), Projector::Coordinate { reconstruction: recon }).unwrap();
        for x in sample_uniform(sys.domain(), 20, 5) {
            let got = s.step(x.as_slice()).unwrap();
            let psi = dict.evaluate(x.as_slice());
            for (j, &r) in rows.iter().enumerate() {
                let shortcut = k.k.row(r).dot(&psi.transpose());
                assert!((got[j] - shortcut).abs() <= 1e-12 * (1.0 + shortcut.abs()));
            }
        }
    }

    #[test]
    fn zero_field_is_stationary_for_every_projector() {
        let sys = system_by_name("zero", &BTreeMap::new()).unwrap();
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let k = fitted(&sys, &dict, 0.1, 200);
        let cfg = ClosestPointConfig::new(sys.inflated_domain());
        let projectors = [
            Projector::None,
            Projector::Coordinate { reconstruction: ReconstructionMap::coordinates(&dict).unwrap() },
            Projector::closest_point(Metric::identity(6), cfg, "identity"),
        ];
        for p in projectors {
            let s = Surrogate::new(k.clone(), p).unwrap();
            let x = [0.3, -0.7];
            let y = s.step(&x).unwrap();
            assert!((y[0] - x[0]).abs() < 1e-8 && (y[1] - x[1]).abs() < 1e-8);
            let r = s.rollout(&x, 5).unwrap();
            assert_eq!(r.len(), 6);
            assert!(r.states.iter().all(|v| (v[0] - x[0]).abs() < 1e-8));
        }
    }

    #[test]
    fn invariant_dictionary_steps_follow_the_flow() {
        let sys = system_by_name("example1", &BTreeMap::new()).unwrap();
        let dict = example1_dictionary();
        let k = fitted(&sys, &dict, 0.1, 2000);
        let recon = ReconstructionMap::coordinates(&dict).unwrap();
        let s = Surrogate::new(k.clone(), Projector::Coordinate { reconstruction: recon }).unwrap();
        for x in sample_uniform(sys.domain(), 25, 9) {
            let truth = sys.flow(x.as_slice(), 0.1, 1e-12, 1e-12).unwrap().state;
            assert!((s.step(x.as_slice()).unwrap() - truth).norm() <= 1e-5);
        }

        let projected = s.rollout(&[0.5, -0.2], 50).unwrap();
        let lifted = rollout_lifted(&k, &dict, &[0.5, -0.2], 50).unwrap();
        assert_eq!(projected.len(), 51);
        assert_eq!(lifted.len(), 51);
        for (a, b) in projected.states.iter().zip(&lifted.states) {
            assert!((a - b).norm() <= 1e-5);
        }
    }

    #[test]
    fn single_step_rollout_matches_step() {
        let sys = system_by_name("pendulum", &BTreeMap::new()).unwrap();
        let dict = Dictionary::monomial(3, 2, &[]).unwrap();
        let k = fitted(&sys, &dict, 0.05, 500);
        let s = Surrogate::new(k, Projector::Coordinate { reconstruction: ReconstructionMap::coordinates(&dict).unwrap() })
            .unwrap();
        let r = s.rollout(&[0.4, 0.1], 1).unwrap();
        assert_eq!(r.times, vec![0.0, 0.05]);
        assert_eq!(r.states[1], s.step(&[0.4, 0.1]).unwrap());
    }

    #[test]
    fn identity_operator_gives_constant_lifted_sequence() {
        let sys = system_by_name("zero", &BTreeMap::new()).unwrap();
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let mut k = fitted(&sys, &dict, 0.1, 100);
        k.k = crate::Matrix::identity(6, 6);
        let r = rollout_lifted(&k, &dict, &[0.1, 0.2], 10).unwrap();
        let z0 = dict.evaluate(&[0.1, 0.2]);
        assert!(r.lifted.unwrap().iter().all(|z| z == &z0));
        let empty = rollout_lifted(&k, &dict, &[0.1, 0.2], 0).unwrap();
        assert_eq!(empty.lifted.unwrap(), vec![z0]);
    }

    #[test]
    fn lifted_rollout_needs_coordinates() {
        let sys = system_by_name("zero", &BTreeMap::new()).unwrap();
        let dict = Dictionary::from_exponents(2, vec![vec![0, 0], vec![1, 0], vec![1, 1]]).unwrap();
        let k = fitted(&sys, &dict, 0.1, 100);
        assert!(matches!(rollout_lifted(&k, &dict, &[0.1, 0.2], 3), Err(Error::MissingCoordinates(_))));
        assert!(Surrogate::new(k, Projector::None).is_err());
    }

    #[test]
    fn rollout_stops_outside_bounds() {
        let sys = system_by_name("example2", &BTreeMap::new()).unwrap();
        let dict = Dictionary::monomial(2, 2, &[]).unwrap();
        let k = fitted(&sys, &dict, 0.1, 500);
        let s = Surrogate::new(k, Projector::Coordinate { reconstruction: ReconstructionMap::coordinates(&dict).unwrap() })
            .unwrap()
            .with_bounds(Domain::cube(2, -0.5, 0.5).unwrap());
        let r = s.rollout(&[0.45, 0.45], 200).unwrap();
        assert!(r.diverged_at.is_some());
        assert!(r.len() < 201);
        let again = s.rollout(&[0.45, 0.45], 200).unwrap();
        assert_eq!(r, again);
    }
}
