//! Vector fields, their sampling domains, and reference flows.

mod integrator;
pub mod systems;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::{Error, Result, Vector};

pub use integrator::Tolerances;
pub use systems::{builtin_systems, system_by_name, SYSTEM_NAMES};

/// Fraction of each axis length added on both sides of the sampling box
/// before a trajectory counts as having left the domain.
pub const DEFAULT_MARGIN: f64 = 0.5;

/// Axis-aligned box `lo[i] <= x[i] <= hi[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::InvalidArgument("domain must have at least one axis".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "axis {i}: lower bound {l} is not strictly below upper bound {h}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(self.dim(), self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)))
    }

    /// Largest `|x_i|` over the box along `axis`.
    pub fn max_abs(&self, axis: usize) -> f64 {
        self.lo[axis].abs().max(self.hi[axis].abs())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Grows every axis by `frac` of its length on both sides.
    pub fn inflate(&self, frac: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let pad = frac * (h - l);
                (l - pad, h + pad)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// `n` equally spaced nodes from `lo` to `hi` (inclusive) along `axis`.
    pub fn linspace(&self, axis: usize, n: usize) -> Vec<f64> {
        let (l, h) = (self.lo[axis], self.hi[axis]);
        match n {
            0 => vec![],
            1 => vec![0.5 * (l + h)],
            _ => (0..n).map(|i| l + (h - l) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Autonomous ODE `ẋ = f(x)` together with the box it is sampled on.
#[derive(Clone)]
pub struct DynamicalSystem {
    name: String,
    rhs: VectorField,
    domain: Domain,
    params: BTreeMap<String, f64>,
    margin: f64,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("domain", &self.domain)
            .field("params", &self.params)
            .field("margin", &self.margin)
            .finish()
    }
}

impl DynamicalSystem {
    /// `rhs` writes `f(x)` into its second argument; both slices have length `domain.dim()`.
    pub fn new<F>(name: impl Into<String>, domain: Domain, params: BTreeMap<String, f64>, rhs: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { name: name.into(), rhs: Arc::new(rhs), domain, params, margin: DEFAULT_MARGIN }
    }

    /// The zero vector field, for which every flow is the identity.
    pub fn zero(domain: Domain) -> Self {
        Self::new("zero", domain, BTreeMap::new(), |_, dx| dx.fill(0.0))
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Domain grown by the configured margin; leaving it flags a trajectory.
    pub fn inflated_domain(&self) -> Domain {
        self.domain.inflate(self.margin)
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn rhs(&self, x: &[f64]) -> Vector {
        let mut dx = Vector::zeros(self.dim());
        (self.rhs)(x, dx.as_mut_slice());
        dx
    }

    pub fn flow(&self, x0: &[f64], t: f64, rel_tol: f64, abs_tol: f64) -> Result<FlowResult> {
        flow(self, x0, t, rel_tol, abs_tol)
    }
}

/// State of the system after integrating for the requested time.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub state: Vector,
    /// The trajectory left the inflated domain; `state` is where it was detected.
    pub left_domain: bool,
    pub steps_taken: usize,
}

/// Solution `x(t; x0)` of `ẋ = f(x)`.
///
/// Integration stops early (with `left_domain` set) once the trajectory leaves
/// [`DynamicalSystem::inflated_domain`].
pub fn flow(system: &DynamicalSystem, x0: &[f64], t: f64, rel_tol: f64, abs_tol: f64) -> Result<FlowResult> {
    check_dim(system.dim(), x0.len())?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("flow time must be finite and non-negative, got {t}")));
    }
    if !(rel_tol > 0.0 && abs_tol > 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { time: 0.0, reason: "non-finite initial state".into() });
    }
    let outer = system.inflated_domain();
    let rhs = &system.rhs;
    let run = integrator::dopri54(
        &|x: &[f64], dx: &mut [f64]| rhs(x, dx),
        x0,
        t,
        Tolerances { rel: rel_tol, abs: abs_tol },
        |x| outer.contains(x),
    )?;
    Ok(FlowResult {
        state: Vector::from_vec(run.state),
        left_domain: run.stopped_early,
        steps_taken: run.steps,
    })
}
