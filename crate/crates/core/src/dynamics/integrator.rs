//! Dormand–Prince 5(4) on a dyadic family of uniform grids.
//!
//! The step count is the smallest power of two for which the embedded error
//! estimate of every step is within tolerance. A tighter tolerance can only
//! select the same or a finer grid, and the same grid gives bit-identical
//! results, so the error never grows when the tolerance shrinks (in the
//! asymptotic regime where refining a grid reduces the error).

use crate::{Error, Result};

// The fields are autonomous, so the nodes c_i never enter.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th-order weights minus embedded 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Finest grid has `2^MAX_LEVEL` steps.
const MAX_LEVEL: u32 = 40;
/// Total steps over all levels of one integration.
const MAX_STEPS: usize = 4_000_000;

#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Debug)]
pub(crate) struct Integration {
    pub state: Vec<f64>,
    pub steps: usize,
    /// Set when `keep_going` returned false after an accepted step.
    pub stopped_early: bool,
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], tol: Tolerances) -> f64 {
    let n = err.len() as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = tol.abs + tol.rel * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

struct Workspace {
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), stage: vec![0.0; n], y_new: vec![0.0; n], err: vec![0.0; n] }
    }

    /// One step from `y` with `k[0] = f(y)`; leaves the new state in `y_new`,
    /// `f(y_new)` in `k[6]`, and returns the scaled error norm.
    fn step<F>(&mut self, f: &F, y: &[f64], h: f64, tol: Tolerances) -> f64
    where
        F: Fn(&[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let stage = &mut self.stage;
        for i in 0..n {
            stage[i] = y[i] + h * A21 * k1[i];
        }
        f(stage, k2);
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(stage, k3);
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(stage, k4);
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(stage, k5);
        for i in 0..n {
            stage[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(stage, k6);
        for i in 0..n {
            self.y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(&self.y_new, k7);
        for i in 0..n {
            self.err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        if self.y_new.iter().chain(k7.iter()).any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        error_norm(&self.err, y, &self.y_new, tol)
    }
}

enum Level {
    Done(Integration),
    /// A step at this time exceeded the tolerance or produced a non-finite state.
    TooCoarse { time: f64, steps: usize },
}

fn run_level<F, G>(f: &F, y0: &[f64], t_end: f64, n_steps: u64, tol: Tolerances, keep_going: &mut G, ws: &mut Workspace) -> Level
where
    F: Fn(&[f64], &mut [f64]),
    G: FnMut(&[f64]) -> bool,
{
    let h = t_end / n_steps as f64;
    let mut y = y0.to_vec();
    f(&y, &mut ws.k[0]);
    for i in 0..n_steps {
        // `!(en <= 1)` also rejects NaN
        if !(ws.step(f, &y, h, tol) <= 1.0) {
            return Level::TooCoarse { time: i as f64 * h, steps: i as usize + 1 };
        }
        std::mem::swap(&mut y, &mut ws.y_new);
        ws.k.swap(0, 6);
        if !keep_going(&y) {
            return Level::Done(Integration { state: y, steps: i as usize + 1, stopped_early: true });
        }
    }
    Level::Done(Integration { state: y, steps: n_steps as usize, stopped_early: false })
}

/// Integrates `y' = f(y)` from `t = 0` to `t_end`.
///
/// `keep_going` is consulted after every accepted step; returning `false`
/// stops the integration at the current (intermediate) state.
pub(crate) fn dopri54<F, G>(f: &F, y0: &[f64], t_end: f64, tol: Tolerances, mut keep_going: G) -> Result<Integration>
where
    F: Fn(&[f64], &mut [f64]),
    G: FnMut(&[f64]) -> bool,
{
    if t_end == 0.0 {
        return Ok(Integration { state: y0.to_vec(), steps: 0, stopped_early: false });
    }
    let mut ws = Workspace::new(y0.len());
    let mut spent = 0;
    let mut furthest = 0.0f64;
    for level in 0..=MAX_LEVEL {
        match run_level(f, y0, t_end, 1u64 << level, tol, &mut keep_going, &mut ws) {
            Level::Done(mut out) => {
                out.steps += spent;
                return Ok(out);
            }
            Level::TooCoarse { time, steps } => {
                spent += steps;
                furthest = furthest.max(time);
                if spent >= MAX_STEPS {
                    return Err(Error::Integration { time: furthest, reason: "step budget exhausted".into() });
                }
            }
        }
    }
    Err(Error::Integration { time: furthest, reason: "step size underflow".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TIGHT: Tolerances = Tolerances { rel: 1e-12, abs: 1e-12 };

    #[test]
    fn exponential_decay_matches_closed_form() {
        let f = |y: &[f64], dy: &mut [f64]| dy[0] = -2.0 * y[0];
        let out = dopri54(&f, &[1.0], 1.5, TIGHT, |_| true).unwrap();
        assert!((out.state[0] - (-3.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let f = |y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let out = dopri54(&f, &[1.0, 0.0], 2.0 * std::f64::consts::PI, TIGHT, |_| true).unwrap();
        assert!((out.state[0] - 1.0).abs() < 1e-10);
        assert!(out.state[1].abs() < 1e-10);
    }

    #[test]
    fn blow_up_reports_time() {
        // y' = y^2, y(0) = 1 explodes at t = 1
        let f = |y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0];
        match dopri54(&f, &[1.0], 2.0, TIGHT, |_| true) {
            Err(Error::Integration { time, .. }) => assert!(time > 0.9 && time <= 1.0, "{time}"),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn callback_can_stop() {
        let f = |_: &[f64], dy: &mut [f64]| dy[0] = 1.0;
        let out = dopri54(&f, &[0.0], 10.0, TIGHT, |y| y[0] < 1.0).unwrap();
        assert!(out.stopped_early);
        assert!(out.state[0] >= 1.0 && out.state[0] < 10.0);
    }
}
