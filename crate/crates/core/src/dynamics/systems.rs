//! The benchmark systems used throughout the experiments.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{Domain, DynamicalSystem};
use crate::{Error, Result};

pub const SYSTEM_NAMES: [&str; 6] = ["example1", "example2", "duffing", "pendulum", "lorenz", "zero"];

fn defaults(name: &str) -> Option<BTreeMap<String, f64>> {
    let pairs: &[(&str, f64)] = match name {
        "example1" | "example2" => &[("lambda", 1.0)],
        "duffing" | "pendulum" | "zero" => &[],
        "lorenz" => &[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)],
        _ => return None,
    };
    Some(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
}

/// Looks up a builtin system, overriding any of its default parameters.
pub fn system_by_name(name: &str, overrides: &BTreeMap<String, f64>) -> Result<DynamicalSystem> {
    let mut params = defaults(name).ok_or_else(|| Error::UnknownSystem(name.to_string()))?;
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => {
                return Err(Error::Config(format!("system `{name}` has no parameter `{k}`")));
            }
        }
    }
    let sys = match name {
        "example1" => {
            let lambda = params["lambda"];
            DynamicalSystem::new(name, Domain::cube(2, -1.0, 1.0)?, params, move |x, dx| {
                dx[0] = x[0];
                dx[1] = lambda * (x[1] - x[0] * x[0]);
            })
        }
        "example2" => {
            let lambda = params["lambda"];
            DynamicalSystem::new(name, Domain::cube(2, -1.0, 1.0)?, params, move |x, dx| {
                dx[0] = -x[0] * x[0];
                dx[1] = lambda * (x[1] - x[0] * x[0]);
            })
        }
        "duffing" => DynamicalSystem::new(name, Domain::cube(2, -2.0, 2.0)?, params, |x, dx| {
            dx[0] = x[1];
            dx[1] = x[0] - x[0] * x[0] * x[0];
        }),
        "pendulum" => {
            let domain = Domain::new(vec![-PI, -3.0], vec![PI, 3.0])?;
            DynamicalSystem::new(name, domain, params, |x, dx| {
                dx[0] = x[1];
                dx[1] = -x[0].sin();
            })
        }
        "lorenz" => {
            let (sigma, rho, beta) = (params["sigma"], params["rho"], params["beta"]);
            let domain = Domain::new(vec![-20.0, -20.0, 10.0], vec![20.0, 20.0, 50.0])?;
            DynamicalSystem::new(name, domain, params, move |x, dx| {
                dx[0] = sigma * (x[1] - x[0]);
                dx[1] = x[0] * (rho - x[2]) - x[1];
                dx[2] = x[0] * x[1] - beta * x[2];
            })
        }
        "zero" => DynamicalSystem::zero(Domain::cube(2, -1.0, 1.0)?),
        _ => unreachable!(),
    };
    Ok(sys)
}

pub fn builtin_systems() -> Vec<DynamicalSystem> {
    SYSTEM_NAMES
        .iter()
        .map(|n| system_by_name(n, &BTreeMap::new()).expect("builtin"))
        .collect()
}
