//! TOML experiment configuration.
//!
//! ```toml
//! [system]
//! name = "pendulum"
//! params = {}            # overrides, e.g. { rho = 28.0 }
//! margin = 0.5           # inflation of the domain, fraction of each axis length
//!
//! [dictionary]
//! type = "monomial"
//! degree = 3
//! exclude = []           # monomial labels, e.g. ["x"]
//!
//! [edmd]
//! dt = 0.01
//! m = 10000
//! seed = 42
//! ridge = 0.0
//! flow_tol = 1e-12
//! sigma_data = "training" # or "held_out"
//!
//! [projection]
//! projectors = ["coordinate", "geometric"]
//! max_iters = 100
//! grad_tol = 1e-10
//! multistart_grid = 5
//! damping_init = 1e-3
//! warm_start = true
//! search_box = "inflated"   # or "domain"
//!
//! [evaluation]
//! check_points = 500
//! grid = [50, 50]
//! dts = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2]
//! n_eval = 500
//! rollout_steps = 2000
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Every key is optional; missing keys take the defaults shown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::dynamics::systems::system_by_name;
use crate::dynamics::{DynamicalSystem, DEFAULT_MARGIN};
use crate::edmd::FitOptions;
use crate::manifold::{ClosestPointConfig, ProjectorSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub dictionary: DictionarySection,
    pub edmd: EdmdSection,
    pub projection: ProjectionSection,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub margin: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self { name: "pendulum".into(), params: BTreeMap::new(), margin: DEFAULT_MARGIN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySection {
    #[serde(rename = "type")]
    pub kind: String,
    pub degree: u32,
    pub exclude: Vec<String>,
}

impl Default for DictionarySection {
    fn default() -> Self {
        Self { kind: "monomial".into(), degree: 3, exclude: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaData {
    Training,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdSection {
    pub dt: f64,
    pub m: usize,
    pub seed: u64,
    pub ridge: f64,
    pub flow_tol: f64,
    pub sigma_data: SigmaData,
}

impl Default for EdmdSection {
    fn default() -> Self {
        Self { dt: 0.01, m: 10_000, seed: 42, ridge: 0.0, flow_tol: 1e-12, sigma_data: SigmaData::Training }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchBox {
    Inflated,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub projectors: Vec<String>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub multistart_grid: usize,
    pub damping_init: f64,
    pub warm_start: bool,
    pub search_box: SearchBox,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            projectors: vec!["coordinate".into(), "geometric".into()],
            max_iters: 100,
            grad_tol: 1e-10,
            multistart_grid: 5,
            damping_init: 1e-3,
            warm_start: true,
            search_box: SearchBox::Inflated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub check_points: usize,
    pub grid: Vec<usize>,
    pub dts: Vec<f64>,
    pub n_eval: usize,
    pub rollout_steps: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            check_points: 500,
            grid: vec![50, 50],
            dts: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            n_eval: 500,
            rollout_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves names and checks numeric ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let system = self.system()?;
        self.dictionary_for(&system)?;
        if self.dictionary.kind != "monomial" {
            return bad(format!("unknown dictionary type `{}`", self.dictionary.kind));
        }
        if !(self.system.margin >= 0.0) {
            return bad("system.margin must be non-negative".into());
        }
        let e = &self.edmd;
        if !(e.dt > 0.0 && e.dt.is_finite()) {
            return bad("edmd.dt must be positive".into());
        }
        if e.m == 0 {
            return bad("edmd.m must be at least 1".into());
        }
        if !(e.ridge >= 0.0) {
            return bad("edmd.ridge must be non-negative".into());
        }
        if !(e.flow_tol > 0.0) {
            return bad("edmd.flow_tol must be positive".into());
        }
        self.projector_specs()?;
        self.solver_config(&system).validate().map_err(|e| Error::Config(e.to_string()))?;
        let ev = &self.evaluation;
        if ev.grid.len() != system.dim() || ev.grid.contains(&0) {
            return bad(format!("evaluation.grid needs {} positive entries", system.dim()));
        }
        if ev.dts.iter().any(|dt| !(*dt > 0.0)) {
            return bad("evaluation.dts must be positive".into());
        }
        if ev.check_points == 0 || ev.n_eval == 0 {
            return bad("evaluation.check_points and n_eval must be at least 1".into());
        }
        Ok(())
    }

    pub fn system(&self) -> Result<DynamicalSystem> {
        Ok(system_by_name(&self.system.name, &self.system.params)?.with_margin(self.system.margin))
    }

    pub fn dictionary_for(&self, system: &DynamicalSystem) -> Result<Dictionary> {
        if self.dictionary.degree == 0 {
            return Err(Error::Config("dictionary.degree must be at least 1".into()));
        }
        Dictionary::monomial_excluding_labels(self.dictionary.degree, system.dim(), &self.dictionary.exclude)
    }

    pub fn projector_specs(&self) -> Result<Vec<ProjectorSpec>> {
        self.projection.projectors.iter().map(|p| ProjectorSpec::parse(p)).collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { ridge: self.edmd.ridge, ..FitOptions::default() }
    }

    pub fn solver_config(&self, system: &DynamicalSystem) -> ClosestPointConfig {
        let p = &self.projection;
        let search_box = match p.search_box {
            SearchBox::Inflated => system.inflated_domain(),
            SearchBox::Domain => system.domain().clone(),
        };
        ClosestPointConfig {
            max_iters: p.max_iters,
            grad_tol: p.grad_tol,
            multistart_grid: p.multistart_grid,
            search_box,
            damping_init: p.damping_init,
            warm_start: p.warm_start,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.system().unwrap().name(), "pendulum");
        assert_eq!(cfg.dictionary_for(&cfg.system().unwrap()).unwrap().len(), 10);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.system.name = "lorenz".into();
        cfg.dictionary.degree = 4;
        cfg.dictionary.exclude = vec!["x".into()];
        cfg.evaluation.grid = vec![5, 5, 5];
        cfg.edmd.sigma_data = SigmaData::HeldOut;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dictionary_for(&back.system().unwrap()).unwrap().len(), 34);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[system]\nname = \"nope\"",
            "[system]\nparams = { mu = 1.0 }",
            "[dictionary]\nexclude = [\"q\"]",
            "[edmd]\ndt = -1.0",
            "[edmd]\nm = 0",
            "[projection]\nprojectors = [\"fancy\"]",
            "[projection]\nmax_iters = 0",
            "[evaluation]\ngrid = [3]",
            "[nonsense]\nx = 1",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
