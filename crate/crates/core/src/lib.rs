//! Koopman surrogate models from extended dynamic mode decomposition (eDMD),
//! with reprojection of the propagated observables back onto the manifold
//! `M = im(Ψ)` swept out by the dictionary.
//!
//! The pipeline is
//!
//! 1. [`dynamics`]: benchmark vector fields and reference flows,
//! 2. [`dictionary`]: monomial observables `Ψ` and their Jacobians,
//! 3. [`edmd`]: snapshot sampling and the least-squares fit of `K̂`,
//! 4. [`manifold`]: metrics on the lifted space and projections onto `M`,
//! 5. [`surrogate`]: the discrete-time surrogate `x⁺ = Ψ⁻¹ ∘ π(K̂ Ψ(x))`,
//! 6. [`evaluation`] and [`experiments`]: error measures and the benchmark runs.

pub mod checks;
pub mod config;
pub mod dictionary;
pub mod dynamics;
pub mod edmd;
mod error;
pub mod evaluation;
pub mod experiments;
pub mod io;
pub mod manifold;
pub mod surrogate;

pub use dictionary::Dictionary;
pub use dynamics::{DynamicalSystem, Domain, FlowResult};
pub use edmd::{KoopmanApproximation, SnapshotSet};
pub use error::{Error, Result};
pub use manifold::{ClosestPointConfig, Metric, Projector, ReconstructionMap};
pub use surrogate::{Rollout, Surrogate};

/// State vectors and lifted points share the dense vector type.
pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
