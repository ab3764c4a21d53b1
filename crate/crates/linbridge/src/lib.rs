//! Exact bridges of multidimensional linear (Gauss-Markov) SDEs.
//!
//! The library builds the bridge of `dZ = (Q(t) Z + r(t)) dt + S(t) dB`
//! between fixed endpoints, evaluates its exact transition law, samples it by
//! three equivalent representations and machine-verifies the algebraic
//! identities and statistical claims behind those constructions.

pub mod densities;
pub mod error;
pub mod evolution;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod onedim;
pub mod quad;
pub mod samplers;
pub mod verify;

pub use error::{BridgeError, Result};
pub use evolution::{EvolutionOperator, SolverTol};
pub use kernels::{BridgeKernel, KernelOptions};
pub use model::{CoefficientFn, LinearModel};
