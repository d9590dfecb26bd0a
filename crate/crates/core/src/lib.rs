//! Monte Carlo library for structured branching populations and their
//! time-inhomogeneous spine (auxiliary) processes.
//!
//! The crate simulates the full measure-valued branching process with its
//! Ulam-Harris genealogy, evaluates closed-form mean-growth functions
//! m(x, s, t) for the bundled models, simulates the biased auxiliary process
//! and the tagged-cell comparison process, and statistically verifies the
//! Many-to-One, whole-tree, fork and uniform-sampling-limit identities at
//! desk scale. See the `cli` module (and the `spinesim` binary) for the
//! command-line front end.

pub mod analysis;
pub mod auxiliary;
pub mod cli;
pub mod error;
pub mod models;
pub mod motion;
pub mod numeric;
pub mod path;
pub mod population;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use models::{ModelSpec, OffspringDraw, TraitValue};
pub use path::{AuxiliaryPath, LineagePath, TraitPath};
pub use population::{Caps, Label, PopulationTree};
pub use stats::{EmpiricalDistribution, MCEstimate};
