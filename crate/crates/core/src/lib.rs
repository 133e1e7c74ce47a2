//! Simulation and analysis of data fragment placement between fixed
//! distributed databases and data-carrying products.
//!
//! The pipeline runs in four steps:
//!
//! 1. [`network`]: an analytic round-trip-time model for database queries,
//!    calibrated against measured means.
//! 2. [`workflow`]: a production line simulated on the [`des`] kernel, where
//!    every machine reads and writes its fragments either on the databases or
//!    on the product, depending on a [`DistributionPattern`].
//! 3. [`sweep`]: every placement pattern at every product throughput, with
//!    replicates.
//! 4. [`analysis`]: a full-factorial regression over the sweep, with
//!    interactions up to three fragments.

pub mod analysis;
pub mod calibration;
pub mod des;
pub mod error;
pub mod network;
pub mod scenario;
pub mod sweep;
pub mod workflow;

pub use error::{Error, Result};
pub use network::{product_access_time, Op, Param, RttModel, RttTarget};
pub use scenario::{
    builtin_scenario, load_scenario, parse_pattern, pattern_from_spec, DistributionPattern,
    Scenario,
};
pub use sweep::{enumerate_patterns, run_sweep, summarize, SweepPlan, SweepRecord, SweepResult};
pub use workflow::{run_simulation, SimOptions, SimResult, Simulator};
