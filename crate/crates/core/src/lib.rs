//! Distributed online primal-dual optimization over networks of shared devices,
//! with user cost functions learned from sporadic noisy feedback through
//! shape-constrained Gaussian processes.
//!
//! The crate is organised bottom-up:
//!
//! * [`gp`]: squared-exponential GP regression, second-derivative processes,
//!   truncated-normal curvature posterior and the constrained surrogate.
//! * [`network`]: star-graph incidence matrices, the plant map and the
//!   tracking constraint.
//! * [`solver`]: projections, the measurement-based primal-dual step, its
//!   model-based twin and the per-instance optimum oracle.
//! * [`scenario`]: the demand-response experiment (devices, users, feedback).
//! * [`metrics`]: regret, path lengths, gradient errors, ACV and bound curves.
//! * [`runner`]: the online loop, CSV/summary emission and run comparison.

pub mod gp;
mod linalg;
pub mod metrics;
pub mod network;
pub mod runner;
pub mod scenario;
pub mod solver;

pub use gp::{FeedbackSet, GibbsSettings, GpError, GpModel, KernelParams, ShapeBounds, Surrogate, SurrogateKind};
pub use metrics::{BoundConstants, MetricsLog, StepRecord};
pub use network::{build_incidence, Plant, Topology, TrackingConstraint};
pub use runner::{Mode, RunOutcome, RunSpec, SimOptions, Summary};
pub use scenario::{build_scenario, Scenario, ScenarioConfig, UserSpec};
pub use solver::{pd_step, solve_instance_oracle, Interval, ProjectionSets, Quadratic, SolverState};


