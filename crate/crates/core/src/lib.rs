//! Downlink short-packet transmission with user grouping and an intelligent
//! reflecting surface: blocklength model, channel draws, a dense conic
//! solver, reflection design, grouping heuristics and the experiment driver.

pub mod beamform;
pub mod channel;
pub mod conic;
pub mod driver;
pub mod experiment;
pub mod fbl;
pub mod grouping;
pub mod oracle;
pub mod selftest;

pub use beamform::{solve_p2, BeamformResult, P2Context, ScaControls};
pub use channel::{ChannelRealization, Scenario};
pub use conic::{Cone, ConicProblem, ConicSolution, SolverSettings, Status};
pub use driver::{alternating_optimize, monte_carlo, Budget, DriverControls, SchemeId, SchemeKind, SolveResult, TrialRecord};
pub use experiment::ExperimentConfig;
pub use grouping::Grouping;
