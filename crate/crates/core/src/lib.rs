//! Multi-agent time-varying coverage control.
//!
//! Two-layer architecture: a reference trajectory planner that minimizes the
//! horizon coverage cost over Voronoi partition sequences, and a tracking MPC
//! without terminal ingredients that follows the planned references at every
//! step. A fleet coordinator runs the closed loop over a synchronous
//! round-barriered message bus with consensus-gated partition updates.

pub mod coordinator;
pub mod density;
pub mod dynamics;
pub mod geometry;
pub mod nlp;
pub mod planner;
pub mod tracker;

pub use density::{DensityField, MassCentroid, QuadratureConfig};
pub use dynamics::{AgentModel, BoxSet, ModelKind, Trajectory, TrajectoryTag};
pub use geometry::{
    min_pairwise_distance, voronoi_partition, AgentCells, ConvexPolygon, Halfplane,
    PartitionSequence, Point,
};
pub use coordinator::{
    consensus_round, run_lloyd_periodic, run_nonperiodic_mpc, run_periodic_mpc, AgentSpec,
    CoordinatorError, FleetConfig, Payload, RoundMessage, RunLog, RunMode, StepRecord,
};
pub use planner::{
    coupling_budget, plan_nonperiodic, plan_periodic, plan_periodic_coupled, steady_plan,
    CouplingBudget, PlannerError, ReferencePlan,
};
pub use tracker::{
    candidate_trajectory, check_update_condition, closed_loop_step, estimate_tracking_constants,
    finite_update_bounds, n_star, solve_tracking, RefSegment, TrackerConstants, TrackerError,
    TrackerSolution,
};
