//! Closed-loop orchestration: multi-rate scheduling (tracker every step,
//! planner every K steps), reference broadcast over a synchronous round
//! bus, consensus-gated partition swaps, and the iterative periodic
//! coverage optimizer.

use crate::density::{self, DensityError, DensityField, QuadratureConfig};
use crate::dynamics::{AgentModel, Trajectory, TrajectoryTag};
use crate::geometry::{
    min_pairwise_distance, ConvexPolygon, GeometryError, PartitionSequence, Point,
};
use crate::planner::{
    plan_nonperiodic, plan_periodic, plan_periodic_coupled, steady_plan, PlannerError,
    ReferencePlan,
};
use crate::tracker::{
    candidate_trajectory, check_update_condition, closed_loop_step, solve_tracking,
    TrackerConstants, TrackerError,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid fleet configuration: {0}")]
    Config(String),
    #[error("round {round}: missing vote from agent {agent}")]
    MissingVote { round: usize, agent: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("t = {t}, agent {agent}: {source}")]
    Planner {
        t: usize,
        agent: usize,
        source: PlannerError,
    },
    #[error("t = {t}, agent {agent}: {source}")]
    Tracker {
        t: usize,
        agent: usize,
        source: TrackerError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    LloydPeriodic,
    PeriodicMpc,
    NonperiodicMpc,
}

/// One agent: its dynamics, its tracking constants, and its start state.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub model: AgentModel,
    pub consts: TrackerConstants,
    pub x0: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct FleetConfig {
    pub agents: Vec<AgentSpec>,
    pub arena: ConvexPolygon,
    pub field: DensityField,
    /// Planning horizon T.
    pub plan_horizon: usize,
    pub r_max: f64,
    pub epsilon: f64,
    pub mode: RunMode,
    pub seed: u64,
    pub max_steps: usize,
    /// Iterative-optimizer stopping threshold on the per-iteration cost drop.
    pub conv_tol: f64,
    /// Freeze the reference: planning rounds return the shifted previous
    /// plan. Test harness knob for the finite-time partition-update bound.
    pub pin_reference: bool,
    pub quadrature: QuadratureConfig,
}

impl FleetConfig {
    pub fn agents_len(&self) -> usize {
        self.agents.len()
    }

    /// Common planner interval K.
    pub fn interval(&self) -> usize {
        self.agents[0].consts.planner_interval
    }

    pub fn validate(&self) -> Result<(), CoordinatorError> {
        if self.agents.is_empty() {
            return Err(CoordinatorError::Config("no agents".into()));
        }
        if self.plan_horizon == 0 || self.max_steps == 0 {
            return Err(CoordinatorError::Config(
                "plan horizon and step count must be positive".into(),
            ));
        }
        if self.r_max <= 0.0 || self.epsilon <= 0.0 {
            return Err(CoordinatorError::Config(
                "r_max and epsilon must be positive".into(),
            ));
        }
        let k = self.interval();
        let mut positions = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            a.consts
                .validate()
                .map_err(|e| CoordinatorError::Config(format!("agent {i}: {e}")))?;
            if a.consts.planner_interval != k {
                return Err(CoordinatorError::Config(
                    "all agents must share the planner interval".into(),
                ));
            }
            if self.mode != RunMode::LloydPeriodic && a.consts.horizon + 1 > self.plan_horizon {
                return Err(CoordinatorError::Config(format!(
                    "agent {i}: tracking horizon {} does not fit inside the plan horizon {}",
                    a.consts.horizon, self.plan_horizon
                )));
            }
            let p = a
                .model
                .output(&a.x0)
                .map_err(|e| CoordinatorError::Config(format!("agent {i}: {e}")))?;
            // Models without a steady hover (e.g. minimum-speed vehicles)
            // still validate; the run itself needs a steady start and will
            // abort at the initial plan instead.
            if let Some((xs, us)) = a.model.steady_state_at(&p) {
                if (&a.x0 - &xs).norm() > 1e-9 {
                    return Err(CoordinatorError::Config(format!(
                        "agent {i}: start state is not a steady state"
                    )));
                }
                if !a.model.state_box.shrink(self.epsilon).contains(&xs, 0.0)
                    || !a.model.input_box.shrink(self.epsilon).contains(&us, 0.0)
                {
                    return Err(CoordinatorError::Config(format!(
                        "agent {i}: steady start leaves the interior boxes"
                    )));
                }
            } else if !a.model.state_box.contains(&a.x0, 0.0) {
                return Err(CoordinatorError::Config(format!(
                    "agent {i}: start state leaves the state box"
                )));
            }
            positions.push(p);
        }
        if positions.len() >= 2 {
            let d = min_pairwise_distance(&positions)?;
            if d < 2.0 * (self.r_max + self.epsilon) {
                return Err(CoordinatorError::Config(format!(
                    "initial pairwise distance {d:.4} below 2(R_max + eps) = {:.4}",
                    2.0 * (self.r_max + self.epsilon)
                )));
            }
        }
        Ok(())
    }
}

/// One bus message. The coordinator keeps the full trace for auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMessage {
    pub sender: usize,
    pub round: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Payload {
    ReferencePositions(Vec<Point>),
    UpdateVote(bool),
    PlanAck,
}

/// Unanimous AND over exactly-one-vote-per-agent.
pub fn consensus_round(votes: &[Option<bool>], round: usize) -> Result<bool, CoordinatorError> {
    for (agent, v) in votes.iter().enumerate() {
        if v.is_none() {
            return Err(CoordinatorError::MissingVote { round, agent });
        }
    }
    Ok(votes.iter().all(|v| v.unwrap()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub positions: Vec<Point>,
    pub tracker_values: Vec<f64>,
    /// Instantaneous locational cost over the Voronoi partition of the
    /// current positions.
    pub coverage_cost: f64,
    pub min_distance: f64,
    /// Every agent inside its own eroded cell this step.
    pub containment_ok: bool,
    pub swapped: bool,
    pub planned: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Iterative-optimizer cost trace (one total per iteration).
    pub iteration_costs: Vec<f64>,
    pub swap_times: Vec<usize>,
    /// Tracker values measured at plan-activation steps, one per agent per
    /// activation (the region-of-attraction check).
    pub post_update_values: Vec<f64>,
    pub planner_rounds: usize,
    pub messages: Vec<RoundMessage>,
    pub final_positions: Vec<Point>,
}

fn position_rows(plans: &[ReferencePlan], horizon: usize) -> Vec<Vec<Point>> {
    (0..horizon)
        .map(|k| plans.iter().map(|p| *p.position_at(k)).collect())
        .collect()
}

fn instantaneous_cost(
    field: &DensityField,
    positions: &[Point],
    arena: &ConvexPolygon,
    t: usize,
    cfg: &QuadratureConfig,
) -> Result<f64, CoordinatorError> {
    let cells = crate::geometry::voronoi_partition(positions, arena)?;
    Ok(density::locational_cost(field, positions, &cells, t, cfg)?)
}

/// Iterative periodic coverage optimization: re-partition from the current
/// plan positions, re-plan every agent against the shifted partitions, and
/// repeat until the total coverage value stops decreasing.
pub fn run_lloyd_periodic(config: &FleetConfig) -> Result<RunLog, CoordinatorError> {
    config.validate()?;
    let t_len = config.plan_horizon;
    let cfg = &config.quadrature;
    let m = config.agents_len();

    let p0: Vec<Point> = config
        .agents
        .iter()
        .map(|a| a.model.output(&a.x0).unwrap())
        .collect();
    let initial = PartitionSequence::from_position_rows(
        &vec![p0.clone(); t_len],
        &config.arena,
        config.r_max,
        config.epsilon,
    )?;
    let mut plans: Vec<ReferencePlan> = Vec::with_capacity(m);
    for (i, a) in config.agents.iter().enumerate() {
        plans.push(
            steady_plan(
                &a.model,
                &p0[i],
                t_len,
                &initial.agent_cells(i),
                &config.field,
                0,
                TrajectoryTag::Periodic,
                cfg,
            )
            .map_err(|source| CoordinatorError::Planner { t: 0, agent: i, source })?,
        );
    }

    let mut log = RunLog::default();
    let mut prev_total = f64::INFINITY;
    for iter in 0..config.max_steps {
        let rows = position_rows(&plans, t_len);
        let partition =
            PartitionSequence::from_position_rows(&rows, &config.arena, config.r_max, config.epsilon)?;
        let mut total = 0.0;
        for (i, a) in config.agents.iter().enumerate() {
            let cells = partition.agent_cells(i).shift_periodic(1);
            let seed = plans[i]
                .shift(1)
                .map_err(|source| CoordinatorError::Planner { t: iter, agent: i, source })?;
            plans[i] = plan_periodic(
                &a.model,
                &cells,
                &config.field,
                iter + 1,
                config.epsilon,
                Some(&seed),
                cfg,
            )
            .map_err(|source| CoordinatorError::Planner { t: iter, agent: i, source })?;
            total += plans[i].coverage_value;
        }
        log.iteration_costs.push(total);

        let positions: Vec<Point> = plans.iter().map(|p| *p.position_at(0)).collect();
        let min_distance = if m >= 2 {
            min_pairwise_distance(&positions)?
        } else {
            f64::INFINITY
        };
        log.steps.push(StepRecord {
            t: iter,
            positions: positions.clone(),
            tracker_values: vec![0.0; m],
            coverage_cost: total,
            min_distance,
            containment_ok: true,
            swapped: false,
            planned: true,
        });
        log.final_positions = positions;

        if prev_total - total < config.conv_tol {
            break;
        }
        prev_total = total;
    }
    Ok(log)
}

/// Per-agent mutable state for the closed-loop runs.
struct AgentRuntime {
    x: DVector<f64>,
    plan: ReferencePlan,
    pending_plan: Option<ReferencePlan>,
    candidate: Option<Trajectory>,
    cells: crate::geometry::AgentCells,
}

/// Closed-loop coverage MPC (periodic and nonperiodic scheduling share this
/// loop; only the planner call and the shift semantics differ).
fn run_mpc(config: &FleetConfig, periodic: bool) -> Result<RunLog, CoordinatorError> {
    config.validate()?;
    let t_len = config.plan_horizon;
    let k_int = config.interval();
    let cfg = &config.quadrature;
    let m = config.agents_len();
    let tag = if periodic {
        TrajectoryTag::Periodic
    } else {
        TrajectoryTag::TerminalSteadyState
    };

    let p0: Vec<Point> = config
        .agents
        .iter()
        .map(|a| a.model.output(&a.x0).unwrap())
        .collect();
    let partition0 = PartitionSequence::from_position_rows(
        &vec![p0.clone(); t_len],
        &config.arena,
        config.r_max,
        config.epsilon,
    )?;

    // Initial reference planning from the steady start (tracking value 0).
    let mut agents: Vec<AgentRuntime> = Vec::with_capacity(m);
    for (i, a) in config.agents.iter().enumerate() {
        let cells = partition0.agent_cells(i);
        let ss = steady_plan(
            &a.model,
            &p0[i],
            t_len,
            &cells,
            &config.field,
            0,
            tag,
            cfg,
        )
        .map_err(|source| CoordinatorError::Planner { t: 0, agent: i, source })?;
        let plan = if config.pin_reference {
            ss
        } else if periodic {
            plan_periodic_coupled(
                &a.model,
                &cells,
                &config.field,
                0,
                config.epsilon,
                &ss,
                0.0,
                &a.consts,
                cfg,
            )
            .map_err(|source| CoordinatorError::Planner { t: 0, agent: i, source })?
        } else {
            plan_nonperiodic(
                &a.model,
                &cells,
                &config.field,
                0,
                config.epsilon,
                &ss,
                &a.consts,
                cfg,
            )
            .map_err(|source| CoordinatorError::Planner { t: 0, agent: i, source })?
        };
        agents.push(AgentRuntime {
            x: a.x0.clone(),
            plan,
            pending_plan: None,
            candidate: None,
            cells,
        });
    }

    let mut pending_partition: Option<PartitionSequence> = None;
    let mut log = RunLog::default();

    for t in 0..config.max_steps {
        let round = t / k_int;
        let planning = t % k_int == 0;
        let mut swapped = false;

        if planning && t > 0 {
            // Vote on the candidates against the candidate partitions built
            // from the references broadcast last round.
            let pend = pending_partition.take().expect("candidate partition pending");
            let mut votes: Vec<Option<bool>> = vec![None; m];
            for (i, a) in config.agents.iter().enumerate() {
                let ok = check_update_condition(
                    agents[i].candidate.as_ref().expect("candidate built"),
                    &a.model,
                    &pend.agent_cells(i),
                    periodic,
                );
                votes[i] = Some(ok);
                log.messages.push(RoundMessage {
                    sender: i,
                    round,
                    payload: Payload::UpdateVote(ok),
                });
            }
            if consensus_round(&votes, round)? {
                for (i, agent) in agents.iter_mut().enumerate() {
                    agent.cells = pend.agent_cells(i);
                }
                swapped = true;
                log.swap_times.push(t);
            }
            // Activate the plans computed last round for this step.
            for agent in agents.iter_mut() {
                agent.plan = agent.pending_plan.take().expect("pending plan");
            }
        }

        // Positions and containment at time t, before the input is applied.
        let step_positions: Vec<Point> = agents
            .iter()
            .zip(&config.agents)
            .map(|(rt, a)| a.model.output(&rt.x).unwrap())
            .collect();
        let containment_ok = agents
            .iter()
            .zip(&step_positions)
            .all(|(rt, p)| rt.cells.eroded[0].covers(p, 1e-7));

        // Tracking MPC at every step.
        let mut values = Vec::with_capacity(m);
        for (i, a) in config.agents.iter().enumerate() {
            let refs = agents[i].plan.ref_segment(a.consts.horizon);
            let sol = solve_tracking(
                &a.model,
                &agents[i].x,
                &refs,
                &agents[i].cells,
                &a.consts,
                agents[i].candidate.as_ref(),
            )
            .map_err(|source| CoordinatorError::Tracker { t, agent: i, source })?;
            values.push(sol.value);
            let next_candidate = candidate_trajectory(&sol, &refs, &a.model);
            agents[i].x = closed_loop_step(&a.model, &agents[i].x, &sol);
            agents[i].candidate = Some(next_candidate);
        }
        if planning && t > 0 {
            log.post_update_values.extend(values.iter().copied());
        }

        if planning {
            // Plan for t + K against this round's partitions and broadcast
            // the resulting reference positions.
            log.planner_rounds += 1;
            for (i, a) in config.agents.iter().enumerate() {
                let pin_shift = if periodic { k_int % t_len } else { k_int.min(t_len) };
                let pending = if config.pin_reference {
                    agents[i]
                        .plan
                        .shift(pin_shift)
                        .map_err(|source| CoordinatorError::Planner { t, agent: i, source })?
                } else if periodic {
                    let candidate = agents[i]
                        .plan
                        .shift(k_int % t_len)
                        .map_err(|source| CoordinatorError::Planner { t, agent: i, source })?;
                    plan_periodic_coupled(
                        &a.model,
                        &agents[i].cells.shift_periodic(k_int),
                        &config.field,
                        t + k_int,
                        config.epsilon,
                        &candidate,
                        values[i],
                        &a.consts,
                        cfg,
                    )
                    .map_err(|source| CoordinatorError::Planner { t, agent: i, source })?
                } else {
                    plan_nonperiodic(
                        &a.model,
                        &agents[i].cells.shift_nonperiodic(k_int),
                        &config.field,
                        t + k_int,
                        config.epsilon,
                        &agents[i].plan,
                        &a.consts,
                        cfg,
                    )
                    .map_err(|source| CoordinatorError::Planner { t, agent: i, source })?
                };
                log.messages.push(RoundMessage {
                    sender: i,
                    round,
                    payload: Payload::ReferencePositions(pending.positions.clone()),
                });
                agents[i].pending_plan = Some(pending);
            }
            let pending_plans: Vec<&ReferencePlan> =
                agents.iter().map(|a| a.pending_plan.as_ref().unwrap()).collect();
            let rows: Vec<Vec<Point>> = (0..t_len)
                .map(|k| pending_plans.iter().map(|p| *p.position_at(k)).collect())
                .collect();
            pending_partition = Some(PartitionSequence::from_position_rows(
                &rows,
                &config.arena,
                config.r_max,
                config.epsilon,
            )?);
        }

        // Shift references and partitions by one step.
        for agent in agents.iter_mut() {
            agent.plan = agent
                .plan
                .shift(1)
                .expect("one-step shift is always valid");
            agent.cells = if periodic {
                agent.cells.shift_periodic(1)
            } else {
                agent.cells.shift_nonperiodic(1)
            };
        }

        let min_distance = if m >= 2 {
            min_pairwise_distance(&step_positions)?
        } else {
            f64::INFINITY
        };
        let coverage_cost =
            instantaneous_cost(&config.field, &step_positions, &config.arena, t, cfg)?;
        log.steps.push(StepRecord {
            t,
            positions: step_positions.clone(),
            tracker_values: values,
            coverage_cost,
            min_distance,
            containment_ok,
            swapped,
            planned: planning,
        });
        log.final_positions = step_positions;
    }
    Ok(log)
}

pub fn run_periodic_mpc(config: &FleetConfig) -> Result<RunLog, CoordinatorError> {
    if config.mode != RunMode::PeriodicMpc {
        return Err(CoordinatorError::Config("mode must be PeriodicMpc".into()));
    }
    run_mpc(config, true)
}

pub fn run_nonperiodic_mpc(config: &FleetConfig) -> Result<RunLog, CoordinatorError> {
    if config.mode != RunMode::NonperiodicMpc {
        return Err(CoordinatorError::Config("mode must be NonperiodicMpc".into()));
    }
    run_mpc(config, false)
}
