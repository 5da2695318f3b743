//! Reference generation: the periodic coverage planner, its trust-region
//! coupled variant, the nonperiodic planner with a terminal steady state,
//! plan shifting, and the coupling budget.

use crate::density::{self, DensityError, DensityField, MassCentroid, QuadratureConfig};
use crate::dynamics::{AgentModel, Trajectory, TrajectoryTag};
use crate::geometry::{AgentCells, Point};
use crate::nlp::{self, Constraint, NlpProblem, NlpStatus, SolverOptions};
use crate::tracker::{RefSegment, TrackerConstants};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("planner infeasible: {0}")]
    Infeasible(String),
    #[error("tracking value {v} exceeds the region-of-attraction bound {v_max}")]
    BudgetDomain { v: f64, v_max: f64 },
    #[error("bad shift: {0}")]
    BadShift(String),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Trust-region radius for one planner update, in stacked-reference norm
/// units, together with the inputs it was computed from.
#[derive(Debug, Clone, Copy)]
pub struct CouplingBudget {
    pub value: f64,
    pub v_max: f64,
    pub l_v: f64,
    pub decay: f64,
    pub interval: usize,
    pub v_now: f64,
}

/// `C(V) = (V_max - lambda^K V) / L_V`.
pub fn coupling_budget(
    v_now: f64,
    consts: &TrackerConstants,
) -> Result<CouplingBudget, PlannerError> {
    if v_now > consts.v_max {
        return Err(PlannerError::BudgetDomain {
            v: v_now,
            v_max: consts.v_max,
        });
    }
    let lambda = consts.decay();
    let value =
        (consts.v_max - lambda.powi(consts.planner_interval as i32) * v_now) / consts.l_v;
    Ok(CouplingBudget {
        value,
        v_max: consts.v_max,
        l_v: consts.l_v,
        decay: lambda,
        interval: consts.planner_interval,
        v_now,
    })
}

/// One agent's reference plan over the planning horizon T. `trajectory`
/// stores T+1 states (the closing state is the first state again in periodic
/// mode and the repeated steady state otherwise) and T inputs; `positions`
/// are the T output positions.
#[derive(Debug, Clone)]
pub struct ReferencePlan {
    pub trajectory: Trajectory,
    pub positions: Vec<Point>,
    pub coverage_value: f64,
    pub partition_used: AgentCells,
}

impl ReferencePlan {
    pub fn horizon(&self) -> usize {
        self.trajectory.inputs.len()
    }

    fn index(&self, k: usize) -> usize {
        let t = self.horizon();
        match self.trajectory.tag {
            TrajectoryTag::Periodic => k % t,
            _ => k.min(t - 1),
        }
    }

    /// Reference state at horizon index k (cyclic in periodic mode, clamped
    /// to the terminal steady state otherwise).
    pub fn state_at(&self, k: usize) -> &DVector<f64> {
        &self.trajectory.states[self.index(k)]
    }

    pub fn input_at(&self, k: usize) -> &DVector<f64> {
        &self.trajectory.inputs[self.index(k)]
    }

    pub fn position_at(&self, k: usize) -> &Point {
        &self.positions[self.index(k)]
    }

    /// Tracker reference over indices 0..=n of this plan.
    pub fn ref_segment(&self, n: usize) -> RefSegment {
        RefSegment {
            states: (0..=n).map(|k| self.state_at(k).clone()).collect(),
            inputs: (0..=n).map(|k| self.input_at(k).clone()).collect(),
        }
    }

    /// Shift by n steps: cyclic rotation in periodic mode; drop the first n
    /// entries and repeat the terminal steady state otherwise. The attached
    /// partition slice shifts the same way.
    pub fn shift(&self, n: usize) -> Result<Self, PlannerError> {
        let t = self.horizon();
        if n > t {
            return Err(PlannerError::BadShift(format!(
                "shift {n} exceeds horizon {t}"
            )));
        }
        let pick = |k: usize| self.index(k + n);
        let mut states: Vec<DVector<f64>> =
            (0..t).map(|k| self.trajectory.states[pick(k)].clone()).collect();
        let inputs: Vec<DVector<f64>> =
            (0..t).map(|k| self.trajectory.inputs[pick(k)].clone()).collect();
        let positions: Vec<Point> = (0..t).map(|k| self.positions[pick(k)]).collect();
        let closing = match self.trajectory.tag {
            TrajectoryTag::Periodic => states[0].clone(),
            _ => states[t - 1].clone(),
        };
        states.push(closing);
        let partition_used = match self.trajectory.tag {
            TrajectoryTag::Periodic => self.partition_used.shift_periodic(n),
            _ => self.partition_used.shift_nonperiodic(n),
        };
        Ok(Self {
            trajectory: Trajectory {
                states,
                inputs,
                tag: self.trajectory.tag,
            },
            positions,
            coverage_value: self.coverage_value,
            partition_used,
        })
    }

    /// Re-evaluate the coverage value (full integral form) against a
    /// partition slice and adopt that slice.
    pub fn rebind_cells(
        &mut self,
        field: &DensityField,
        cells: &AgentCells,
        t0: usize,
        cfg: &QuadratureConfig,
    ) -> Result<(), PlannerError> {
        self.coverage_value = density::horizon_cost(field, &self.positions, cells, t0, cfg)?;
        self.partition_used = cells.clone();
        Ok(())
    }
}

/// Constant steady-state plan at position `p` — the Algorithm-2 starting
/// reference.
pub fn steady_plan(
    model: &AgentModel,
    p: &Point,
    horizon: usize,
    cells: &AgentCells,
    field: &DensityField,
    t0: usize,
    tag: TrajectoryTag,
    cfg: &QuadratureConfig,
) -> Result<ReferencePlan, PlannerError> {
    let (x, u) = model
        .steady_state_at(p)
        .ok_or_else(|| PlannerError::Infeasible("model admits no steady state here".into()))?;
    let trajectory = Trajectory {
        states: vec![x; horizon + 1],
        inputs: vec![u; horizon],
        tag,
    };
    let positions = vec![*p; horizon];
    let coverage_value = density::horizon_cost(field, &positions, cells, t0, cfg)?;
    Ok(ReferencePlan {
        trajectory,
        positions,
        coverage_value,
        partition_used: cells.clone(),
    })
}

/// Per-step mass/centroid pairs of the eroded cells, the data the decomposed
/// objective needs.
fn horizon_moments(
    field: &DensityField,
    cells: &AgentCells,
    t0: usize,
    cfg: &QuadratureConfig,
) -> Result<Vec<MassCentroid>, PlannerError> {
    let mut out = Vec::with_capacity(cells.horizon());
    for k in 0..cells.horizon() {
        if cells.interior[k].is_empty() {
            return Err(PlannerError::Infeasible(format!(
                "interior cell at step {k} is EMPTY"
            )));
        }
        out.push(density::mass_centroid(field, &cells.eroded[k], t0 + k, cfg)?);
    }
    Ok(out)
}

fn moment_objective(moments: &[MassCentroid], positions: &[Point]) -> f64 {
    moments
        .iter()
        .zip(positions)
        .map(|(mc, p)| mc.mass * (p - mc.centroid).norm_squared())
        .sum()
}

pub fn planner_solver_options() -> SolverOptions {
    SolverOptions {
        feas_tol: 1e-9,
        opt_tol: 1e-7,
        ..SolverOptions::default()
    }
}

enum PlanMode {
    Periodic,
    /// Chain dynamics with a terminal steady state and an equality-pinned
    /// prefix (index, state, input).
    Nonperiodic {
        pins: Vec<(usize, DVector<f64>, DVector<f64>)>,
    },
}

/// Shared planner NLP: variables `x_0..x_{T-1}, u_0..u_{T-1}`.
fn solve_reference(
    model: &AgentModel,
    cells: &AgentCells,
    field: &DensityField,
    t0: usize,
    eps: f64,
    seed: Option<&ReferencePlan>,
    mode: PlanMode,
    trust_region: Option<(DVector<f64>, Vec<usize>, f64)>,
    cfg: &QuadratureConfig,
) -> Result<ReferencePlan, PlannerError> {
    let horizon = cells.horizon();
    let n_dim = model.state_dim();
    let m_dim = model.input_dim();
    let dim = horizon * (n_dim + m_dim);
    let x_off = move |k: usize| k * n_dim;
    let u_off = move |k: usize| horizon * n_dim + k * m_dim;
    let c_mat = model.output_matrix();

    let moments = horizon_moments(field, cells, t0, cfg)?;

    // Objective: sum_k m_k |C x_k - c_k|^2 (the d residual is constant in x).
    let mo = moments.clone();
    let c_o = c_mat.clone();
    let objective = move |z: &DVector<f64>| -> f64 {
        (0..horizon)
            .map(|k| {
                let x = z.rows(x_off(k), n_dim);
                let p = &c_o * x;
                let d = Point::new(p[0] - mo[k].centroid.x, p[1] - mo[k].centroid.y);
                mo[k].mass * d.norm_squared()
            })
            .sum()
    };
    let mg = moments.clone();
    let c_g = c_mat.clone();
    let gradient = move |z: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(dim);
        for k in 0..horizon {
            let x = z.rows(x_off(k), n_dim);
            let p = &c_g * x;
            let d = DVector::from_vec(vec![p[0] - mg[k].centroid.x, p[1] - mg[k].centroid.y]);
            g.rows_mut(x_off(k), n_dim)
                .copy_from(&(c_g.transpose() * d * (2.0 * mg[k].mass)));
        }
        g
    };

    // Dynamics equalities. Periodic mode closes the cycle; nonperiodic mode
    // chains k = 0..T-2 and fixes the terminal pair to a steady state.
    let mut equalities = Vec::new();
    let dyn_steps: Vec<(usize, usize)> = match mode {
        PlanMode::Periodic => (0..horizon).map(|k| (k, (k + 1) % horizon)).collect(),
        PlanMode::Nonperiodic { .. } => {
            let mut v: Vec<(usize, usize)> = (0..horizon - 1).map(|k| (k, k + 1)).collect();
            v.push((horizon - 1, horizon - 1)); // steady state: f(x,u) = x
            v
        }
    };
    for (k, succ) in dyn_steps {
        let model_e = model.clone();
        let model_j = model.clone();
        equalities.push(Constraint {
            dim: n_dim,
            eval: Box::new(move |z| {
                let xk = z.rows(x_off(k), n_dim).into_owned();
                let uk = z.rows(u_off(k), m_dim).into_owned();
                z.rows(x_off(succ), n_dim).into_owned() - model_e.step(&xk, &uk).unwrap()
            }),
            jacobian: Box::new(move |z| {
                let xk = z.rows(x_off(k), n_dim).into_owned();
                let uk = z.rows(u_off(k), m_dim).into_owned();
                let (a, b) = model_j.jacobians(&xk, &uk);
                let mut jac = DMatrix::zeros(n_dim, dim);
                for j in 0..n_dim {
                    jac[(j, x_off(succ) + j)] += 1.0;
                }
                // Accumulate: succ may equal k (T = 1 cycle, steady state).
                for r in 0..n_dim {
                    for c in 0..n_dim {
                        jac[(r, x_off(k) + c)] -= a[(r, c)];
                    }
                    for c in 0..m_dim {
                        jac[(r, u_off(k) + c)] -= b[(r, c)];
                    }
                }
                jac
            }),
            curvature: None,
            label: format!("dyn_{k}"),
        });
    }
    if let PlanMode::Nonperiodic { pins } = &mode {
        for (k, xs, us) in pins {
            let rows = n_dim + m_dim;
            let mut a = DMatrix::zeros(rows, dim);
            let mut b = DVector::zeros(rows);
            for j in 0..n_dim {
                a[(j, x_off(*k) + j)] = 1.0;
                b[j] = xs[j];
            }
            for j in 0..m_dim {
                a[(n_dim + j, u_off(*k) + j)] = 1.0;
                b[n_dim + j] = us[j];
            }
            let a2 = a.clone();
            equalities.push(Constraint {
                dim: rows,
                eval: Box::new(move |z| &a * z - &b),
                jacobian: Box::new(move |_| a2.clone()),
                curvature: None,
                label: format!("pin_{k}"),
            });
        }
    }

    // Inequalities: eps-shrunk boxes and interior-cell halfplanes.
    let state_box = model.state_box.shrink(eps);
    let input_box = model.input_box.shrink(eps);
    let mut ineqs = Vec::new();
    for k in 0..horizon {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..n_dim {
            let mut up = vec![0.0; dim];
            up[x_off(k) + j] = 1.0;
            rows.push(up);
            rhs.push(state_box.upper[j]);
            let mut lo = vec![0.0; dim];
            lo[x_off(k) + j] = -1.0;
            rows.push(lo);
            rhs.push(-state_box.lower[j]);
        }
        for j in 0..m_dim {
            let mut up = vec![0.0; dim];
            up[u_off(k) + j] = 1.0;
            rows.push(up);
            rhs.push(input_box.upper[j]);
            let mut lo = vec![0.0; dim];
            lo[u_off(k) + j] = -1.0;
            rows.push(lo);
            rhs.push(-input_box.lower[j]);
        }
        for hp in cells.interior[k].halfplanes() {
            let mut row = vec![0.0; dim];
            // Position is C x; C selects the first two state coordinates.
            row[x_off(k)] = hp.normal.x;
            row[x_off(k) + 1] = hp.normal.y;
            rows.push(row);
            rhs.push(hp.offset);
        }
        let a = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        ineqs.push(Constraint::affine(
            a,
            DVector::from_vec(rhs),
            format!("stage_{k}"),
        ));
    }
    if let Some((center, indices, radius)) = trust_region {
        ineqs.push(Constraint::ball(indices, center, radius, "trust_region"));
    }

    // Seed from the shifted previous plan when available, otherwise from the
    // per-step centroids (steady inputs).
    let mut guess = DVector::zeros(dim);
    match seed {
        Some(plan) => {
            for k in 0..horizon {
                guess.rows_mut(x_off(k), n_dim).copy_from(plan.state_at(k));
                guess.rows_mut(u_off(k), m_dim).copy_from(plan.input_at(k));
            }
        }
        None => {
            for k in 0..horizon {
                if let Some((xs, us)) = model.steady_state_at(&moments[k].centroid) {
                    guess.rows_mut(x_off(k), n_dim).copy_from(&xs);
                    guess.rows_mut(u_off(k), m_dim).copy_from(&us);
                }
            }
        }
    }

    let mut hess = DMatrix::zeros(dim, dim);
    let ctc = c_mat.transpose() * &c_mat;
    for k in 0..horizon {
        hess.view_mut((x_off(k), x_off(k)), (n_dim, n_dim))
            .copy_from(&(&ctc * (2.0 * moments[k].mass)));
    }
    let problem = NlpProblem {
        dim,
        objective: Box::new(objective),
        gradient: Box::new(gradient),
        hessian: Some(Box::new(move |_| hess.clone())),
        equalities,
        inequalities: ineqs,
        initial_guess: guess,
    };
    let sol = nlp::solve(&problem, &planner_solver_options());
    if sol.status == NlpStatus::Infeasible {
        return Err(PlannerError::Infeasible(format!(
            "solver reported infeasible (violation {:.3e})",
            sol.max_violation
        )));
    }

    let mut states: Vec<DVector<f64>> = (0..horizon)
        .map(|k| sol.z.rows(x_off(k), n_dim).into_owned())
        .collect();
    let inputs: Vec<DVector<f64>> = (0..horizon)
        .map(|k| sol.z.rows(u_off(k), m_dim).into_owned())
        .collect();
    let tag = match mode {
        PlanMode::Periodic => {
            states.push(states[0].clone());
            TrajectoryTag::Periodic
        }
        PlanMode::Nonperiodic { .. } => {
            states.push(states[horizon - 1].clone());
            TrajectoryTag::TerminalSteadyState
        }
    };
    let positions: Vec<Point> = states[..horizon]
        .iter()
        .map(|x| model.output(x).unwrap())
        .collect();

    // Candidate-guarantee rule: never return an objective worse than the
    // seed's on the same moments.
    if let Some(plan) = seed {
        let seed_positions: Vec<Point> = (0..horizon).map(|k| *plan.position_at(k)).collect();
        if moment_objective(&moments, &seed_positions) < moment_objective(&moments, &positions)
            && seed_feasible(plan, cells, &state_box)
        {
            let mut out = realign_seed(plan, horizon, tag);
            out.rebind_cells(field, cells, t0, cfg)?;
            return Ok(out);
        }
    }

    for (k, p) in positions.iter().enumerate() {
        if !cells.interior[k].covers(p, 1e-7) {
            return Err(PlannerError::Infeasible(format!(
                "returned position at step {k} escapes its interior cell"
            )));
        }
    }
    let coverage_value = density::horizon_cost(field, &positions, cells, t0, cfg)?;
    Ok(ReferencePlan {
        trajectory: Trajectory {
            states,
            inputs,
            tag,
        },
        positions,
        coverage_value,
        partition_used: cells.clone(),
    })
}

fn seed_feasible(plan: &ReferencePlan, cells: &AgentCells, state_box: &crate::BoxSet) -> bool {
    (0..cells.horizon()).all(|k| {
        cells.interior[k].covers(plan.position_at(k), 1e-9)
            && state_box.contains(plan.state_at(k), 1e-9)
    })
}

fn realign_seed(plan: &ReferencePlan, horizon: usize, tag: TrajectoryTag) -> ReferencePlan {
    let mut states: Vec<DVector<f64>> = (0..horizon).map(|k| plan.state_at(k).clone()).collect();
    let inputs: Vec<DVector<f64>> = (0..horizon).map(|k| plan.input_at(k).clone()).collect();
    let closing = match tag {
        TrajectoryTag::Periodic => states[0].clone(),
        _ => states[horizon - 1].clone(),
    };
    states.push(closing);
    ReferencePlan {
        trajectory: Trajectory {
            states,
            inputs,
            tag,
        },
        positions: (0..horizon).map(|k| *plan.position_at(k)).collect(),
        coverage_value: plan.coverage_value,
        partition_used: plan.partition_used.clone(),
    }
}

/// Periodic coverage planner over the cells' horizon. `seed` is the shifted
/// previous plan (also the candidate for the guarantee rule).
pub fn plan_periodic(
    model: &AgentModel,
    cells: &AgentCells,
    field: &DensityField,
    t0: usize,
    eps: f64,
    seed: Option<&ReferencePlan>,
    cfg: &QuadratureConfig,
) -> Result<ReferencePlan, PlannerError> {
    solve_reference(model, cells, field, t0, eps, seed, PlanMode::Periodic, None, cfg)
}

/// Coupled periodic planner: `candidate` is the previous plan already shifted
/// by K so that its frame matches `cells` (time t+K). The new plan's entries
/// 0..=N may move at most `C(v_now)` from the candidate's in the stacked
/// Euclidean norm over (state, input) pairs.
pub fn plan_periodic_coupled(
    model: &AgentModel,
    cells: &AgentCells,
    field: &DensityField,
    t0: usize,
    eps: f64,
    candidate: &ReferencePlan,
    v_now: f64,
    consts: &TrackerConstants,
    cfg: &QuadratureConfig,
) -> Result<ReferencePlan, PlannerError> {
    let budget = coupling_budget(v_now, consts)?;
    let horizon = cells.horizon();
    let n_seg = consts.horizon;
    assert!(
        n_seg + 1 <= horizon,
        "coupling segment must fit inside the plan horizon"
    );
    if budget.value <= 1e-12 {
        let mut out = realign_seed(candidate, horizon, TrajectoryTag::Periodic);
        out.rebind_cells(field, cells, t0, cfg)?;
        return Ok(out);
    }
    let n_dim = model.state_dim();
    let m_dim = model.input_dim();
    let x_off = |k: usize| k * n_dim;
    let u_off = |k: usize| horizon * n_dim + k * m_dim;
    let mut indices = Vec::new();
    let mut center = Vec::new();
    for k in 0..=n_seg {
        for j in 0..n_dim {
            indices.push(x_off(k) + j);
            center.push(candidate.state_at(k)[j]);
        }
    }
    for k in 0..=n_seg {
        for j in 0..m_dim {
            indices.push(u_off(k % horizon) + j);
            center.push(candidate.input_at(k)[j]);
        }
    }
    solve_reference(
        model,
        cells,
        field,
        t0,
        eps,
        Some(candidate),
        PlanMode::Periodic,
        Some((DVector::from_vec(center), indices, budget.value)),
        cfg,
    )
}

/// Nonperiodic planner: entries 0..=N are pinned by equality to the previous
/// plan's entries K..K+N, the terminal pair is a steady state, and there is
/// no periodicity. `prev` is the unshifted plan from the previous round.
pub fn plan_nonperiodic(
    model: &AgentModel,
    cells: &AgentCells,
    field: &DensityField,
    t0: usize,
    eps: f64,
    prev: &ReferencePlan,
    consts: &TrackerConstants,
    cfg: &QuadratureConfig,
) -> Result<ReferencePlan, PlannerError> {
    let k_int = consts.planner_interval;
    let pins = (0..=consts.horizon)
        .map(|k| {
            (
                k,
                prev.state_at(k_int + k).clone(),
                prev.input_at(k_int + k).clone(),
            )
        })
        .collect();
    let seed = prev.shift(k_int.min(prev.horizon()))?;
    solve_reference(
        model,
        cells,
        field,
        t0,
        eps,
        Some(&seed),
        PlanMode::Nonperiodic { pins },
        None,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConvexPolygon;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn square_cells(horizon: usize) -> AgentCells {
        let cell = ConvexPolygon::rect(-1.0, 1.0, -1.0, 1.0);
        AgentCells {
            cells: vec![cell.clone(); horizon],
            eroded: vec![cell.erode(0.055); horizon],
            interior: vec![cell.erode(0.06); horizon],
        }
    }

    fn test_consts(n: usize, k: usize) -> TrackerConstants {
        TrackerConstants {
            q: DMatrix::identity(2, 2) * 5.0,
            r: DMatrix::identity(2, 2) * 0.1,
            gamma_bar: 4.0,
            alpha_n: 0.9,
            v_max: 20.0,
            l_v: 60.0,
            l_f: 1.0,
            horizon: n,
            planner_interval: k,
        }
    }

    #[test]
    fn coupling_budget_cases() {
        let mut c = test_consts(10, 30);
        // decay = 1 - 0.1/2 = 0.95
        c.gamma_bar = 2.0;
        c.alpha_n = 0.1;
        c.v_max = 70.0;
        c.l_v = 180.0;
        assert_relative_eq!(
            coupling_budget(0.0, &c).unwrap().value,
            70.0 / 180.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(coupling_budget(70.0, &c).unwrap().value, 0.30542, epsilon = 1e-5);
        c.planner_interval = 0;
        assert!(coupling_budget(70.0, &c).unwrap().value.abs() < 1e-12);
        assert!(matches!(
            coupling_budget(70.1, &c),
            Err(PlannerError::BudgetDomain { .. })
        ));
    }

    #[test]
    fn single_step_plan_finds_centroid() {
        let model = AgentModel::single_integrator(0.1, 2.0, 1.0);
        let cells = square_cells(1);
        let field = DensityField::Uniform;
        let plan =
            plan_periodic(&model, &cells, &field, 0, 0.005, None, &QuadratureConfig::default())
                .unwrap();
        // Uniform density on a centered square: centroid at the origin,
        // steady state input zero.
        assert!(plan.positions[0].norm() < 1e-5, "p = {}", plan.positions[0]);
        assert!(plan.trajectory.inputs[0].norm() < 1e-5);
        assert_eq!(plan.trajectory.tag, TrajectoryTag::Periodic);
    }

    fn two_peak_field() -> DensityField {
        DensityField::Custom {
            f: Arc::new(|q: &Point, t: usize| {
                let peak = if t % 2 == 0 {
                    Point::new(-0.5, 0.0)
                } else {
                    Point::new(0.5, 0.0)
                };
                (-(q - peak).norm_squared() / (2.0 * 0.3 * 0.3)).exp()
            }),
            period: Some(2),
            length_scale: Some(0.3),
        }
    }

    #[test]
    fn alternating_peaks_give_alternating_plan() {
        // Generous input box: the whole arena is reachable in one step.
        let model = AgentModel::single_integrator(0.1, 2.0, 20.0);
        let cells = square_cells(2);
        let field = two_peak_field();
        let plan =
            plan_periodic(&model, &cells, &field, 0, 0.005, None, &QuadratureConfig::default())
                .unwrap();
        assert!(plan.positions[0].x < -0.3, "p0 = {}", plan.positions[0]);
        assert!(plan.positions[1].x > 0.3, "p1 = {}", plan.positions[1]);
        assert!(plan.trajectory.consistency_defect(&model) < 1e-7);
    }

    #[test]
    fn refeeding_shifted_optimum_never_worsens() {
        let model = AgentModel::single_integrator(0.1, 2.0, 20.0);
        let cells = square_cells(2);
        let field = two_peak_field();
        let cfg = QuadratureConfig::default();
        let plan = plan_periodic(&model, &cells, &field, 0, 0.005, None, &cfg).unwrap();
        let shifted = plan.shift(1).unwrap();
        let replanned =
            plan_periodic(&model, &shifted.partition_used, &field, 1, 0.005, Some(&shifted), &cfg)
                .unwrap();
        assert!(replanned.coverage_value <= plan.coverage_value + 1e-8);
    }

    #[test]
    fn zero_budget_returns_shifted_plan() {
        let model = AgentModel::single_integrator(0.1, 2.0, 1.0);
        let cells = square_cells(4);
        let field = DensityField::Uniform;
        let cfg = QuadratureConfig::default();
        let mut consts = test_consts(2, 2);
        consts.v_max = 20.0;
        let prev = steady_plan(
            &model,
            &Point::new(0.3, 0.2),
            4,
            &cells,
            &field,
            0,
            TrajectoryTag::Periodic,
            &cfg,
        )
        .unwrap();
        let candidate = prev.shift(consts.planner_interval).unwrap();
        // V such that C = 0: lambda^K V = V_max.
        let v = consts.v_max / consts.decay().powi(2);
        let out = plan_periodic_coupled(
            &model, &cells, &field, 2, 0.005, &candidate, v, &consts, &cfg,
        );
        // V > V_max here, so the domain error fires first.
        assert!(matches!(out, Err(PlannerError::BudgetDomain { .. })));

        // Force the zero-budget path with V = V_max and K = 0.
        consts.planner_interval = 0;
        let out =
            plan_periodic_coupled(&model, &cells, &field, 0, 0.005, &prev, consts.v_max, &consts, &cfg)
                .unwrap();
        for k in 0..4 {
            assert!((out.state_at(k) - prev.state_at(k)).norm() < 1e-12);
            assert!((out.input_at(k) - prev.input_at(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn huge_budget_matches_uncoupled_plan() {
        let model = AgentModel::single_integrator(0.1, 2.0, 20.0);
        let cells = square_cells(4);
        let field = DensityField::Uniform;
        let cfg = QuadratureConfig::default();
        let mut consts = test_consts(2, 1);
        consts.v_max = 1e6;
        consts.l_v = 1.0;
        let prev = steady_plan(
            &model,
            &Point::new(0.4, -0.3),
            4,
            &cells,
            &field,
            0,
            TrajectoryTag::Periodic,
            &cfg,
        )
        .unwrap();
        let candidate = prev.shift(1).unwrap();
        let coupled = plan_periodic_coupled(
            &model, &cells, &field, 1, 0.005, &candidate, 0.0, &consts, &cfg,
        )
        .unwrap();
        let free =
            plan_periodic(&model, &cells, &field, 1, 0.005, Some(&candidate), &cfg).unwrap();
        assert!((coupled.coverage_value - free.coverage_value).abs() < 1e-6);
        for k in 0..4 {
            assert!(coupled.positions[k].norm() < 1e-4); // uniform square centroid
            let _ = free.positions[k];
        }
    }

    #[test]
    fn binding_budget_limits_stacked_distance() {
        let model = AgentModel::single_integrator(0.1, 2.0, 20.0);
        let cells = square_cells(4);
        // Strong off-center peak pulls the plan away from the start.
        let field = DensityField::gaussian_static(0.3, Point::new(0.7, 0.7));
        let cfg = QuadratureConfig::default();
        let mut consts = test_consts(2, 1);
        consts.v_max = 0.02;
        consts.l_v = 1.0;
        let prev = steady_plan(
            &model,
            &Point::new(-0.6, -0.6),
            4,
            &cells,
            &field,
            0,
            TrajectoryTag::Periodic,
            &cfg,
        )
        .unwrap();
        let candidate = prev.shift(1).unwrap();
        let budget = coupling_budget(0.0, &consts).unwrap().value;
        let coupled = plan_periodic_coupled(
            &model, &cells, &field, 1, 0.005, &candidate, 0.0, &consts, &cfg,
        )
        .unwrap();
        let mut dist2 = 0.0;
        for k in 0..=consts.horizon {
            dist2 += (coupled.state_at(k) - candidate.state_at(k)).norm_squared();
            dist2 += (coupled.input_at(k) - candidate.input_at(k)).norm_squared();
        }
        let dist = dist2.sqrt();
        assert!(dist <= budget + 1e-6, "dist {dist} vs budget {budget}");
        assert!(dist >= budget - 1e-3, "budget should bind: {dist} vs {budget}");
    }

    #[test]
    fn nonperiodic_pins_prefix_and_ends_steady() {
        let model = AgentModel::single_integrator(0.1, 2.0, 20.0);
        let cells = square_cells(6);
        let field = DensityField::gaussian_static(0.4, Point::new(0.5, 0.1));
        let cfg = QuadratureConfig::default();
        let consts = test_consts(2, 2);
        let prev = steady_plan(
            &model,
            &Point::new(-0.2, -0.2),
            6,
            &cells,
            &field,
            0,
            TrajectoryTag::TerminalSteadyState,
            &cfg,
        )
        .unwrap();
        let plan =
            plan_nonperiodic(&model, &cells, &field, 2, 0.005, &prev, &consts, &cfg).unwrap();
        assert_eq!(plan.trajectory.tag, TrajectoryTag::TerminalSteadyState);
        for k in 0..=consts.horizon {
            assert!(
                (plan.state_at(k) - prev.state_at(consts.planner_interval + k)).norm() < 1e-6
            );
        }
        // Terminal steady state.
        let t = plan.horizon();
        let x_last = &plan.trajectory.states[t - 1];
        let u_last = &plan.trajectory.inputs[t - 1];
        assert!((model.step(x_last, u_last).unwrap() - x_last).norm() < 1e-8);
        // The free tail moves toward the density peak.
        assert!(plan.positions[t - 1].x > plan.positions[0].x);
    }

    #[test]
    fn nonperiodic_fixed_point_at_centroid() {
        let model = AgentModel::single_integrator(0.1, 2.0, 1.0);
        let cells = square_cells(5);
        let field = DensityField::Uniform;
        let cfg = QuadratureConfig::default();
        let consts = test_consts(2, 1);
        // Centroid of the uniform square is the origin; a steady plan there
        // is already optimal.
        let prev = steady_plan(
            &model,
            &Point::new(0.0, 0.0),
            5,
            &cells,
            &field,
            0,
            TrajectoryTag::TerminalSteadyState,
            &cfg,
        )
        .unwrap();
        let plan =
            plan_nonperiodic(&model, &cells, &field, 1, 0.005, &prev, &consts, &cfg).unwrap();
        for k in 0..5 {
            assert!(plan.positions[k].norm() < 1e-6);
        }
        assert!(plan.coverage_value <= prev.coverage_value + 1e-9);
    }

    #[test]
    fn shift_semantics() {
        let model = AgentModel::single_integrator(0.1, 2.0, 1.0);
        let cells = square_cells(3);
        let field = DensityField::Uniform;
        let cfg = QuadratureConfig::default();
        let mut plan = steady_plan(
            &model,
            &Point::new(0.0, 0.0),
            3,
            &cells,
            &field,
            0,
            TrajectoryTag::Periodic,
            &cfg,
        )
        .unwrap();
        for (k, s) in plan.trajectory.states.iter_mut().enumerate().take(3) {
            s[0] = k as f64; // distinguishable entries a, b, c
        }
        plan.positions = plan.trajectory.states[..3]
            .iter()
            .map(|x| Point::new(x[0], x[1]))
            .collect();

        let rot = plan.shift(1).unwrap();
        assert_eq!(
            rot.positions.iter().map(|p| p.x).collect::<Vec<_>>(),
            vec![1.0, 2.0, 0.0]
        );
        let ident = plan.shift(3).unwrap();
        assert_eq!(
            ident.positions.iter().map(|p| p.x).collect::<Vec<_>>(),
            vec![0.0, 1.0, 2.0]
        );

        let mut np = plan.clone();
        np.trajectory.tag = TrajectoryTag::TerminalSteadyState;
        let shifted = np.shift(2).unwrap();
        assert_eq!(
            shifted.positions.iter().map(|p| p.x).collect::<Vec<_>>(),
            vec![2.0, 2.0, 2.0]
        );

        assert!(matches!(plan.shift(4), Err(PlannerError::BadShift(_))));
    }

    #[test]
    fn planner_gradient_matches_finite_differences() {
        let cells = square_cells(3);
        let field = two_peak_field();
        let cfg = QuadratureConfig::default();
        let moments = horizon_moments(&field, &cells, 0, &cfg).unwrap();
        let horizon = 3;
        let n_dim = 2;
        let obj = |z: &DVector<f64>| -> f64 {
            (0..horizon)
                .map(|k| {
                    let p = Point::new(z[k * n_dim], z[k * n_dim + 1]);
                    moments[k].mass * (p - moments[k].centroid).norm_squared()
                })
                .sum()
        };
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let g_analytic: Vec<f64> = (0..horizon)
            .flat_map(|k| {
                let p = Point::new(z[k * n_dim], z[k * n_dim + 1]);
                let d = p - moments[k].centroid;
                vec![2.0 * moments[k].mass * d.x, 2.0 * moments[k].mass * d.y]
            })
            .collect();
        for j in 0..horizon * n_dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += 1e-6;
            zm[j] -= 1e-6;
            let fd = (obj(&zp) - obj(&zm)) / 2e-6;
            assert_relative_eq!(fd, g_analytic[j], epsilon = 1e-6, max_relative = 1e-5);
        }
    }
}
