//! Tracking MPC without terminal ingredients: the finite-horizon quadratic
//! tracking problem over eroded Voronoi cells, the one-step-shifted candidate
//! trajectory, the partition-update verification, and the horizon/update
//! bound calculators.

use crate::dynamics::{AgentModel, Trajectory, TrajectoryTag};
use crate::geometry::AgentCells;
use crate::nlp::{self, Constraint, NlpProblem, NlpStatus, SolverOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum TrackerError {
    #[error("tracking MPC infeasible: {0}")]
    Infeasible(String),
    #[error("constants outside the admissible domain: {0}")]
    DomainError(String),
    #[error("certification failed: {0}")]
    CertificationFailed(String),
}

/// Tracking-MPC constants: quadratic weights, the stabilizability constants,
/// the region-of-attraction bound, and the scheduling parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConstants {
    /// State weight, positive definite.
    pub q: DMatrix<f64>,
    /// Input weight, positive definite.
    pub r: DMatrix<f64>,
    /// Stabilizability constant (>= 1).
    pub gamma_bar: f64,
    /// Per-step decrease factor in (0, 1).
    pub alpha_n: f64,
    /// Region-of-attraction bound on the tracking value function.
    pub v_max: f64,
    /// Lipschitz constant of the value function w.r.t. the reference.
    pub l_v: f64,
    /// Lipschitz constant of the dynamics w.r.t. the state.
    pub l_f: f64,
    /// Tracking horizon N.
    pub horizon: usize,
    /// Planner interval K.
    pub planner_interval: usize,
}

impl TrackerConstants {
    /// Smallest eigenvalue of Q.
    pub fn alpha1(&self) -> f64 {
        self.q.clone().symmetric_eigen().eigenvalues.min()
    }

    /// Largest eigenvalue of Q.
    pub fn alpha2(&self) -> f64 {
        self.q.clone().symmetric_eigen().eigenvalues.max()
    }

    /// Exponential decay factor `lambda = 1 - alpha_N / gamma_bar`.
    pub fn decay(&self) -> f64 {
        1.0 - self.alpha_n / self.gamma_bar
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.gamma_bar <= 1.0 {
            return Err(TrackerError::DomainError("gamma_bar must exceed 1".into()));
        }
        if self.alpha_n <= 0.0 || self.alpha_n >= 1.0 {
            return Err(TrackerError::DomainError("alpha_n must lie in (0,1)".into()));
        }
        let lam = self.decay();
        if lam <= 0.0 || lam >= 1.0 {
            return Err(TrackerError::DomainError("decay must lie in (0,1)".into()));
        }
        if self.v_max <= 0.0 || self.l_v <= 0.0 || self.l_f <= 0.0 {
            return Err(TrackerError::DomainError(
                "v_max, l_v, l_f must be positive".into(),
            ));
        }
        let nstar = n_star(self)?;
        if self.horizon < nstar {
            return Err(TrackerError::DomainError(format!(
                "horizon N = {} is below the required N* = {nstar}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Reference segment over one tracking horizon: states and inputs at
/// k = 0..=N (the input at k = N feeds the candidate construction).
#[derive(Debug, Clone)]
pub struct RefSegment {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl RefSegment {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// One tracking-MPC solution: the optimal horizon trajectory and its value.
#[derive(Debug, Clone)]
pub struct TrackerSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub value: f64,
}

impl TrackerSolution {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.inputs[0]
    }
}

/// Quadratic stage cost `|x - xr|^2_Q + |u - ur|^2_R`.
pub fn stage_cost(
    consts: &TrackerConstants,
    x: &DVector<f64>,
    u: &DVector<f64>,
    xr: &DVector<f64>,
    ur: &DVector<f64>,
) -> f64 {
    let dx = x - xr;
    let du = u - ur;
    (&consts.q * &dx).dot(&dx) + (&consts.r * &du).dot(&du)
}

fn horizon_cost_of(
    consts: &TrackerConstants,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    refs: &RefSegment,
) -> f64 {
    (0..inputs.len())
        .map(|k| stage_cost(consts, &states[k], &inputs[k], &refs.states[k], &refs.inputs[k]))
        .sum()
}

/// Solver options used for the tracker: feasibility driven tight so that the
/// eroded-cell membership of the closed loop holds to 1e-9.
pub fn tracker_solver_options() -> SolverOptions {
    SolverOptions {
        feas_tol: 1e-9,
        opt_tol: 1e-7,
        ..SolverOptions::default()
    }
}

/// Solve the tracking MPC from `x_now` toward `refs` inside the eroded cells
/// (`cells.eroded[k]` for k = 0..N-1). `candidate` seeds the solver and caps
/// the returned value (candidate-guarantee rule).
pub fn solve_tracking(
    model: &AgentModel,
    x_now: &DVector<f64>,
    refs: &RefSegment,
    cells: &AgentCells,
    consts: &TrackerConstants,
    candidate: Option<&Trajectory>,
) -> Result<TrackerSolution, TrackerError> {
    let n_dim = model.state_dim();
    let m_dim = model.input_dim();
    let horizon = consts.horizon;
    assert!(refs.states.len() >= horizon + 1, "reference segment too short");

    if !model.state_box.contains(x_now, 1e-7) {
        return Err(TrackerError::Infeasible(
            "current state outside the state box".into(),
        ));
    }
    let p_now = model.output(x_now).unwrap();
    let (_, eroded0, _) = cells.at_clamped(0);
    if !eroded0.covers(&p_now, 1e-7) {
        return Err(TrackerError::Infeasible(
            "current position outside its eroded cell".into(),
        ));
    }

    // Variables: x_1..x_{N-1}, then u_0..u_{N-1}. The terminal state x_N is a
    // free rollout and u_{N-1} only appears in the cost, so both need no
    // dedicated constraints.
    let n_states = horizon - 1;
    let dim = n_states * n_dim + horizon * m_dim;
    let x_off = move |k: usize| (k - 1) * n_dim; // valid for 1 <= k <= N-1
    let u_off = move |k: usize| n_states * n_dim + k * m_dim;

    let get_x = move |z: &DVector<f64>, k: usize, x_now: &DVector<f64>| -> DVector<f64> {
        if k == 0 {
            x_now.clone()
        } else {
            z.rows(x_off(k), n_dim).into_owned()
        }
    };

    // Objective and gradient.
    let consts_o = consts.clone();
    let refs_o = refs.clone();
    let x0_o = x_now.clone();
    let objective = move |z: &DVector<f64>| -> f64 {
        let mut v = 0.0;
        for k in 0..horizon {
            let x = get_x(z, k, &x0_o);
            let u = z.rows(u_off(k), m_dim).into_owned();
            v += stage_cost(&consts_o, &x, &u, &refs_o.states[k], &refs_o.inputs[k]);
        }
        v
    };
    let consts_g = consts.clone();
    let refs_g = refs.clone();
    let gradient = move |z: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(dim);
        for k in 1..horizon.max(1) {
            if k <= n_states {
                let x = z.rows(x_off(k), n_dim).into_owned();
                let dx = &x - &refs_g.states[k];
                g.rows_mut(x_off(k), n_dim)
                    .copy_from(&(&consts_g.q * dx * 2.0));
            }
        }
        for k in 0..horizon {
            let u = z.rows(u_off(k), m_dim).into_owned();
            let du = &u - &refs_g.inputs[k];
            g.rows_mut(u_off(k), m_dim)
                .copy_from(&(&consts_g.r * du * 2.0));
        }
        g
    };

    // Dynamics equalities: x_{k+1} - f(x_k, u_k) = 0 for k = 0..N-2.
    let mut equalities = Vec::new();
    for k in 0..horizon - 1 {
        let model_e = model.clone();
        let model_j = model.clone();
        let x0_e = x_now.clone();
        let x0_j = x_now.clone();
        equalities.push(Constraint {
            dim: n_dim,
            eval: Box::new(move |z| {
                let xk = get_x(z, k, &x0_e);
                let uk = z.rows(u_off(k), m_dim).into_owned();
                z.rows(x_off(k + 1), n_dim).into_owned() - model_e.step(&xk, &uk).unwrap()
            }),
            jacobian: Box::new(move |z| {
                let xk = get_x(z, k, &x0_j);
                let uk = z.rows(u_off(k), m_dim).into_owned();
                let (a, b) = model_j.jacobians(&xk, &uk);
                let mut jac = DMatrix::zeros(n_dim, dim);
                jac.view_mut((0, x_off(k + 1)), (n_dim, n_dim))
                    .copy_from(&DMatrix::identity(n_dim, n_dim));
                if k >= 1 {
                    jac.view_mut((0, x_off(k)), (n_dim, n_dim)).copy_from(&(-a));
                }
                jac.view_mut((0, u_off(k)), (n_dim, m_dim)).copy_from(&(-b));
                jac
            }),
            curvature: None,
            label: format!("dyn_{k}"),
        });
    }

    // Inequalities: full boxes and eroded cells at k = 1..N-1, input box at
    // k = 0..N-1 (k = 0 state is fixed and already verified).
    let mut ineqs = Vec::new();
    for k in 1..horizon {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..n_dim {
            let mut up = vec![0.0; dim];
            up[x_off(k) + j] = 1.0;
            rows.push(up);
            rhs.push(model.state_box.upper[j]);
            let mut lo = vec![0.0; dim];
            lo[x_off(k) + j] = -1.0;
            rows.push(lo);
            rhs.push(-model.state_box.lower[j]);
        }
        let (_, eroded, _) = cells.at_clamped(k);
        if eroded.is_empty() {
            return Err(TrackerError::Infeasible(format!(
                "eroded cell at step {k} is EMPTY"
            )));
        }
        for hp in eroded.halfplanes() {
            let mut row = vec![0.0; dim];
            row[x_off(k)] = hp.normal.x;
            row[x_off(k) + 1] = hp.normal.y;
            rows.push(row);
            rhs.push(hp.offset);
        }
        let a = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        ineqs.push(Constraint::affine(
            a,
            DVector::from_vec(rhs),
            format!("state_cell_{k}"),
        ));
    }
    for k in 0..horizon {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..m_dim {
            let mut up = vec![0.0; dim];
            up[u_off(k) + j] = 1.0;
            rows.push(up);
            rhs.push(model.input_box.upper[j]);
            let mut lo = vec![0.0; dim];
            lo[u_off(k) + j] = -1.0;
            rows.push(lo);
            rhs.push(-model.input_box.lower[j]);
        }
        let a = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        ineqs.push(Constraint::affine(
            a,
            DVector::from_vec(rhs),
            format!("input_box_{k}"),
        ));
    }

    // Seed: the candidate when given, otherwise the reference segment.
    let mut guess = DVector::zeros(dim);
    match candidate {
        Some(c) => {
            for k in 1..horizon {
                guess.rows_mut(x_off(k), n_dim).copy_from(&c.states[k]);
            }
            for k in 0..horizon {
                guess.rows_mut(u_off(k), m_dim).copy_from(&c.inputs[k]);
            }
        }
        None => {
            for k in 1..horizon {
                guess.rows_mut(x_off(k), n_dim).copy_from(&refs.states[k]);
            }
            for k in 0..horizon {
                guess.rows_mut(u_off(k), m_dim).copy_from(&refs.inputs[k]);
            }
        }
    }

    let mut hess = DMatrix::zeros(dim, dim);
    for k in 1..=n_states {
        hess.view_mut((x_off(k), x_off(k)), (n_dim, n_dim))
            .copy_from(&(&consts.q * 2.0));
    }
    for k in 0..horizon {
        hess.view_mut((u_off(k), u_off(k)), (m_dim, m_dim))
            .copy_from(&(&consts.r * 2.0));
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
    let sol = nlp::solve(&problem, &tracker_solver_options());
    if sol.status == NlpStatus::Infeasible {
        return Err(TrackerError::Infeasible(format!(
            "solver reported infeasible (violation {:.3e})",
            sol.max_violation
        )));
    }

    let unpack = |z: &DVector<f64>| -> TrackerSolution {
        let mut states = vec![x_now.clone()];
        for k in 1..horizon {
            states.push(z.rows(x_off(k), n_dim).into_owned());
        }
        let mut inputs = Vec::new();
        for k in 0..horizon {
            inputs.push(z.rows(u_off(k), m_dim).into_owned());
        }
        // Terminal rollout state x_N.
        let x_n = model.step(&states[horizon - 1], &inputs[horizon - 1]).unwrap();
        states.push(x_n);
        let value = horizon_cost_of(consts, &states, &inputs, refs);
        TrackerSolution {
            states,
            inputs,
            value,
        }
    };

    let mut best = unpack(&sol.z);
    // Candidate-guarantee rule: never return a value above the candidate's.
    if let Some(c) = candidate {
        let cand_value = horizon_cost_of(consts, &c.states, &c.inputs, refs);
        if cand_value < best.value {
            let mut states = c.states.clone();
            states.truncate(horizon + 1);
            let mut inputs = c.inputs.clone();
            inputs.truncate(horizon);
            best = TrackerSolution {
                states,
                inputs,
                value: cand_value,
            };
        }
    }
    Ok(best)
}

/// Closed loop: apply the first optimal input.
pub fn closed_loop_step(
    model: &AgentModel,
    x_now: &DVector<f64>,
    solution: &TrackerSolution,
) -> DVector<f64> {
    model.step(x_now, solution.first_input()).unwrap()
}

/// Candidate trajectory for time t+1 built from the tracker solution at time
/// t and the reference tail inputs (`refs` is the segment used at time t and
/// must carry inputs up to index N).
pub fn candidate_trajectory(
    prev: &TrackerSolution,
    refs: &RefSegment,
    model: &AgentModel,
) -> Trajectory {
    let n = prev.inputs.len();
    let mut inputs: Vec<DVector<f64>> = prev.inputs[1..n - 1].to_vec();
    inputs.push(refs.inputs[n - 1].clone());
    inputs.push(refs.inputs[n].clone());

    let mut states: Vec<DVector<f64>> = prev.states[1..n].to_vec();
    let x_hat1 = model.step(&prev.states[n - 1], &refs.inputs[n - 1]).unwrap();
    let x_hat2 = model.step(&x_hat1, &refs.inputs[n]).unwrap();
    states.push(x_hat1);
    states.push(x_hat2);

    Trajectory {
        states,
        inputs,
        tag: TrajectoryTag::Plain,
    }
}

/// Partition-update verification: every candidate state in the state box and
/// every candidate position in the corresponding eroded candidate cell, for
/// k = 0..N.
pub fn check_update_condition(
    candidate: &Trajectory,
    model: &AgentModel,
    candidate_cells: &AgentCells,
    cyclic: bool,
) -> bool {
    for (k, x) in candidate.states.iter().enumerate() {
        if !model.state_box.contains(x, 1e-9) {
            return false;
        }
        let p = model.output(x).unwrap();
        let (_, eroded, _) = if cyclic {
            candidate_cells.at_cyclic(k)
        } else {
            candidate_cells.at_clamped(k)
        };
        if !eroded.covers(&p, 1e-9) {
            return false;
        }
    }
    true
}

/// Minimal horizon guaranteeing the post-update cost bound:
/// `ceil((ln((a2/a1) Lf^2 gamma^2) - ln(gamma - alpha_N)) / (ln gamma - ln(gamma - 1)))`,
/// floored at 1.
pub fn n_star(consts: &TrackerConstants) -> Result<usize, TrackerError> {
    let gamma = consts.gamma_bar;
    let alpha_n = consts.alpha_n;
    if gamma <= 1.0 || gamma <= alpha_n || alpha_n <= 0.0 {
        return Err(TrackerError::DomainError(
            "need gamma_bar > 1 and gamma_bar > alpha_n > 0".into(),
        ));
    }
    let ratio = consts.alpha2() / consts.alpha1();
    let num = (ratio * consts.l_f.powi(2) * gamma * gamma).ln() - (gamma - alpha_n).ln();
    let den = gamma.ln() - (gamma - 1.0).ln();
    let raw = num / den;
    Ok((raw.ceil().max(1.0)) as usize)
}

/// Value threshold below which the update condition is guaranteed, and the
/// uniform number of steps needed to reach it from `V_max`:
/// `V_eps = a1 eps^2 / ((1 + beta) |C|^2)` with
/// `beta = (a2/a1)(Lf^2 + Lf^4)`, and
/// `tau = ceil((ln V_eps - ln max_i V_max,i) / ln max_i lambda_i)`.
pub fn finite_update_bounds(
    all: &[&TrackerConstants],
    epsilon: f64,
    c_norm: f64,
) -> Result<(f64, usize), TrackerError> {
    if all.is_empty() || epsilon <= 0.0 || c_norm <= 0.0 {
        return Err(TrackerError::DomainError(
            "need at least one agent and positive epsilon, |C|".into(),
        ));
    }
    let mut v_eps = f64::INFINITY;
    for c in all {
        c.validate()?;
        let a1 = c.alpha1();
        let a2 = c.alpha2();
        let beta = (a2 / a1) * (c.l_f.powi(2) + c.l_f.powi(4));
        v_eps = v_eps.min(a1 * epsilon * epsilon / ((1.0 + beta) * c_norm * c_norm));
    }
    let v_max = all.iter().map(|c| c.v_max).fold(0.0f64, f64::max);
    let lambda = all.iter().map(|c| c.decay()).fold(0.0f64, f64::max);
    Ok((v_eps, tau_from(v_eps, v_max, lambda)))
}

/// Pure arithmetic of the finite-update horizon.
pub fn tau_from(v_eps: f64, v_max: f64, lambda: f64) -> usize {
    let raw = (v_eps.ln() - v_max.ln()) / lambda.ln();
    raw.ceil().max(0.0) as usize
}

/// Worst observed ratios from the empirical certification runs.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    /// max over trials of `V_0 / |x_0 - xr_0|^2_Q` (must be <= gamma_bar).
    pub worst_gamma_ratio: f64,
    /// max over steps of `V_{t+1} / V_t` (must be <= decay).
    pub worst_decay_ratio: f64,
    /// max over trials of `(V(x, r_hat) - V(x, r)) / |r - r_hat|`
    /// (must be <= l_v).
    pub worst_lv_ratio: f64,
}

/// Empirically certify the user-supplied `gamma_bar`, decay, and `l_v` by
/// tracking random constant references from random nearby starts. Fails with
/// the worst-case witness when any observed ratio exceeds its constant.
pub fn estimate_tracking_constants(
    model: &AgentModel,
    consts: &TrackerConstants,
    cells: &AgentCells,
    trials: usize,
    seed: u64,
) -> Result<CertificationReport, TrackerError> {
    assert!(trials >= 1);
    consts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gamma: f64 = 0.0;
    let mut worst_decay: f64 = 0.0;
    let mut worst_lv: f64 = 0.0;
    let n = consts.horizon;
    let interior = &cells.interior[0];

    for trial in 0..trials {
        // Random steady-state reference inside the interior cell.
        let v = interior.vertices();
        let mut p = v[0] * 0.0;
        let mut wsum = 0.0;
        for vert in v {
            let w: f64 = rng.random_range(0.05..1.0);
            p += vert * w;
            wsum += w;
        }
        p /= wsum;
        let (xr, ur) = model
            .steady_state_at(&p)
            .ok_or_else(|| TrackerError::DomainError("model has no steady state".into()))?;
        let refs = RefSegment {
            states: vec![xr.clone(); n + 1],
            inputs: vec![ur.clone(); n + 1],
        };

        // Random start with V below V_max.
        let mut x = xr.clone();
        for _ in 0..40 {
            let cand = DVector::from_iterator(
                xr.len(),
                xr.iter().map(|v| v + rng.random_range(-0.15..0.15)),
            );
            let p0 = model.output(&cand).unwrap();
            if cells.eroded[0].covers(&p0, 0.0) && model.state_box.contains(&cand, 0.0) {
                let dx = &cand - &xr;
                if (&consts.q * &dx).dot(&dx) * consts.gamma_bar <= consts.v_max {
                    x = cand;
                    break;
                }
            }
        }

        let mut sol = solve_tracking(model, &x, &refs, cells, consts, None)?;
        let dx = &x - &xr;
        let qdx = (&consts.q * &dx).dot(&dx);
        if qdx > 1e-12 {
            worst_gamma = worst_gamma.max(sol.value / qdx);
        }
        // V = 0 short-circuit: exact tracking passes trivially.
        for _ in 0..6 {
            if sol.value <= 1e-12 {
                break;
            }
            let x_next = closed_loop_step(model, &x.clone_owned(), &sol);
            let cand = candidate_trajectory(&sol, &refs, model);
            let next = solve_tracking(model, &x_next, &refs, cells, consts, Some(&cand))?;
            worst_decay = worst_decay.max(next.value / sol.value);
            sol = next;
        }

        // Reference-perturbation Lipschitz check.
        let scale = 0.02;
        let mut refs_hat = refs.clone();
        let mut dist2 = 0.0;
        for k in 0..=n {
            for j in 0..xr.len() {
                let d = rng.random_range(-scale..scale);
                refs_hat.states[k][j] += d;
                dist2 += d * d;
            }
            for j in 0..ur.len() {
                let d = rng.random_range(-scale..scale);
                refs_hat.inputs[k][j] += d;
                dist2 += d * d;
            }
        }
        let v_base = solve_tracking(model, &x, &refs, cells, consts, None)?.value;
        let v_hat = solve_tracking(model, &x, &refs_hat, cells, consts, None)?.value;
        let dist = dist2.sqrt();
        if dist > 1e-9 {
            worst_lv = worst_lv.max((v_hat - v_base) / dist);
        }
        let _ = trial;
    }

    let report = CertificationReport {
        worst_gamma_ratio: worst_gamma,
        worst_decay_ratio: worst_decay,
        worst_lv_ratio: worst_lv,
    };
    if worst_gamma > consts.gamma_bar {
        return Err(TrackerError::CertificationFailed(format!(
            "observed gamma ratio {worst_gamma:.4} exceeds gamma_bar {}",
            consts.gamma_bar
        )));
    }
    if worst_decay > consts.decay() {
        return Err(TrackerError::CertificationFailed(format!(
            "observed decay ratio {worst_decay:.4} exceeds lambda {:.4}",
            consts.decay()
        )));
    }
    if worst_lv > consts.l_v {
        return Err(TrackerError::CertificationFailed(format!(
            "observed value-function Lipschitz ratio {worst_lv:.4} exceeds L_V {}",
            consts.l_v
        )));
    }
    Ok(report)
}
