//! End-to-end acceptance checks. Each test prints one pass/fail line; the
//! long closed-loop runs are shared across tests through lazy statics.

use coverage_cli::config::preset;
use coverage_core::density::mass_centroid;
use coverage_core::nlp::{check_gradients, Constraint, NlpProblem};
use coverage_core::tracker::stage_cost;
use coverage_core::{
    coupling_budget, finite_update_bounds, n_star, plan_periodic, plan_periodic_coupled,
    run_lloyd_periodic, run_nonperiodic_mpc, run_periodic_mpc, solve_tracking, steady_plan,
    voronoi_partition, AgentModel, AgentSpec, ConvexPolygon, DensityField, FleetConfig,
    PartitionSequence, Point, QuadratureConfig, RunLog, RunMode, TrackerConstants, TrajectoryTag,
};
use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, ok: bool) {
    println!("criterion {id:02} {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id:02} {name} failed");
}

fn fleet(preset_name: &str) -> FleetConfig {
    preset(preset_name).unwrap().to_fleet().unwrap()
}

static PERIODIC_RUN: Lazy<RunLog> =
    Lazy::new(|| run_periodic_mpc(&fleet("periodic_desk")).unwrap());
static NONPERIODIC_RUN: Lazy<RunLog> =
    Lazy::new(|| run_nonperiodic_mpc(&fleet("nonperiodic_desk")).unwrap());
static NONPERIODIC_K10_RUN: Lazy<RunLog> =
    Lazy::new(|| run_nonperiodic_mpc(&fleet("nonperiodic_desk_k10")).unwrap());
/// The nonperiodic planner on the periodic desk instance (same circular
/// density, same fleet).
static NONPERIODIC_ON_PERIODIC_INSTANCE: Lazy<RunLog> = Lazy::new(|| {
    let mut cfg = preset("periodic_desk").unwrap();
    cfg.mode = "nonperiodic".into();
    run_nonperiodic_mpc(&cfg.to_fleet().unwrap()).unwrap()
});

const DESK_R_MAX: f64 = 0.055;

/// Independent Lloyd oracle: nearest-neighbor assignment on a dense midpoint
/// grid, centroids by averaging, iterated to a fixed point.
fn lloyd_oracle(mut gens: Vec<Point>, iters: usize, grid: usize) -> Vec<Point> {
    for _ in 0..iters {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); gens.len()];
        for i in 0..grid {
            for j in 0..grid {
                let q = Point::new(
                    -2.0 + 4.0 * (i as f64 + 0.5) / grid as f64,
                    -2.0 + 4.0 * (j as f64 + 0.5) / grid as f64,
                );
                let nearest = (0..gens.len())
                    .min_by(|&a, &b| {
                        (q - gens[a])
                            .norm()
                            .partial_cmp(&(q - gens[b]).norm())
                            .unwrap()
                    })
                    .unwrap();
                sums[nearest].0 += q.x;
                sums[nearest].1 += q.y;
                sums[nearest].2 += 1;
            }
        }
        for (g, s) in gens.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *g = Point::new(s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    gens
}

#[test]
fn criterion_01_lloyd_equivalence() {
    let start = std::time::Instant::now();
    let cfg = fleet("lloyd_desk");
    let starts: Vec<Point> = cfg
        .agents
        .iter()
        .map(|a| a.model.output(&a.x0).unwrap())
        .collect();
    let log = run_lloyd_periodic(&cfg).unwrap();
    let oracle = lloyd_oracle(starts, 400, 500);
    let worst = log
        .final_positions
        .iter()
        .zip(&oracle)
        .map(|(p, o)| (p - o).norm())
        .fold(0.0f64, f64::max);
    let elapsed = start.elapsed();
    report(
        1,
        "lloyd-equivalence",
        worst < 1e-3 && elapsed.as_secs_f64() < 10.0,
    );
}

fn descent_instance(seed: u64) -> FleetConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [
        Point::new(-1.0, -0.8),
        Point::new(1.0, -0.7),
        Point::new(0.0, 1.0),
    ];
    let consts = TrackerConstants {
        q: DMatrix::identity(2, 2) * 180.0,
        r: DMatrix::identity(2, 2) * 0.1,
        gamma_bar: 2.0,
        alpha_n: 0.1,
        v_max: 70.0,
        l_v: 180.0,
        l_f: 1.0,
        horizon: 5,
        planner_interval: 5,
    };
    let agents = base
        .iter()
        .map(|p| {
            let jx: f64 = rng.random_range(-0.3..0.3);
            let jy: f64 = rng.random_range(-0.3..0.3);
            AgentSpec {
                model: AgentModel::single_integrator(0.033, 2.0, 1.0),
                consts: consts.clone(),
                x0: DVector::from_vec(vec![p.x + jx, p.y + jy]),
            }
        })
        .collect();
    let mean = Point::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
    FleetConfig {
        agents,
        arena: ConvexPolygon::rect(-2.0, 2.0, -2.0, 2.0),
        field: DensityField::gaussian_static(0.6, mean),
        plan_horizon: 10,
        r_max: DESK_R_MAX,
        epsilon: 0.005,
        mode: RunMode::LloydPeriodic,
        seed,
        max_steps: 30,
        conv_tol: 1e-9,
        pin_reference: false,
        quadrature: QuadratureConfig::default(),
    }
}

#[test]
fn criterion_02_iterative_descent() {
    let mut ok = true;
    for seed in 0..10u64 {
        let log = run_lloyd_periodic(&descent_instance(seed)).unwrap();
        for w in log.iteration_costs.windows(2) {
            if w[1] > w[0] + 1e-6 {
                println!("  seed {seed}: cost rose {} -> {}", w[0], w[1]);
                ok = false;
            }
        }
    }
    report(2, "iterative-descent", ok);
}

#[test]
fn criterion_03_collision_avoidance() {
    let log = &*PERIODIC_RUN;
    let min_dist = log
        .steps
        .iter()
        .map(|r| r.min_distance)
        .fold(f64::INFINITY, f64::min);
    let contained = log.steps.iter().all(|r| r.containment_ok);
    report(
        3,
        "collision-avoidance",
        log.steps.len() == 1000 && min_dist >= 2.0 * DESK_R_MAX - 1e-9 && contained,
    );
}

#[test]
fn criterion_04_recursive_feasibility() {
    // Both 1000-step closed loops complete without an infeasibility abort
    // (any abort would have panicked while building the shared logs).
    let ok = PERIODIC_RUN.steps.len() == 1000 && NONPERIODIC_RUN.steps.len() == 1000;
    report(4, "recursive-feasibility", ok);
}

/// Whole-arena cells for a single agent, horizon `t_len`.
fn solo_cells(t_len: usize) -> PartitionSequence {
    PartitionSequence::from_position_rows(
        &vec![vec![Point::new(0.0, 0.0)]; t_len],
        &ConvexPolygon::rect(-2.0, 2.0, -2.0, 2.0),
        DESK_R_MAX,
        0.005,
    )
    .unwrap()
}

#[test]
fn criterion_05_tracking_decrease() {
    let model = AgentModel::single_integrator(0.033, 2.0, 1.0);
    let consts = TrackerConstants {
        q: DMatrix::identity(2, 2) * 180.0,
        r: DMatrix::identity(2, 2) * 0.1,
        gamma_bar: 2.0,
        alpha_n: 0.1,
        v_max: 70.0,
        l_v: 180.0,
        l_f: 1.0,
        horizon: 10,
        planner_interval: 5,
    };
    let lambda = consts.decay();
    let cells = solo_cells(20).agent_cells(0);
    let field = DensityField::GaussianCircular {
        sigma: 0.5,
        center: Point::new(0.0, 0.0),
        radius: 0.9,
        period_steps: 20,
    };
    let cfg = QuadratureConfig::default();
    let seedp = steady_plan(
        &model,
        &Point::new(0.0, 0.0),
        20,
        &cells,
        &field,
        0,
        TrajectoryTag::Periodic,
        &cfg,
    )
    .unwrap();
    // Frozen reachable periodic reference; closed loop starts offset from it.
    let mut plan = plan_periodic(&model, &cells, &field, 0, 0.005, Some(&seedp), &cfg).unwrap();
    let mut cc = cells;
    let mut x = plan.state_at(0) + DVector::from_vec(vec![0.04, -0.03]);
    let mut values = Vec::new();
    let mut decrease_ok = true;
    for _ in 0..200 {
        let refs = plan.ref_segment(consts.horizon);
        let sol = solve_tracking(&model, &x, &refs, &cc, &consts, None).unwrap();
        values.push((sol.value, stage_cost(&consts, &x, &sol.inputs[0], &refs.states[0], &refs.inputs[0])));
        x = model.step(&x, &sol.inputs[0]).unwrap();
        plan = plan.shift(1).unwrap();
        cc = cc.shift_periodic(1);
    }
    for w in values.windows(2) {
        let (v_t, l_t) = w[0];
        let (v_next, _) = w[1];
        if v_next - v_t > -consts.alpha_n * l_t + 1e-6 {
            decrease_ok = false;
        }
    }
    let v0 = values[0].0;
    let lambda_ok = values
        .iter()
        .enumerate()
        .all(|(t, (v, _))| *v <= lambda.powi(t as i32) * v0 * (1.0 + 1e-3));
    report(5, "tracking-decrease", decrease_ok && lambda_ok);
}

#[test]
fn criterion_06_coupling_safety() {
    let log = &*PERIODIC_RUN;
    let v_max = 70.0;
    let roa_ok = log.post_update_values.len() >= 20 * 4
        && log.post_update_values.iter().all(|v| *v <= v_max + 1e-6);

    // Zero budget: the planner must return exactly the shifted previous plan.
    let model = AgentModel::single_integrator(0.033, 2.0, 1.0);
    let mut consts = TrackerConstants {
        q: DMatrix::identity(2, 2) * 180.0,
        r: DMatrix::identity(2, 2) * 0.1,
        gamma_bar: 2.0,
        alpha_n: 0.1,
        v_max: 70.0,
        l_v: 180.0,
        l_f: 1.0,
        horizon: 10,
        planner_interval: 5,
    };
    let cells = solo_cells(20).agent_cells(0);
    let field = DensityField::gaussian_static(0.5, Point::new(0.6, 0.2));
    let cfg = QuadratureConfig::default();
    let plan = {
        let sp = steady_plan(
            &model,
            &Point::new(-0.4, -0.2),
            20,
            &cells,
            &field,
            0,
            TrajectoryTag::Periodic,
            &cfg,
        )
        .unwrap();
        plan_periodic(&model, &cells, &field, 0, 0.005, Some(&sp), &cfg).unwrap()
    };
    let shifted = plan.shift(5).unwrap();
    consts.l_v = 1e18; // forces the coupling budget C(V) to ~0
    assert!(coupling_budget(0.0, &consts).unwrap().value <= 1e-12);
    let frozen = plan_periodic_coupled(
        &model,
        &cells.shift_periodic(5),
        &field,
        5,
        0.005,
        &shifted,
        0.0,
        &consts,
        &cfg,
    )
    .unwrap();
    let same = frozen
        .trajectory
        .states
        .iter()
        .zip(&shifted.trajectory.states)
        .all(|(a, b)| (a - b).norm() <= 1e-12)
        && frozen
            .trajectory
            .inputs
            .iter()
            .zip(&shifted.trajectory.inputs)
            .all(|(a, b)| (a - b).norm() <= 1e-12);
    report(6, "coupling-safety", roa_ok && same);
}

#[test]
fn criterion_07_finite_time_update() {
    // The tau = 83 arithmetic case must come out exactly.
    let tau83 = coverage_core::tracker::tau_from(1.0, 70.0, 0.95);
    // Pinned reference: a partition swap must occur within tau steps.
    let mut cfg = preset("periodic_desk").unwrap();
    cfg.pin_reference = true;
    cfg.max_steps = 400;
    let f = cfg.to_fleet().unwrap();
    let consts: Vec<&TrackerConstants> = f.agents.iter().map(|a| &a.consts).collect();
    let (_, tau) = finite_update_bounds(&consts, f.epsilon, 1.0).unwrap();
    let log = run_periodic_mpc(&f).unwrap();
    let first_swap = log.swap_times.first().copied();
    report(
        7,
        "finite-time-update",
        tau83 == 83 && first_swap.is_some_and(|t| t <= tau),
    );
}

#[test]
fn criterion_08_bound_calculators() {
    let consts = TrackerConstants {
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(2, 2),
        gamma_bar: 2.0,
        alpha_n: 0.5,
        v_max: 70.0,
        l_v: 180.0,
        l_f: 1.0,
        horizon: 20,
        planner_interval: 30,
    };
    let ns = n_star(&consts).unwrap();
    let mut c30 = consts.clone();
    c30.alpha_n = 0.1; // lambda = 0.95
    let budget = coupling_budget(70.0, &c30).unwrap().value;
    report(
        8,
        "bound-calculators",
        ns == 2 && (budget - 0.30542).abs() / 0.30542 < 1e-4,
    );
}

#[test]
fn criterion_09_quadrature_and_voronoi() {
    let sigma = 0.2;
    let cell = ConvexPolygon::rect(-2.0, 2.0, -2.0, 2.0);
    let field = DensityField::gaussian_static(sigma, Point::new(0.3, -0.5));
    let mc = mass_centroid(&field, &cell, 0, &QuadratureConfig::default()).unwrap();
    let exact = 2.0 * std::f64::consts::PI * sigma * sigma;
    let mass_ok = (mc.mass - exact).abs() / exact < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gens: Vec<Point> = (0..7)
        .map(|_| Point::new(rng.random_range(-1.8..1.8), rng.random_range(-1.8..1.8)))
        .collect();
    let cells = voronoi_partition(&gens, &cell).unwrap();
    let grid = 300;
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..grid {
        for j in 0..grid {
            let q = Point::new(
                -2.0 + 4.0 * (i as f64 + 0.5) / grid as f64,
                -2.0 + 4.0 * (j as f64 + 0.5) / grid as f64,
            );
            let nearest = (0..gens.len())
                .min_by(|&a, &b| {
                    (q - gens[a])
                        .norm()
                        .partial_cmp(&(q - gens[b]).norm())
                        .unwrap()
                })
                .unwrap();
            total += 1;
            if cells[nearest].covers(&q, 1e-7) {
                agree += 1;
            }
        }
    }
    let vor_ok = agree as f64 / total as f64 >= 0.999;
    report(9, "quadrature-and-voronoi", mass_ok && vor_ok);
}

fn time_averaged_cost(log: &RunLog) -> f64 {
    log.steps.iter().map(|r| r.coverage_cost).sum::<f64>() / log.steps.len() as f64
}

#[test]
fn criterion_10_interval_trend() {
    let k5 = time_averaged_cost(&NONPERIODIC_RUN);
    let k10 = time_averaged_cost(&NONPERIODIC_K10_RUN);
    println!("  time-averaged cost: K=5 -> {k5:.6}, K=10 -> {k10:.6}");
    report(10, "interval-trend", k5 <= k10);
}

fn moving_average_tail(log: &RunLog, window: usize) -> f64 {
    let costs: Vec<f64> = log.steps.iter().map(|r| r.coverage_cost).collect();
    costs[costs.len() - window..].iter().sum::<f64>() / window as f64
}

#[test]
fn criterion_11_mode_gap() {
    let period = 20; // density revolution length on the desk instance
    let alg2 = &*PERIODIC_RUN;
    let alg3 = &*NONPERIODIC_ON_PERIODIC_INSTANCE;
    let alg2_ma = moving_average_tail(alg2, period);
    let alg2_prev = {
        let costs: Vec<f64> = alg2.steps.iter().map(|r| r.coverage_cost).collect();
        let n = costs.len();
        costs[n - 2 * period..n - period].iter().sum::<f64>() / period as f64
    };
    let converged = (alg2_ma - alg2_prev).abs() / alg2_prev.abs() < 1e-4;
    let alg3_ma = moving_average_tail(alg3, period);
    println!("  converged MA cost: periodic {alg2_ma:.6}, nonperiodic {alg3_ma:.6}");
    report(11, "mode-gap", converged && alg3_ma >= alg2_ma - 1e-6);
}

#[test]
fn criterion_12_solver_soundness() {
    let dt = 0.05;
    let n = 8usize; // tracking horizon
    let model = AgentModel::single_integrator(dt, 2.0, 5.0);
    let cells = solo_cells(n + 1).agent_cells(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let qs: f64 = rng.random_range(1.0..2.0);
        let rs: f64 = rng.random_range(0.5..1.0);
        let consts = TrackerConstants {
            q: DMatrix::identity(2, 2) * qs,
            r: DMatrix::identity(2, 2) * rs,
            gamma_bar: 4.0,
            alpha_n: 0.9,
            v_max: 1e6,
            l_v: 1.0,
            l_f: 1.0,
            horizon: n,
            planner_interval: 5,
        };
        let x0 = DVector::from_vec(vec![
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ]);
        let refs = coverage_core::RefSegment {
            states: (0..=n)
                .map(|_| {
                    DVector::from_vec(vec![
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                    ])
                })
                .collect(),
            inputs: (0..=n)
                .map(|_| {
                    DVector::from_vec(vec![
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    ])
                })
                .collect(),
        };
        let sol = solve_tracking(&model, &x0, &refs, &cells, &consts, None).unwrap();

        // Dense QP oracle: eliminate states (x_k = x0 + dt * sum u_j) and
        // minimize the unconstrained least-squares problem over stacked u.
        // All boxes and cells stay inactive at these magnitudes.
        let dim = 2 * n;
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for k in 1..n {
            // sqrt(Q) (x0 + dt sum_{j<k} u_j - xr_k)
            for axis in 0..2 {
                let mut row = DVector::zeros(dim);
                for j in 0..k {
                    row[2 * j + axis] = dt * qs.sqrt();
                }
                rows.push(row);
                rhs.push(qs.sqrt() * (refs.states[k][axis] - x0[axis]));
            }
        }
        for k in 0..n {
            for axis in 0..2 {
                let mut row = DVector::zeros(dim);
                row[2 * k + axis] = rs.sqrt();
                rows.push(row);
                rhs.push(rs.sqrt() * refs.inputs[k][axis]);
            }
        }
        let a = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        let b = DVector::from_vec(rhs);
        let u = (a.transpose() * &a)
            .cholesky()
            .unwrap()
            .solve(&(a.transpose() * &b));
        let resid = &a * &u - &b;
        // Constant k = 0 state term (x_0 is not a variable).
        let x0_term = qs * (&x0 - &refs.states[0]).norm_squared();
        let oracle = resid.norm_squared() + x0_term;
        worst = worst.max((sol.value - oracle).abs());
    }
    let qp_ok = worst < 1e-6;

    // Gradient checks on a tracker-style problem with nonlinear (bicycle)
    // dynamics constraints and a ball trust region.
    let bike = AgentModel::kinematic_bicycle(0.033, 0.05, 0.05);
    let nd = 4;
    let md = 2;
    let steps = 3;
    let dim = steps * (nd + md);
    let bike_e = bike.clone();
    let mut eqs = Vec::new();
    for k in 0..steps - 1 {
        let m1 = bike_e.clone();
        let m2 = bike_e.clone();
        eqs.push(Constraint {
            dim: nd,
            eval: Box::new(move |z: &DVector<f64>| {
                let x = z.rows(k * nd, nd).into_owned();
                let u = z.rows(steps * nd + k * md, md).into_owned();
                z.rows((k + 1) * nd, nd).into_owned() - m1.step(&x, &u).unwrap()
            }),
            jacobian: Box::new(move |z: &DVector<f64>| {
                let x = z.rows(k * nd, nd).into_owned();
                let u = z.rows(steps * nd + k * md, md).into_owned();
                let (a, b) = m2.jacobians(&x, &u);
                let mut j = DMatrix::zeros(nd, dim);
                j.view_mut((0, (k + 1) * nd), (nd, nd))
                    .copy_from(&DMatrix::identity(nd, nd));
                j.view_mut((0, k * nd), (nd, nd)).copy_from(&(-a));
                j.view_mut((0, steps * nd + k * md), (nd, md)).copy_from(&(-b));
                j
            }),
            curvature: None,
            label: format!("dyn_{k}"),
        });
    }
    let mut guess = DVector::zeros(dim);
    for k in 0..steps {
        guess[k * nd + 3] = 0.5; // forward speed inside the box
    }
    let problem = NlpProblem {
        dim,
        objective: Box::new(|z: &DVector<f64>| z.norm_squared()),
        gradient: Box::new(|z: &DVector<f64>| z * 2.0),
        hessian: None,
        equalities: eqs,
        inequalities: vec![Constraint::ball(
            (0..4).collect(),
            DVector::zeros(4),
            1.0,
            "trust",
        )],
        initial_guess: guess,
    };
    let grad_report = check_gradients(&problem, 7);
    let grad_ok = grad_report
        .findings
        .iter()
        .all(|f| f.max_rel_err < 1e-5);
    if !grad_ok {
        for f in &grad_report.findings {
            println!("  gradient check {}: {:.3e}", f.label, f.max_rel_err);
        }
    }
    report(12, "solver-soundness", qp_ok && grad_ok);
}
