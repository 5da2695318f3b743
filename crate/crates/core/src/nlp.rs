//! Finite-horizon constrained trajectory optimization backend shared by the
//! planner and the tracker: smooth objective, equality constraints (dynamics,
//! periodicity, steady state, coupling pins), affine inequality constraints
//! (boxes, cell halfplanes) plus one optional norm-ball trust region.
//!
//! Method: augmented-Lagrangian outer loop over the multipliers with a
//! damped Gauss-Newton inner minimizer when the objective Hessian is
//! provided, falling back to L-BFGS with line search otherwise. Everything is
//! deterministic; identical inputs produce bitwise-identical iterate
//! sequences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64>;
pub type VectorFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64>>;
pub type JacobianFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64>>;

/// Vector-valued smooth constraint with analytic Jacobian.
pub struct Constraint {
    pub dim: usize,
    pub eval: VectorFn,
    pub jacobian: JacobianFn,
    /// Weighted constraint curvature `sum_i w_i * hess(c_i)(z)`; zero (None)
    /// for affine constraints. Used by the Gauss-Newton inner solver.
    pub curvature: Option<Box<dyn Fn(&DVector<f64>, &[f64]) -> DMatrix<f64>>>,
    pub label: String,
}

impl Constraint {
    /// Affine constraint `A z - b` (== 0 for equalities, <= 0 for
    /// inequalities).
    pub fn affine(a: DMatrix<f64>, b: DVector<f64>, label: impl Into<String>) -> Self {
        let dim = a.nrows();
        let a2 = a.clone();
        Self {
            dim,
            eval: Box::new(move |z| &a * z - &b),
            jacobian: Box::new(move |_| a2.clone()),
            curvature: None,
            label: label.into(),
        }
    }

    /// Squared norm-ball trust region on a coordinate subset:
    /// `|z_sel - center|^2 - radius^2 <= 0`.
    pub fn ball(indices: Vec<usize>, center: DVector<f64>, radius: f64, label: impl Into<String>) -> Self {
        assert_eq!(indices.len(), center.len());
        let idx = indices.clone();
        let c = center.clone();
        let idx3 = indices.clone();
        let idx2 = indices;
        let c2 = center;
        Self {
            dim: 1,
            eval: Box::new(move |z| {
                let s: f64 = idx
                    .iter()
                    .zip(c.iter())
                    .map(|(&i, ci)| (z[i] - ci) * (z[i] - ci))
                    .sum();
                DVector::from_element(1, s - radius * radius)
            }),
            jacobian: Box::new(move |z| {
                let mut j = DMatrix::zeros(1, z.len());
                for (&i, ci) in idx2.iter().zip(c2.iter()) {
                    j[(0, i)] = 2.0 * (z[i] - ci);
                }
                j
            }),
            curvature: Some(Box::new(move |z, w| {
                let mut h = DMatrix::zeros(z.len(), z.len());
                for &i in &idx3 {
                    h[(i, i)] = 2.0 * w[0];
                }
                h
            })),
            label: label.into(),
        }
    }
}

pub struct NlpProblem {
    pub dim: usize,
    pub objective: ScalarFn,
    pub gradient: VectorFn,
    /// Objective Hessian. When present the inner minimizer uses damped
    /// Gauss-Newton steps instead of L-BFGS, which is much faster under the
    /// large penalties needed for tight feasibility tolerances.
    pub hessian: Option<JacobianFn>,
    pub equalities: Vec<Constraint>,
    pub inequalities: Vec<Constraint>,
    pub initial_guess: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    OptimalLocal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub outer: usize,
    /// Augmented-Lagrangian value at the start of this outer iteration's
    /// inner solve (same multipliers as `merit`).
    pub merit_entry: f64,
    pub merit: f64,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub status: NlpStatus,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_cap: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-7,
            opt_tol: 1e-6,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_cap: 1e10,
            max_outer: 60,
            max_inner: 400,
            record_trace: false,
        }
    }
}

struct AugmentedLagrangian<'a> {
    problem: &'a NlpProblem,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    rho: f64,
}

impl AugmentedLagrangian<'_> {
    fn eq_values(&self, z: &DVector<f64>) -> DVector<f64> {
        stack_values(&self.problem.equalities, z)
    }

    fn ineq_values(&self, z: &DVector<f64>) -> DVector<f64> {
        stack_values(&self.problem.inequalities, z)
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        let mut v = (self.problem.objective)(z);
        let c = self.eq_values(z);
        v += self.lambda.dot(&c) + 0.5 * self.rho * c.norm_squared();
        let g = self.ineq_values(z);
        for (gi, mi) in g.iter().zip(self.mu.iter()) {
            let t = (mi + self.rho * gi).max(0.0);
            v += (t * t - mi * mi) / (2.0 * self.rho);
        }
        v
    }

    fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = (self.problem.gradient)(z);
        let mut row = 0;
        for con in &self.problem.equalities {
            let c = (con.eval)(z);
            let j = (con.jacobian)(z);
            for i in 0..con.dim {
                let w = self.lambda[row + i] + self.rho * c[i];
                g += j.row(i).transpose() * w;
            }
            row += con.dim;
        }
        let mut row = 0;
        for con in &self.problem.inequalities {
            let c = (con.eval)(z);
            let j = (con.jacobian)(z);
            for i in 0..con.dim {
                let w = (self.mu[row + i] + self.rho * c[i]).max(0.0);
                if w != 0.0 {
                    g += j.row(i).transpose() * w;
                }
            }
            row += con.dim;
        }
        g
    }

    /// Gauss-Newton Hessian of the augmented Lagrangian: objective Hessian
    /// plus `rho JᵀJ` over equalities and active inequalities (constraint
    /// curvature dropped).
    fn gn_hessian(&self, z: &DVector<f64>, hess: &JacobianFn) -> DMatrix<f64> {
        let mut h = (hess)(z);
        let mut row = 0;
        for con in &self.problem.equalities {
            let j = (con.jacobian)(z);
            h += j.transpose() * j * self.rho;
            if let Some(curv) = &con.curvature {
                let c = (con.eval)(z);
                let w: Vec<f64> = (0..con.dim)
                    .map(|i| self.lambda[row + i] + self.rho * c[i])
                    .collect();
                h += curv(z, &w);
            }
            row += con.dim;
        }
        let mut row = 0;
        for con in &self.problem.inequalities {
            let c = (con.eval)(z);
            let j = (con.jacobian)(z);
            let mut w = vec![0.0; con.dim];
            let mut any_active = false;
            for i in 0..con.dim {
                let wi = self.mu[row + i] + self.rho * c[i];
                if wi > 0.0 {
                    let r = j.row(i);
                    h += r.transpose() * r * self.rho;
                    w[i] = wi;
                    any_active = true;
                }
            }
            if any_active {
                if let Some(curv) = &con.curvature {
                    h += curv(z, &w);
                }
            }
            row += con.dim;
        }
        h
    }

    /// Damped-Newton inner minimizer with Armijo backtracking; used when the
    /// objective Hessian is available.
    fn newton(&self, z0: DVector<f64>, hess: &JacobianFn, tol: f64, max_iter: usize) -> DVector<f64> {
        let n = z0.len();
        let mut z = z0;
        let mut fz = self.value(&z);
        let mut g = self.grad(&z);
        for _ in 0..max_iter {
            if g.amax() <= tol {
                break;
            }
            let h = self.gn_hessian(&z, hess);
            let diag_scale = 1.0 + (0..n).fold(0.0f64, |m, i| m.max(h[(i, i)].abs()));
            let mut tau = 0.0;
            let dir = loop {
                let hd = if tau > 0.0 {
                    &h + DMatrix::identity(n, n) * tau
                } else {
                    h.clone()
                };
                if let Some(ch) = hd.cholesky() {
                    let d = ch.solve(&(-&g));
                    if d.dot(&g) < 0.0 {
                        break d;
                    }
                }
                tau = if tau == 0.0 { 1e-10 * diag_scale } else { tau * 100.0 };
                if tau > 1e8 * diag_scale {
                    break -g.clone();
                }
            };
            let dg = g.dot(&dir);
            let mut step = 1.0;
            let mut accepted = false;
            let mut z_new = z.clone();
            let mut f_new = fz;
            for _ in 0..48 {
                z_new = &z + &dir * step;
                f_new = self.value(&z_new);
                if f_new <= fz + 1e-4 * step * dg {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            z = z_new;
            fz = f_new;
            g = self.grad(&z);
        }
        z
    }
}

fn stack_values(cons: &[Constraint], z: &DVector<f64>) -> DVector<f64> {
    let total: usize = cons.iter().map(|c| c.dim).sum();
    let mut out = DVector::zeros(total);
    let mut row = 0;
    for c in cons {
        out.rows_mut(row, c.dim).copy_from(&(c.eval)(z));
        row += c.dim;
    }
    out
}

fn max_violation(c: &DVector<f64>, g: &DVector<f64>) -> f64 {
    let ec = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ic = g.iter().fold(0.0f64, |m, v| m.max(*v));
    ec.max(ic)
}

/// L-BFGS with Armijo backtracking; minimizes `f` from `z0` until the
/// gradient infinity norm drops below `tol` or the iteration cap is hit.
fn lbfgs<F, G>(f: F, grad: G, z0: DVector<f64>, tol: f64, max_iter: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    const MEMORY: usize = 10;
    let mut z = z0;
    let mut fz = f(&z);
    let mut g = grad(&z);
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for _ in 0..max_iter {
        if g.amax() <= tol {
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let a = rho_hist[i] * s_hist[i].dot(&q);
            alphas[i] = a;
            q -= &y_hist[i] * a;
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = s.dot(y) / y.dot(y);
            q *= gamma;
        }
        for i in 0..s_hist.len() {
            let b = rho_hist[i] * y_hist[i].dot(&q);
            q += &s_hist[i] * (alphas[i] - b);
        }
        let mut dir = -q;
        let mut dg = g.dot(&dir);
        if dg >= 0.0 {
            dir = -g.clone();
            dg = g.dot(&dir);
        }

        // Armijo backtracking.
        let mut step = 1.0;
        let mut accepted = false;
        let mut z_new = z.clone();
        let mut f_new = fz;
        for _ in 0..48 {
            z_new = &z + &dir * step;
            f_new = f(&z_new);
            if f_new <= fz + 1e-4 * step * dg {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let g_new = grad(&z_new);
        let s = &z_new - &z;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        z = z_new;
        fz = f_new;
        g = g_new;
    }
    z
}

/// Augmented-Lagrangian solve.
pub fn solve(problem: &NlpProblem, opts: &SolverOptions) -> NlpSolution {
    let mut al = AugmentedLagrangian {
        problem,
        lambda: DVector::zeros(problem.equalities.iter().map(|c| c.dim).sum()),
        mu: DVector::zeros(problem.inequalities.iter().map(|c| c.dim).sum()),
        rho: opts.penalty_init,
    };
    let mut z = problem.initial_guess.clone();
    let mut trace = Vec::new();
    let mut prev_viol = f64::INFINITY;
    let mut capped_rounds = 0;

    for outer in 0..opts.max_outer {
        let inner_tol = opts.opt_tol * (1.0 + (problem.objective)(&z).abs());
        let merit_entry = if opts.record_trace { al.value(&z) } else { 0.0 };
        z = match &problem.hessian {
            Some(h) => al.newton(z, h, inner_tol, opts.max_inner),
            None => lbfgs(|v| al.value(v), |v| al.grad(v), z, inner_tol, opts.max_inner),
        };
        let c = al.eq_values(&z);
        let g = al.ineq_values(&z);
        let viol = max_violation(&c, &g);
        if opts.record_trace {
            trace.push(TraceRow {
                outer,
                merit_entry,
                merit: al.value(&z),
                violation: viol,
            });
        }
        let grad_norm = al.grad(&z).amax();
        let obj = (problem.objective)(&z);
        if viol <= opts.feas_tol && grad_norm <= opts.opt_tol * (1.0 + obj.abs()) {
            return NlpSolution {
                objective: obj,
                max_violation: viol,
                status: NlpStatus::OptimalLocal,
                trace,
                z,
            };
        }
        // First-order multiplier updates.
        al.lambda += &c * al.rho;
        for (mi, gi) in al.mu.iter_mut().zip(g.iter()) {
            *mi = (*mi + al.rho * gi).max(0.0);
        }
        if viol > 0.25 * prev_viol && viol > opts.feas_tol {
            if al.rho >= opts.penalty_cap {
                capped_rounds += 1;
                if capped_rounds >= 3 {
                    let obj = (problem.objective)(&z);
                    return NlpSolution {
                        objective: obj,
                        max_violation: viol,
                        status: NlpStatus::Infeasible,
                        trace,
                        z,
                    };
                }
            } else {
                al.rho = (al.rho * opts.penalty_growth).min(opts.penalty_cap);
            }
        }
        prev_viol = viol;
    }
    let c = al.eq_values(&z);
    let g = al.ineq_values(&z);
    let viol = max_violation(&c, &g);
    let obj = (problem.objective)(&z);
    NlpSolution {
        objective: obj,
        max_violation: viol,
        status: if viol <= opts.feas_tol {
            NlpStatus::MaxIter
        } else {
            NlpStatus::Infeasible
        },
        trace,
        z,
    }
}

/// One finding of the finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradientFinding {
    pub label: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub findings: Vec<GradientFinding>,
    pub pass: bool,
}

/// Central finite-difference check of the objective gradient and every
/// constraint Jacobian at 5 random points around the initial guess.
pub fn check_gradients(problem: &NlpProblem, seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut findings: Vec<GradientFinding> = Vec::new();
    let mut record = |label: &str, err: f64| {
        match findings.iter_mut().find(|f| f.label == label) {
            Some(f) => f.max_rel_err = f.max_rel_err.max(err),
            None => findings.push(GradientFinding {
                label: label.to_string(),
                max_rel_err: err,
            }),
        }
    };
    for _ in 0..5 {
        let z = DVector::from_iterator(
            problem.dim,
            problem
                .initial_guess
                .iter()
                .map(|v| v + rng.random_range(-0.1..0.1) * (1.0 + v.abs())),
        );
        let g = (problem.gradient)(&z);
        let g_fd = fd_gradient(|v| (problem.objective)(v), &z);
        record("objective", rel_err(&g, &g_fd));
        for con in problem.equalities.iter().chain(&problem.inequalities) {
            let j = (con.jacobian)(&z);
            for i in 0..con.dim {
                let row_fd = fd_gradient(|v| (con.eval)(v)[i], &z);
                record(&con.label, rel_err(&j.row(i).transpose(), &row_fd));
            }
        }
    }
    let pass = findings.iter().all(|f| f.max_rel_err <= 1e-5);
    GradientReport { findings, pass }
}

fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, z: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(z.len());
    for j in 0..z.len() {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;
        g[j] = (f(&zp) - f(&zm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm()).max(1.0);
    (a - b).norm() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_problem() -> NlpProblem {
        // min |z|^2 s.t. z1 = 1
        let dim = 4;
        let mut a = DMatrix::zeros(1, dim);
        a[(0, 0)] = 1.0;
        NlpProblem {
            dim,
            objective: Box::new(|z| z.norm_squared()),
            gradient: Box::new(|z| z * 2.0),
            hessian: None,
            equalities: vec![Constraint::affine(
                a,
                DVector::from_element(1, 1.0),
                "pin",
            )],
            inequalities: vec![],
            initial_guess: DVector::from_element(dim, 0.3),
        }
    }

    #[test]
    fn projection_onto_equality() {
        let sol = solve(&quad_problem(), &SolverOptions::default());
        assert_eq!(sol.status, NlpStatus::OptimalLocal);
        assert!((sol.objective - 1.0).abs() < 1e-6, "obj {}", sol.objective);
        assert!((sol.z[0] - 1.0).abs() < 1e-6);
        for i in 1..4 {
            assert!(sol.z[i].abs() < 1e-5);
        }
    }

    #[test]
    fn infeasible_pair_detected() {
        // z <= 0 and z >= 1 simultaneously.
        let a1 = DMatrix::from_row_slice(1, 1, &[1.0]);
        let a2 = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let p = NlpProblem {
            dim: 1,
            objective: Box::new(|z| z.norm_squared()),
            gradient: Box::new(|z| z * 2.0),
            hessian: None,
            equalities: vec![],
            inequalities: vec![
                Constraint::affine(a1, DVector::zeros(1), "upper"),
                Constraint::affine(a2, DVector::from_element(1, -1.0), "lower"),
            ],
            initial_guess: DVector::zeros(1),
        };
        let sol = solve(&p, &SolverOptions::default());
        assert_eq!(sol.status, NlpStatus::Infeasible);
    }

    #[test]
    fn gradient_check_passes_and_catches_corruption() {
        let p = quad_problem();
        assert!(check_gradients(&p, 42).pass);

        let mut bad = quad_problem();
        bad.gradient = Box::new(|z| z * 2.0 + DVector::from_element(4, 0.01));
        let report = check_gradients(&bad, 42);
        assert!(!report.pass);
        assert!(report
            .findings
            .iter()
            .any(|f| f.label == "objective" && f.max_rel_err > 1e-5));
    }

    #[test]
    fn deterministic_iterates() {
        let mut o = SolverOptions::default();
        o.record_trace = true;
        let a = solve(&quad_problem(), &o);
        let b = solve(&quad_problem(), &o);
        assert_eq!(a.z, b.z);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.merit.to_bits(), y.merit.to_bits());
        }
    }

    #[test]
    fn outer_merit_monotone_on_qp() {
        // The inner minimizer never increases the merit it was handed.
        let mut o = SolverOptions::default();
        o.record_trace = true;
        let sol = solve(&quad_problem(), &o);
        assert!(!sol.trace.is_empty());
        for row in &sol.trace {
            assert!(row.merit <= row.merit_entry + 1e-6);
        }
    }

    #[test]
    fn trust_region_ball_constraint() {
        // min |z - a|^2 s.t. |z|^2 <= 1 with a outside the ball: solution on
        // the boundary along a.
        let a = DVector::from_vec(vec![2.0, 0.0]);
        let a2 = a.clone();
        let p = NlpProblem {
            dim: 2,
            objective: Box::new(move |z| (z - &a).norm_squared()),
            gradient: Box::new(move |z| (z - &a2) * 2.0),
            hessian: None,
            equalities: vec![],
            inequalities: vec![Constraint::ball(
                vec![0, 1],
                DVector::zeros(2),
                1.0,
                "tr",
            )],
            initial_guess: DVector::zeros(2),
        };
        let sol = solve(&p, &SolverOptions::default());
        assert!((sol.z[0] - 1.0).abs() < 1e-5, "z = {:?}", sol.z);
        assert!(sol.z[1].abs() < 1e-5);
    }
}
