//! Discrete-time agent models: a 2-D single integrator and a kinematic
//! bicycle discretized by RK4, together with output maps, constraint boxes,
//! and an empirical Lipschitz constant estimator.

use crate::geometry::Point;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Compact box `{v : lower <= v <= upper}` (component-wise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Inclusive membership with tolerance, matching polygon semantics.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    /// Shrink every face inward by `eps` (per-dimension interior).
    pub fn shrink(&self, eps: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|l| l + eps).collect(),
            upper: self.upper.iter().map(|u| u - eps).collect(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| if l == u { *l } else { rng.random_range(*l..*u) }),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    /// `p+ = p + dt * u`, n = m = 2.
    SingleIntegrator2D,
    /// Kinematic bicycle `x = (px, py, psi, v)`, `u = (delta, a)`, RK4
    /// discretization.
    KinematicBicycle { l_r: f64, l_f: f64 },
}

/// One agent's dynamics, output map, constraint boxes, and Lipschitz metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentModel {
    pub kind: ModelKind,
    pub dt: f64,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    /// Lipschitz constant of `f` w.r.t. the state at fixed input.
    pub lipschitz_f: f64,
}

impl AgentModel {
    /// Single integrator with symmetric boxes sized for the given arena
    /// half-width and speed limit.
    pub fn single_integrator(dt: f64, pos_bound: f64, speed_bound: f64) -> Self {
        Self {
            kind: ModelKind::SingleIntegrator2D,
            dt,
            state_box: BoxSet::new(vec![-pos_bound; 2], vec![pos_bound; 2]),
            input_box: BoxSet::new(vec![-speed_bound; 2], vec![speed_bound; 2]),
            lipschitz_f: 1.0,
        }
    }

    /// Kinematic bicycle on the standard arena. The velocity box keeps a
    /// minimal positive speed so the linearization stays stabilizable.
    pub fn kinematic_bicycle(dt: f64, l_r: f64, l_f: f64) -> Self {
        Self {
            kind: ModelKind::KinematicBicycle { l_r, l_f },
            dt,
            state_box: BoxSet::new(
                vec![-2.0, -2.0, -1e3, 0.1],
                vec![2.0, 2.0, 1e3, 2.0],
            ),
            input_box: BoxSet::new(vec![-0.4, -2.0], vec![0.4, 2.0]),
            lipschitz_f: 1.3,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    /// Output matrix `C` extracting the position from the state.
    pub fn output_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(2, self.state_dim());
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        c
    }

    /// Spectral norm of `C` (1 for both shipped models: orthonormal rows).
    pub fn output_norm(&self) -> f64 {
        1.0
    }

    pub fn output(&self, x: &DVector<f64>) -> Result<Point, DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        Ok(Point::new(x[0], x[1]))
    }

    /// One discrete step `x+ = f(x, u)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(match &self.kind {
            ModelKind::SingleIntegrator2D => x + u * self.dt,
            ModelKind::KinematicBicycle { l_r, l_f } => {
                rk4_step(x, u, self.dt, *l_r, *l_f)
            }
        })
    }

    /// Jacobians of `f` w.r.t. state and input by central differences.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.kind {
            ModelKind::SingleIntegrator2D => (
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2) * self.dt,
            ),
            ModelKind::KinematicBicycle { .. } => {
                let n = self.state_dim();
                let m = self.input_dim();
                let h = 1e-6;
                let mut jx = DMatrix::zeros(n, n);
                let mut ju = DMatrix::zeros(n, m);
                for j in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let d = (self.step(&xp, u).unwrap() - self.step(&xm, u).unwrap()) / (2.0 * h);
                    jx.set_column(j, &d);
                }
                for j in 0..m {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[j] += h;
                    um[j] -= h;
                    let d = (self.step(x, &up).unwrap() - self.step(x, &um).unwrap()) / (2.0 * h);
                    ju.set_column(j, &d);
                }
                (jx, ju)
            }
        }
    }

    /// Empirical Lipschitz constant of `f` w.r.t. the state: max sampled
    /// difference quotient inflated by 1.1.
    pub fn estimate_lipschitz(&self, samples: usize, seed: u64) -> f64 {
        assert!(samples >= 1000, "need at least 1000 samples");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = self.state_box.sample(&mut rng);
            let xp = self.state_box.sample(&mut rng);
            let u = self.input_box.sample(&mut rng);
            let dx = (&x - &xp).norm();
            if dx < 1e-9 {
                continue;
            }
            let df = (self.step(&x, &u).unwrap() - self.step(&xp, &u).unwrap()).norm();
            worst = worst.max(df / dx);
        }
        worst * 1.1
    }

    /// A steady state holding position `p` (zero-velocity input for the
    /// integrator; the bicycle has no steady state, callers use the
    /// integrator for steady-state initialization).
    pub fn steady_state_at(&self, p: &Point) -> Option<(DVector<f64>, DVector<f64>)> {
        match &self.kind {
            ModelKind::SingleIntegrator2D => Some((
                DVector::from_vec(vec![p.x, p.y]),
                DVector::zeros(2),
            )),
            ModelKind::KinematicBicycle { .. } => None,
        }
    }
}

fn bicycle_deriv(x: &DVector<f64>, u: &DVector<f64>, l_r: f64, l_f: f64) -> DVector<f64> {
    let psi = x[2];
    let v = x[3];
    let delta = u[0];
    let a = u[1];
    let beta = (l_r / (l_r + l_f) * delta.tan()).atan();
    DVector::from_vec(vec![
        v * (psi + beta).cos(),
        v * (psi + beta).sin(),
        v / l_r * beta.sin(),
        a,
    ])
}

fn rk4_step(x: &DVector<f64>, u: &DVector<f64>, dt: f64, l_r: f64, l_f: f64) -> DVector<f64> {
    let k1 = bicycle_deriv(x, u, l_r, l_f);
    let k2 = bicycle_deriv(&(x + &k1 * (dt / 2.0)), u, l_r, l_f);
    let k3 = bicycle_deriv(&(x + &k2 * (dt / 2.0)), u, l_r, l_f);
    let k4 = bicycle_deriv(&(x + &k3 * dt), u, l_r, l_f);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Paired state/input sequence over a horizon. `states` has one more entry
/// than `inputs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub tag: TrajectoryTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryTag {
    Periodic,
    TerminalSteadyState,
    Plain,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Max dynamic-consistency defect `|states[k+1] - f(states[k], inputs[k])|`.
    pub fn consistency_defect(&self, model: &AgentModel) -> f64 {
        self.inputs
            .iter()
            .enumerate()
            .map(|(k, u)| {
                (self.states[k + 1].clone() - model.step(&self.states[k], u).unwrap()).norm()
            })
            .fold(0.0, f64::max)
    }
}
