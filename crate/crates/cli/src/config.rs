//! Experiment configuration: serde model (TOML and JSON), named presets,
//! and conversion into a runnable fleet description.

use coverage_core::{
    AgentModel, AgentSpec, ConvexPolygon, DensityField, FleetConfig, Point, QuadratureConfig,
    RunMode, TrackerConstants,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// lloyd | periodic | nonperiodic
    pub mode: String,
    pub seed: u64,
    pub max_steps: usize,
    /// Planning horizon T.
    pub plan_horizon: usize,
    /// Planner interval K.
    pub planner_interval: usize,
    /// Tracking horizon N.
    pub tracking_horizon: usize,
    /// [x_min, x_max, y_min, y_max].
    pub arena: [f64; 4],
    pub r_max: f64,
    pub epsilon: f64,
    pub dt: f64,
    #[serde(default = "default_conv_tol")]
    pub conv_tol: f64,
    #[serde(default)]
    pub pin_reference: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default = "default_true")]
    pub plots: bool,
    pub density: DensityConfig,
    pub weights: WeightsConfig,
    pub constants: ConstantsConfig,
    pub agents: Vec<AgentConfig>,
}

fn default_conv_tol() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// uniform | gaussian_circular | gaussian_waypoints
    pub kind: String,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub center: Option<[f64; 2]>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub period_steps: Option<usize>,
    /// Each waypoint is [t_step, x, y]; the mean interpolates linearly.
    #[serde(default)]
    pub waypoints: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    /// Diagonal of Q (length = state dimension).
    pub q: Vec<f64>,
    /// Diagonal of R (length = input dimension).
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub gamma_bar: f64,
    pub alpha_n: f64,
    pub v_max: f64,
    pub l_v: f64,
    pub l_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// single_integrator | kinematic_bicycle
    pub model: String,
    /// Full start state (integrator: [x, y]; bicycle: [x, y, psi, v]).
    pub start: Vec<f64>,
    #[serde(default)]
    pub speed_bound: Option<f64>,
    #[serde(default)]
    pub l_r: Option<f64>,
    #[serde(default)]
    pub l_f: Option<f64>,
}

impl ExperimentConfig {
    /// Load from a file (TOML unless the extension is .json) or fall back to
    /// a named preset.
    pub fn load(spec: &str) -> Result<Self, ConfigError> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
            } else {
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
            }
        } else {
            preset(spec).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "'{spec}' is neither a readable file nor a known preset ({})",
                    PRESET_NAMES.join(", ")
                ))
            })
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_mode(&self) -> Result<RunMode, ConfigError> {
        match self.mode.as_str() {
            "lloyd" => Ok(RunMode::LloydPeriodic),
            "periodic" => Ok(RunMode::PeriodicMpc),
            "nonperiodic" => Ok(RunMode::NonperiodicMpc),
            other => Err(ConfigError::Invalid(format!(
                "unknown mode '{other}' (expected lloyd | periodic | nonperiodic)"
            ))),
        }
    }

    pub fn density_field(&self) -> Result<DensityField, ConfigError> {
        let d = &self.density;
        match d.kind.as_str() {
            "uniform" => Ok(DensityField::Uniform),
            "gaussian_circular" => {
                let sigma = d
                    .sigma
                    .ok_or_else(|| ConfigError::Invalid("circular density needs sigma".into()))?;
                let c = d.center.unwrap_or([0.0, 0.0]);
                Ok(DensityField::GaussianCircular {
                    sigma,
                    center: Point::new(c[0], c[1]),
                    radius: d.radius.ok_or_else(|| {
                        ConfigError::Invalid("circular density needs radius".into())
                    })?,
                    period_steps: d.period_steps.ok_or_else(|| {
                        ConfigError::Invalid("circular density needs period_steps".into())
                    })?,
                })
            }
            "gaussian_waypoints" => {
                let sigma = d
                    .sigma
                    .ok_or_else(|| ConfigError::Invalid("waypoint density needs sigma".into()))?;
                let wps = d
                    .waypoints
                    .as_ref()
                    .filter(|w| !w.is_empty())
                    .ok_or_else(|| {
                        ConfigError::Invalid("waypoint density needs waypoints".into())
                    })?;
                Ok(DensityField::GaussianWaypoints {
                    sigma,
                    waypoints: wps
                        .iter()
                        .map(|w| (w[0], Point::new(w[1], w[2])))
                        .collect(),
                })
            }
            other => Err(ConfigError::Invalid(format!(
                "unknown density kind '{other}'"
            ))),
        }
    }

    fn build_model(&self, a: &AgentConfig) -> Result<AgentModel, ConfigError> {
        match a.model.as_str() {
            "single_integrator" => {
                let bound = self.arena[1].max(self.arena[3]);
                Ok(AgentModel::single_integrator(
                    self.dt,
                    bound,
                    a.speed_bound.unwrap_or(1.0),
                ))
            }
            "kinematic_bicycle" => Ok(AgentModel::kinematic_bicycle(
                self.dt,
                a.l_r.unwrap_or(0.05),
                a.l_f.unwrap_or(0.05),
            )),
            other => Err(ConfigError::Invalid(format!("unknown model '{other}'"))),
        }
    }

    /// Build the runnable fleet description. Rejects a tracking horizon below
    /// the minimal certified horizon with a hard error quoting the bound.
    pub fn to_fleet(&self) -> Result<FleetConfig, ConfigError> {
        let mode = self.run_mode()?;
        let [x0, x1, y0, y1] = self.arena;
        if x0 >= x1 || y0 >= y1 {
            return Err(ConfigError::Invalid("degenerate arena".into()));
        }
        let field = self.density_field()?;
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            let model = self.build_model(a)?;
            let n_dim = model.state_dim();
            let m_dim = model.input_dim();
            if self.weights.q.len() != n_dim || self.weights.r.len() != m_dim {
                return Err(ConfigError::Invalid(format!(
                    "weights must match dimensions: need {n_dim} q entries and {m_dim} r entries"
                )));
            }
            if a.start.len() != n_dim {
                return Err(ConfigError::Invalid(format!(
                    "agent {i}: start state needs {n_dim} entries"
                )));
            }
            let consts = TrackerConstants {
                q: DMatrix::from_diagonal(&DVector::from_vec(self.weights.q.clone())),
                r: DMatrix::from_diagonal(&DVector::from_vec(self.weights.r.clone())),
                gamma_bar: self.constants.gamma_bar,
                alpha_n: self.constants.alpha_n,
                v_max: self.constants.v_max,
                l_v: self.constants.l_v,
                l_f: self.constants.l_f,
                horizon: self.tracking_horizon,
                planner_interval: self.planner_interval,
            };
            let required = coverage_core::n_star(&consts)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if self.tracking_horizon < required {
                return Err(ConfigError::Invalid(format!(
                    "tracking horizon N = {} is below the minimal certified horizon N* = {required}",
                    self.tracking_horizon
                )));
            }
            agents.push(AgentSpec {
                model,
                consts,
                x0: DVector::from_vec(a.start.clone()),
            });
        }
        Ok(FleetConfig {
            agents,
            arena: ConvexPolygon::rect(x0, x1, y0, y1),
            field,
            plan_horizon: self.plan_horizon,
            r_max: self.r_max,
            epsilon: self.epsilon,
            mode,
            seed: self.seed,
            max_steps: self.max_steps,
            conv_tol: self.conv_tol,
            pin_reference: self.pin_reference,
            quadrature: QuadratureConfig::default(),
        })
    }
}

pub const PRESET_NAMES: [&str; 7] = [
    "lloyd_desk",
    "periodic_desk",
    "nonperiodic_desk",
    "nonperiodic_desk_k10",
    "periodic_circle",
    "nonperiodic_30",
    "nonperiodic_60",
];

fn desk_agents() -> Vec<AgentConfig> {
    [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]
        .iter()
        .map(|p| AgentConfig {
            model: "single_integrator".into(),
            start: p.to_vec(),
            speed_bound: Some(1.0),
            l_r: None,
            l_f: None,
        })
        .collect()
}

fn bicycle_agents() -> Vec<AgentConfig> {
    [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]
        .iter()
        .map(|p| AgentConfig {
            model: "kinematic_bicycle".into(),
            start: vec![p[0], p[1], 0.0, 0.1],
            speed_bound: None,
            l_r: Some(0.05),
            l_f: Some(0.05),
        })
        .collect()
}

fn desk_waypoints() -> Vec<[f64; 3]> {
    vec![
        [0.0, -1.0, -1.0],
        [250.0, 1.0, -1.0],
        [500.0, 1.0, 1.0],
        [750.0, -1.0, 1.0],
        [1000.0, -1.0, -1.0],
    ]
}

/// Named experiment presets. The `*_desk` presets shrink the horizons so a
/// full run fits in CI; the remaining presets carry the reference parameter
/// set (bicycle fleet, T = 150 / K = 190 periodic, T = 100 / K in {30, 60}
/// nonperiodic).
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let desk = ExperimentConfig {
        mode: "periodic".into(),
        seed: 7,
        max_steps: 1000,
        plan_horizon: 20,
        planner_interval: 5,
        tracking_horizon: 10,
        arena: [-2.0, 2.0, -2.0, 2.0],
        r_max: 0.055,
        epsilon: 0.005,
        dt: 0.033,
        conv_tol: 1e-6,
        pin_reference: false,
        out_dir: None,
        plots: true,
        density: DensityConfig {
            kind: "gaussian_circular".into(),
            sigma: Some(0.5),
            center: Some([0.0, 0.0]),
            radius: Some(0.9),
            period_steps: Some(20),
            waypoints: None,
        },
        weights: WeightsConfig {
            q: vec![180.0, 180.0],
            r: vec![0.1, 0.1],
        },
        constants: ConstantsConfig {
            gamma_bar: 2.0,
            alpha_n: 0.1,
            v_max: 70.0,
            l_v: 180.0,
            l_f: 1.0,
        },
        agents: desk_agents(),
    };
    match name {
        "periodic_desk" => Some(desk),
        "lloyd_desk" => Some(ExperimentConfig {
            mode: "lloyd".into(),
            max_steps: 50,
            plan_horizon: 1,
            density: DensityConfig {
                kind: "uniform".into(),
                sigma: None,
                center: None,
                radius: None,
                period_steps: None,
                waypoints: None,
            },
            agents: [[-0.4, -0.3], [0.5, -0.2], [-0.3, 0.4], [0.4, 0.5]]
                .iter()
                .map(|p| AgentConfig {
                    model: "single_integrator".into(),
                    start: p.to_vec(),
                    speed_bound: Some(1.0),
                    l_r: None,
                    l_f: None,
                })
                .collect(),
            ..desk.clone()
        }),
        "nonperiodic_desk" => Some(ExperimentConfig {
            mode: "nonperiodic".into(),
            density: DensityConfig {
                kind: "gaussian_waypoints".into(),
                sigma: Some(0.5),
                center: None,
                radius: None,
                period_steps: None,
                waypoints: Some(desk_waypoints()),
            },
            ..desk.clone()
        }),
        "nonperiodic_desk_k10" => Some(ExperimentConfig {
            planner_interval: 10,
            ..preset("nonperiodic_desk").unwrap()
        }),
        "periodic_circle" => Some(ExperimentConfig {
            mode: "periodic".into(),
            max_steps: 1000,
            plan_horizon: 150,
            planner_interval: 190,
            tracking_horizon: 20,
            density: DensityConfig {
                kind: "gaussian_circular".into(),
                sigma: Some(0.5),
                center: Some([0.0, 0.0]),
                radius: Some(0.9),
                period_steps: Some(150),
                waypoints: None,
            },
            weights: WeightsConfig {
                q: vec![180.0, 180.0, 1.0, 1.0],
                r: vec![0.1, 0.1],
            },
            constants: ConstantsConfig {
                gamma_bar: 2.0,
                alpha_n: 0.1,
                v_max: 70.0,
                l_v: 180.0,
                l_f: 1.2,
            },
            agents: bicycle_agents(),
            ..desk.clone()
        }),
        "nonperiodic_30" => Some(ExperimentConfig {
            mode: "nonperiodic".into(),
            plan_horizon: 100,
            planner_interval: 30,
            tracking_horizon: 20,
            density: DensityConfig {
                kind: "gaussian_waypoints".into(),
                sigma: Some(0.5),
                center: None,
                radius: None,
                period_steps: None,
                waypoints: Some(desk_waypoints()),
            },
            weights: WeightsConfig {
                q: vec![180.0, 180.0, 1.0, 1.0],
                r: vec![0.1, 0.1],
            },
            constants: ConstantsConfig {
                gamma_bar: 2.0,
                alpha_n: 0.1,
                v_max: 70.0,
                l_v: 180.0,
                l_f: 1.2,
            },
            agents: bicycle_agents(),
            ..desk
        }),
        "nonperiodic_60" => Some(ExperimentConfig {
            planner_interval: 60,
            ..preset("nonperiodic_30").unwrap()
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_presets_pin_parameters() {
        let c = preset("periodic_circle").unwrap();
        assert_eq!(c.weights.q, vec![180.0, 180.0, 1.0, 1.0]);
        assert_eq!(c.weights.r, vec![0.1, 0.1]);
        assert_eq!(c.r_max, 0.055);
        assert_eq!(c.epsilon, 0.005);
        assert_eq!(c.arena, [-2.0, 2.0, -2.0, 2.0]);
        assert_eq!(c.dt, 0.033);
        assert_eq!(c.tracking_horizon, 20);
        assert_eq!(c.planner_interval, 190);
        assert_eq!(c.plan_horizon, 150);
        assert_eq!(c.density.radius, Some(0.9));
        // One revolution in 150 steps = 4.95 s at dt = 33 ms.
        assert_eq!(c.density.period_steps, Some(150));
        assert!((150.0 * c.dt - 4.95).abs() < 1e-12);
        for name in ["nonperiodic_30", "nonperiodic_60"] {
            let c = preset(name).unwrap();
            assert_eq!(c.plan_horizon, 100);
            assert_eq!(c.tracking_horizon, 20);
        }
        assert_eq!(preset("nonperiodic_30").unwrap().planner_interval, 30);
        assert_eq!(preset("nonperiodic_60").unwrap().planner_interval, 60);
    }

    #[test]
    fn desk_presets_shrink_horizons() {
        for name in ["periodic_desk", "nonperiodic_desk"] {
            let c = preset(name).unwrap();
            assert_eq!(c.plan_horizon, 20);
            assert_eq!(c.planner_interval, 5);
            assert_eq!(c.tracking_horizon, 10);
            assert_eq!(c.agents.len(), 4);
            assert!(c.agents.iter().all(|a| a.model == "single_integrator"));
        }
        assert_eq!(preset("nonperiodic_desk_k10").unwrap().planner_interval, 10);
    }

    #[test]
    fn toml_and_json_round_trip() {
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c, "TOML round trip for {name}");
            let back: ExperimentConfig =
                serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c, "JSON round trip for {name}");
        }
    }

    #[test]
    fn load_prefers_files_and_falls_back_to_presets() {
        let dir = tempfile::tempdir().unwrap();
        let c = preset("periodic_desk").unwrap();
        let toml_path = dir.path().join("exp.toml");
        std::fs::write(&toml_path, c.to_toml()).unwrap();
        let json_path = dir.path().join("exp.json");
        std::fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(toml_path.to_str().unwrap()).unwrap(), c);
        assert_eq!(ExperimentConfig::load(json_path.to_str().unwrap()).unwrap(), c);
        assert_eq!(ExperimentConfig::load("periodic_desk").unwrap(), c);
        let err = ExperimentConfig::load("no_such_preset").unwrap_err();
        assert!(err.to_string().contains("periodic_desk"));
    }

    #[test]
    fn rejects_tracking_horizon_below_certified_minimum() {
        let mut c = preset("periodic_desk").unwrap();
        c.tracking_horizon = 1;
        let err = c.to_fleet().unwrap_err().to_string();
        assert!(err.contains("N* = 2"), "error was: {err}");
    }

    #[test]
    fn rejects_dimension_mismatches() {
        let mut c = preset("periodic_desk").unwrap();
        c.weights.q = vec![180.0; 3];
        assert!(c.to_fleet().is_err());
        let mut c = preset("periodic_desk").unwrap();
        c.agents[0].start = vec![0.0; 4];
        assert!(c.to_fleet().is_err());
        let mut c = preset("periodic_desk").unwrap();
        c.mode = "sideways".into();
        assert!(c.run_mode().is_err());
    }
}
