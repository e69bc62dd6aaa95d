use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acp::AcpConfig;
use crate::cbf::{all_pairs, barrier_h, BarrierPair, ObstacleSpec, TighteningMode};
use crate::dynamics::{DynamicsModel, ModelKind, NoiseSpec, RobotState, Vec2, DEFAULT_LOOKAHEAD};
use crate::error::{Error, Result};
use crate::mpc::{MpcParams, Tightening};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub start_m: [f64; 2],
    pub goal_m: [f64; 2],
    pub radius_m: f64,
    /// Initial heading; unicycle robots only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading_rad: Option<f64>,
    /// Overrides the scenario-wide noise for this robot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    AcpSbc,
    /// Same controller with every margin forced to zero.
    CbfBaseline,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::AcpSbc => "acp_sbc",
            Method::CbfBaseline => "cbf_baseline",
        }
    }
}

/// How pairs share conformal ledgers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One ledger for robot-robot pairs and one for robot-obstacle pairs.
    #[default]
    PerKind,
    PerPair,
}

fn default_lookahead() -> f64 {
    DEFAULT_LOOKAHEAD
}

fn default_seed() -> u64 {
    1
}

fn default_goal_tolerance() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

/// A closed-loop experiment, as read from a scenario JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelKind,
    pub dt_s: f64,
    /// Unicycle barrier look-ahead distance.
    #[serde(default = "default_lookahead")]
    pub lookahead_m: f64,
    pub robots: Vec<RobotSpec>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    pub noise: NoiseSpec,
    pub mpc: MpcParams,
    pub gamma: f64,
    #[serde(default)]
    pub acp: AcpConfig,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub tightening: TighteningMode,
    /// Lipschitz constant for state-score tightening.
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub method: Method,
    /// Number of control steps.
    pub steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance_m: f64,
    /// Pin a robot's controls to zero while it is within tolerance of its goal.
    #[serde(default = "yes")]
    pub stop_at_goal: bool,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        for r in &mut self.robots {
            r.noise = None;
        }
        self
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn dynamics(&self) -> Result<DynamicsModel> {
        let m = DynamicsModel::new(self.model, self.dt_s)?;
        match self.model {
            ModelKind::Unicycle => m.with_lookahead(self.lookahead_m),
            ModelKind::SingleIntegrator => Ok(m),
        }
    }

    pub fn initial_states(&self) -> Vec<RobotState> {
        self.robots
            .iter()
            .map(|r| RobotState {
                position: Vec2::new(r.start_m[0], r.start_m[1]),
                heading: match self.model {
                    ModelKind::Unicycle => r.heading_rad.map(crate::dynamics::wrap_angle),
                    ModelKind::SingleIntegrator => None,
                },
                radius: r.radius_m,
            })
            .collect()
    }

    pub fn goals(&self) -> Vec<Vec2> {
        self.robots
            .iter()
            .map(|r| Vec2::new(r.goal_m[0], r.goal_m[1]))
            .collect()
    }

    pub fn noise_for(&self, robot: usize) -> &NoiseSpec {
        self.robots[robot].noise.as_ref().unwrap_or(&self.noise)
    }

    pub fn pairs(&self) -> Result<Vec<BarrierPair>> {
        all_pairs(&self.initial_states(), &self.obstacles)
    }

    pub fn tightening(&self) -> Tightening {
        Tightening {
            mode: self.tightening,
            lipschitz: self.lipschitz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(Error::config("dt_s", "must be positive"));
        }
        if self.robots.is_empty() {
            return Err(Error::config("robots", "at least one robot is required"));
        }
        for (i, r) in self.robots.iter().enumerate() {
            let finite = r.start_m.iter().chain(&r.goal_m).all(|v| v.is_finite());
            if !finite {
                return Err(Error::config(format!("robots[{i}].start_m"), "coordinates must be finite"));
            }
            if !(r.radius_m >= 0.0) {
                return Err(Error::config(format!("robots[{i}].radius_m"), "must be non-negative"));
            }
            match (self.model, r.heading_rad) {
                (ModelKind::Unicycle, None) => {
                    return Err(Error::config(
                        format!("robots[{i}].heading_rad"),
                        "unicycle robots need an initial heading",
                    ))
                }
                (ModelKind::SingleIntegrator, Some(_)) => {
                    return Err(Error::config(
                        format!("robots[{i}].heading_rad"),
                        "single-integrator robots have no heading",
                    ))
                }
                _ => {}
            }
            if let Some(n) = &r.noise {
                n.validate()
                    .map_err(|e| Error::config(format!("robots[{i}].noise"), e.to_string()))?;
            }
        }
        for (o, obs) in self.obstacles.iter().enumerate() {
            if !(obs.radius >= 0.0) {
                return Err(Error::config(format!("obstacles[{o}].radius_m"), "must be non-negative"));
            }
        }
        self.noise.validate()?;
        self.mpc.validate()?;
        self.acp.validate()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if !(self.lipschitz >= 0.0) {
            return Err(Error::config("lipschitz", "must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if !(self.goal_tolerance_m > 0.0) {
            return Err(Error::config("goal_tolerance_m", "must be positive"));
        }
        let model = self.dynamics()?;
        let states = self.initial_states();
        for pair in self.pairs()? {
            if barrier_h(&pair, &states, &self.obstacles, &model)? <= 0.0 {
                return Err(Error::config(
                    "robots.start_m",
                    format!("start is not safe for pair {pair}"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "model": "single_integrator",
        "dt_s": 0.05,
        "robots": [{"start_m": [0, 0], "goal_m": [1, 0], "radius_m": 0.1}],
        "noise": {"kind": "gaussian", "sigma": [0, 0]},
        "mpc": {"horizon": 3},
        "gamma": 1.0,
        "steps": 10
    }"#;

    #[test]
    fn minimal_document_parses_with_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.mpc.horizon, 3);
        assert_eq!(s.mpc.r_weight, 0.1);
        assert_eq!(s.acp.alpha, 0.05);
        assert_eq!(s.seed, 1);
        assert_eq!(s.method, Method::AcpSbc);
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn zero_horizon_names_the_field() {
        let text = MINIMAL.replace(r#""horizon": 3"#, r#""horizon": 0"#);
        match Scenario::from_json(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "horizon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let text = MINIMAL.replace(r#""gamma": 1.0"#, r#""gama": 1.0"#);
        let err = Scenario::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
    }

    #[test]
    fn overlapping_starts_are_rejected() {
        let text = MINIMAL.replace(
            r#""robots": [{"start_m": [0, 0], "goal_m": [1, 0], "radius_m": 0.1}]"#,
            r#""robots": [{"start_m": [0, 0], "goal_m": [1, 0], "radius_m": 0.1},
                          {"start_m": [0.1, 0], "goal_m": [2, 0], "radius_m": 0.1}]"#,
        );
        assert!(matches!(
            Scenario::from_json(&text),
            Err(Error::Config { field, .. }) if field == "robots.start_m"
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.config_hash(), s.clone().config_hash());
        assert_ne!(s.config_hash(), s.clone().with_seed(2).config_hash());
        assert_eq!(s.config_hash().len(), 64);
    }
}
