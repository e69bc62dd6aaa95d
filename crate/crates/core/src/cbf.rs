//! Barrier functions for circular robots and obstacles, their affine-in-control
//! certificate terms, and conformal tightening of the resulting constraint.
//!
//! For a pair with combined radius `R`, `h = ‖pᵢ − pⱼ‖² − R²` and the
//! certificate is `B(x, u) = L_f h + L_g h·u + γh`. Both models here are
//! driftless, so `L_f h = 0` and `B = 2(pᵢ − pⱼ)·(ṗᵢ − ṗⱼ) + γh`.

use std::fmt;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, DynamicsModel, RngStream, RobotState, Vec2};
use crate::error::{Error, Result};

/// Distance below which two barrier centers count as coincident.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    #[serde(rename = "center_m")]
    pub center: Vec2,
    #[serde(rename = "radius_m")]
    pub radius: f64,
}

impl ObstacleSpec {
    pub fn new(x: f64, y: f64, radius: f64) -> Self {
        Self {
            center: Vec2::new(x, y),
            radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    RobotRobot { i: usize, j: usize },
    RobotObstacle { robot: usize, obstacle: usize },
}

/// Which ledger group a pair reports to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairGroup {
    RobotRobot,
    RobotObstacle,
}

impl PairGroup {
    pub fn label(&self) -> &'static str {
        match self {
            PairGroup::RobotRobot => "rr",
            PairGroup::RobotObstacle => "ro",
        }
    }
}

/// One safety relation between two robots or a robot and an obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierPair {
    pub kind: PairKind,
    pub combined_radius: f64,
}

impl BarrierPair {
    pub fn robot_robot(i: usize, j: usize, combined_radius: f64) -> Result<Self> {
        if i == j {
            return Err(Error::config("pair", "robot-robot pair needs two distinct robots"));
        }
        Self::checked(PairKind::RobotRobot { i, j }, combined_radius)
    }

    pub fn robot_obstacle(robot: usize, obstacle: usize, combined_radius: f64) -> Result<Self> {
        Self::checked(PairKind::RobotObstacle { robot, obstacle }, combined_radius)
    }

    fn checked(kind: PairKind, combined_radius: f64) -> Result<Self> {
        if !(combined_radius > 0.0) {
            return Err(Error::config("radius_m", "combined radius of a pair must be positive"));
        }
        Ok(Self {
            kind,
            combined_radius,
        })
    }

    pub fn group(&self) -> PairGroup {
        match self.kind {
            PairKind::RobotRobot { .. } => PairGroup::RobotRobot,
            PairKind::RobotObstacle { .. } => PairGroup::RobotObstacle,
        }
    }

    /// Robots whose controls enter this pair's certificate.
    pub fn robots(&self) -> (usize, Option<usize>) {
        match self.kind {
            PairKind::RobotRobot { i, j } => (i, Some(j)),
            PairKind::RobotObstacle { robot, .. } => (robot, None),
        }
    }

    pub fn involves(&self, robot: usize) -> bool {
        let (a, b) = self.robots();
        a == robot || b == Some(robot)
    }

    /// Identifiers used in logs: robot indices as numbers, obstacles as `o<k>`.
    pub fn ids(&self) -> (String, String) {
        match self.kind {
            PairKind::RobotRobot { i, j } => (i.to_string(), j.to_string()),
            PairKind::RobotObstacle { robot, obstacle } => {
                (robot.to_string(), format!("o{obstacle}"))
            }
        }
    }
}

impl fmt::Display for BarrierPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.ids();
        write!(f, "({a}, {b})")
    }
}

/// Every robot-robot pair (i < j) followed by every robot-obstacle pair.
pub fn all_pairs(robots: &[RobotState], obstacles: &[ObstacleSpec]) -> Result<Vec<BarrierPair>> {
    let mut pairs = Vec::new();
    for i in 0..robots.len() {
        for j in i + 1..robots.len() {
            pairs.push(BarrierPair::robot_robot(
                i,
                j,
                robots[i].radius + robots[j].radius,
            )?);
        }
    }
    for (r, robot) in robots.iter().enumerate() {
        for (o, obs) in obstacles.iter().enumerate() {
            pairs.push(BarrierPair::robot_obstacle(r, o, robot.radius + obs.radius)?);
        }
    }
    Ok(pairs)
}

fn robot<'a>(robots: &'a [RobotState], idx: usize) -> Result<&'a RobotState> {
    robots
        .get(idx)
        .ok_or_else(|| Error::config("pair", format!("robot index {idx} out of range")))
}

fn obstacle<'a>(obstacles: &'a [ObstacleSpec], idx: usize) -> Result<&'a ObstacleSpec> {
    obstacles
        .get(idx)
        .ok_or_else(|| Error::config("pair", format!("obstacle index {idx} out of range")))
}

/// `‖xᵢ − xⱼ‖² − R²` on robot centers. Positive means safely separated.
pub fn h_value(pair: &BarrierPair, robots: &[RobotState], obstacles: &[ObstacleSpec]) -> Result<f64> {
    let d = match pair.kind {
        PairKind::RobotRobot { i, j } => robot(robots, i)?.position - robot(robots, j)?.position,
        PairKind::RobotObstacle { robot: r, obstacle: o } => {
            robot(robots, r)?.position - obstacle(obstacles, o)?.center
        }
    };
    Ok(d.norm_squared() - pair.combined_radius * pair.combined_radius)
}

/// Center distance minus combined radius; same sign as [`h_value`].
pub fn clearance(pair: &BarrierPair, robots: &[RobotState], obstacles: &[ObstacleSpec]) -> Result<f64> {
    let d = match pair.kind {
        PairKind::RobotRobot { i, j } => robot(robots, i)?.position - robot(robots, j)?.position,
        PairKind::RobotObstacle { robot: r, obstacle: o } => {
            robot(robots, r)?.position - obstacle(obstacles, o)?.center
        }
    };
    Ok(d.norm() - pair.combined_radius)
}

/// Affine certificate `B(u) = Σ aᵣ·uᵣ + c` for one pair at one state.
///
/// `a` holds one coefficient block per robot involved in the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierTerms {
    pub a: Vec<(usize, Vec2)>,
    pub c: f64,
    pub h_val: f64,
}

impl BarrierTerms {
    /// `a·u + c` for a joint control (indexed by robot).
    pub fn eval(&self, controls: &[ControlInput]) -> f64 {
        self.a
            .iter()
            .map(|(r, g)| g.dot(&controls[*r].0))
            .sum::<f64>()
            + self.c
    }

    pub fn coefficient(&self, robot: usize) -> Vec2 {
        self.a
            .iter()
            .filter(|(r, _)| *r == robot)
            .map(|(_, g)| *g)
            .sum()
    }
}

/// Geometry shared by the certificate and its linearization.
struct PairGeometry {
    /// pᵢ − pⱼ at the barrier points.
    rel: Vec2,
    h: f64,
    first: usize,
    second: Option<usize>,
}

/// Offset between the barrier points of a pair and the radius they must keep.
fn barrier_offset(
    pair: &BarrierPair,
    robots: &[RobotState],
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
) -> Result<(Vec2, f64)> {
    Ok(match pair.kind {
        PairKind::RobotRobot { i, j } => {
            let (pi, _) = model.barrier_point(robot(robots, i)?);
            let (pj, _) = model.barrier_point(robot(robots, j)?);
            (pi - pj, model.barrier_radius(pair.combined_radius, 2))
        }
        PairKind::RobotObstacle { robot: r, obstacle: o } => {
            let (pi, _) = model.barrier_point(robot(robots, r)?);
            (pi - obstacle(obstacles, o)?.center, model.barrier_radius(pair.combined_radius, 1))
        }
    })
}

/// The barrier `h` the certificate protects under `model`.
///
/// Equal to [`h_value`] for the single integrator. For the unicycle it is
/// taken between look-ahead points with the widened radius, a disk that
/// contains the robot's own footprint.
pub fn barrier_h(
    pair: &BarrierPair,
    robots: &[RobotState],
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
) -> Result<f64> {
    let (rel, radius) = barrier_offset(pair, robots, obstacles, model)?;
    Ok(rel.norm_squared() - radius * radius)
}

fn geometry(
    pair: &BarrierPair,
    robots: &[RobotState],
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
) -> Result<PairGeometry> {
    let (rel, radius) = barrier_offset(pair, robots, obstacles, model)?;
    let (first, second) = pair.robots();
    if rel.norm() < DEGENERATE_DISTANCE {
        return Err(Error::DegenerateGradient {
            pair: pair.to_string(),
        });
    }
    Ok(PairGeometry {
        rel,
        h: rel.norm_squared() - radius * radius,
        first,
        second,
    })
}

/// Certificate terms of `pair` under `model` at the given joint state.
///
/// For the unicycle the barrier is taken at the look-ahead point, whose
/// velocity depends on both controls, with the radius widened by
/// [`DynamicsModel::barrier_radius`].
pub fn barrier_terms(
    pair: &BarrierPair,
    robots: &[RobotState],
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
    gamma: f64,
) -> Result<BarrierTerms> {
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("gamma must be positive, got {gamma}")));
    }
    let g = geometry(pair, robots, obstacles, model)?;
    let grad = 2.0 * g.rel;
    let mut a = vec![(
        g.first,
        model.point_input_matrix(&robots[g.first]).transpose() * grad,
    )];
    if let Some(j) = g.second {
        a.push((j, -(model.point_input_matrix(&robots[j]).transpose() * grad)));
    }
    Ok(BarrierTerms {
        a,
        c: gamma * g.h,
        h_val: g.h,
    })
}

/// Value of the certificate together with its partial derivatives, used to
/// linearize constraints along a predicted trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierLinearization {
    pub value: f64,
    /// ∂B/∂uᵣ per involved robot.
    pub du: Vec<(usize, Vec2)>,
    /// ∂B/∂xᵣ per involved robot over the padded state `(px, py, θ)`.
    pub dx: Vec<(usize, Vector3<f64>)>,
}

pub fn linearize_barrier(
    pair: &BarrierPair,
    robots: &[RobotState],
    controls: &[ControlInput],
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
    gamma: f64,
) -> Result<BarrierLinearization> {
    let g = geometry(pair, robots, obstacles, model)?;
    let xi = &robots[g.first];
    let ui = &controls[g.first];
    let vi = model.point_input_matrix(xi) * ui.0;
    let vj = match g.second {
        Some(j) => model.point_input_matrix(&robots[j]) * controls[j].0,
        None => Vec2::zeros(),
    };
    let value = 2.0 * g.rel.dot(&(vi - vj)) + gamma * g.h;

    // ∂B/∂pᵢ = 2(ṗᵢ − ṗⱼ) + 2γ(pᵢ − pⱼ)
    let dp: Vector2<f64> = 2.0 * (vi - vj) + 2.0 * gamma * g.rel;
    let state_grad = |x: &RobotState, u: &ControlInput, sign: f64| -> Vector3<f64> {
        let (_, jp) = model.barrier_point(x);
        let mut d = jp.transpose() * (sign * dp);
        d[2] += sign * 2.0 * g.rel.dot(&model.point_velocity_dtheta(x, u));
        d
    };
    let grad = 2.0 * g.rel;
    let mut du = vec![(g.first, model.point_input_matrix(xi).transpose() * grad)];
    let mut dx = vec![(g.first, state_grad(xi, ui, 1.0))];
    if let Some(j) = g.second {
        du.push((j, -(model.point_input_matrix(&robots[j]).transpose() * grad)));
        dx.push((j, state_grad(&robots[j], &controls[j], -1.0)));
    }
    Ok(BarrierLinearization { value, du, dx })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TighteningMode {
    /// Margin is the barrier-score quantile itself.
    #[default]
    Barrier,
    /// Margin is a Lipschitz constant times a state-score quantile.
    StateLipschitz,
}

/// `a·u + c − margin ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub a: Vec<(usize, Vec2)>,
    pub c: f64,
    pub margin: f64,
}

impl LinearConstraint {
    pub fn residual(&self, controls: &[ControlInput]) -> f64 {
        self.a
            .iter()
            .map(|(r, g)| g.dot(&controls[*r].0))
            .sum::<f64>()
            + self.c
            - self.margin
    }

    pub fn is_satisfied(&self, controls: &[ControlInput]) -> bool {
        self.residual(controls) >= 0.0
    }
}

/// Tightens a certificate by a conformal quantile `e_r`.
pub fn tighten(
    terms: &BarrierTerms,
    e_r: f64,
    mode: TighteningMode,
    lip: f64,
) -> Result<LinearConstraint> {
    if !(e_r >= 0.0) {
        return Err(Error::Contract(format!("quantile must be non-negative, got {e_r}")));
    }
    Ok(LinearConstraint {
        a: terms.a.clone(),
        c: terms.c,
        margin: margin(e_r, mode, lip)?,
    })
}

/// The margin subtracted from a certificate for quantile `e_r`.
pub fn margin(e_r: f64, mode: TighteningMode, lip: f64) -> Result<f64> {
    match mode {
        TighteningMode::Barrier => Ok(e_r),
        TighteningMode::StateLipschitz => {
            if !(lip >= 0.0) {
                return Err(Error::Contract(format!(
                    "Lipschitz constant must be non-negative, got {lip}"
                )));
            }
            Ok(lip * e_r)
        }
    }
}

/// `L = L_{L_f h} + L_{L_g h}·‖u‖ + L_{K h}`, bounding
/// `|B(x̂, u) − B(x, u)| ≤ L‖x̂ − x‖`.
pub fn lipschitz_bound(lip_lfh: f64, lip_lgh: f64, u_norm: f64, lip_kh: f64) -> f64 {
    lip_lfh + lip_lgh * u_norm + lip_kh
}

/// Constituent Lipschitz constants of the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub lfh: f64,
    pub lgh: f64,
    pub kh: f64,
}

impl LipschitzConstants {
    pub fn bound(&self, u_norm: f64) -> f64 {
        lipschitz_bound(self.lfh, self.lgh, u_norm, self.kh)
    }
}

/// Closed-form constants for the single-integrator barrier, as functions of
/// the relative position `r = xᵢ − xⱼ` with `‖r‖ ≤ diameter`:
/// `L_g h(r) = 2rᵀ` has constant 2, and `γh(r)` has constant `2γ·diameter`.
pub fn integrator_lipschitz(diameter: f64, gamma: f64) -> LipschitzConstants {
    LipschitzConstants {
        lfh: 0.0,
        lgh: 2.0,
        kh: 2.0 * gamma * diameter,
    }
}

/// Finite-difference estimate of the same constants: the largest observed
/// difference quotient over `samples` random pairs of relative positions
/// inside a disk of radius `diameter`. Always a lower bound of the true
/// constants.
pub fn estimate_integrator_lipschitz(
    diameter: f64,
    gamma: f64,
    radius: f64,
    samples: usize,
    rng: &mut RngStream,
) -> LipschitzConstants {
    let draw = |rng: &mut RngStream| loop {
        let p = Vec2::new(
            rng.rng().random_range(-diameter..=diameter),
            rng.rng().random_range(-diameter..=diameter),
        );
        if p.norm() <= diameter {
            return p;
        }
    };
    let h = |r: &Vec2| r.norm_squared() - radius * radius;
    let mut est = LipschitzConstants {
        lfh: 0.0,
        lgh: 0.0,
        kh: 0.0,
    };
    for _ in 0..samples {
        let a = draw(rng);
        let b = draw(rng);
        let dist = (a - b).norm();
        if dist < 1e-12 {
            continue;
        }
        // L_g h(r) = 2rᵀ; its operator-norm difference is 2‖a − b‖.
        est.lgh = est.lgh.max((2.0 * a - 2.0 * b).norm() / dist);
        est.kh = est.kh.max((gamma * h(&a) - gamma * h(&b)).abs() / dist);
    }
    est
}
