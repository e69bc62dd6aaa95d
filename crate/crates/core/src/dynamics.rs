//! Discrete-time robot models and motion-noise sampling.
//!
//! Two kinematic models ship: the single integrator (`x⁺ = x + u·dt`) and the
//! forward-Euler unicycle. Motion noise enters at the velocity level, so a
//! stochastic step is a nominal step with a perturbed control.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Continuous robot state. `heading` is present only for the unicycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    pub heading: Option<f64>,
    pub radius: f64,
}

impl RobotState {
    pub fn integrator(x: f64, y: f64, radius: f64) -> Self {
        Self {
            position: Vec2::new(x, y),
            heading: None,
            radius,
        }
    }

    pub fn unicycle(x: f64, y: f64, heading: f64, radius: f64) -> Self {
        Self {
            position: Vec2::new(x, y),
            heading: Some(wrap_angle(heading)),
            radius,
        }
    }

    /// Heading or zero; the integrator carries no orientation.
    pub fn theta(&self) -> f64 {
        self.heading.unwrap_or(0.0)
    }
}

/// Control vector. Integrator: velocity `(vx, vy)` [m/s]. Unicycle:
/// linear velocity [m/s] and angular velocity [rad/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vec2);

impl ControlInput {
    pub fn new(a: f64, b: f64) -> Self {
        Self(Vec2::new(a, b))
    }

    pub fn zero() -> Self {
        Self(Vec2::zeros())
    }

    pub fn clamp(&self, lo: &Vec2, hi: &Vec2) -> Self {
        Self(Vec2::new(
            self.0.x.clamp(lo.x, hi.x),
            self.0.y.clamp(lo.y, hi.y),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleIntegrator,
    Unicycle,
}

/// A discrete-time kinematic model.
///
/// `lookahead` is the distance of the point the barrier is evaluated at,
/// ahead of the unicycle's center. It is unused by the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    pub dt: f64,
    pub lookahead: f64,
}

pub const DEFAULT_LOOKAHEAD: f64 = 0.05;

impl DynamicsModel {
    pub fn new(kind: ModelKind, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("dt_s", "must be positive and finite"));
        }
        Ok(Self {
            kind,
            dt,
            lookahead: DEFAULT_LOOKAHEAD,
        })
    }

    pub fn single_integrator(dt: f64) -> Result<Self> {
        Self::new(ModelKind::SingleIntegrator, dt)
    }

    pub fn unicycle(dt: f64) -> Result<Self> {
        Self::new(ModelKind::Unicycle, dt)
    }

    pub fn with_lookahead(mut self, lookahead: f64) -> Result<Self> {
        if !(lookahead > 0.0) {
            return Err(Error::config("lookahead_m", "must be positive"));
        }
        self.lookahead = lookahead;
        Ok(self)
    }

    pub fn check_state(&self, x: &RobotState) -> Result<()> {
        match (self.kind, x.heading) {
            (ModelKind::SingleIntegrator, Some(_)) => Err(Error::config(
                "heading_rad",
                "single integrator state must not carry a heading",
            )),
            (ModelKind::Unicycle, None) => {
                Err(Error::config("heading_rad", "unicycle state needs a heading"))
            }
            _ => Ok(()),
        }
    }

    /// One forward-Euler step with zero noise.
    pub fn step_nominal(&self, x: &RobotState, u: &ControlInput) -> Result<RobotState> {
        self.check_state(x)?;
        Ok(self.integrate(x, &u.0))
    }

    /// One step of the stochastic model: the nominal step under the control
    /// perturbed by a draw from `noise`.
    pub fn step_stochastic(
        &self,
        x: &RobotState,
        u: &ControlInput,
        noise: &NoiseSpec,
        rng: &mut RngStream,
    ) -> Result<RobotState> {
        self.check_state(x)?;
        let eps = sample_noise(noise, rng);
        let perturbed = Vec2::new(
            if eps.x == 0.0 { u.0.x } else { u.0.x + eps.x },
            if eps.y == 0.0 { u.0.y } else { u.0.y + eps.y },
        );
        Ok(self.integrate(x, &perturbed))
    }

    fn integrate(&self, x: &RobotState, u: &Vec2) -> RobotState {
        match self.kind {
            ModelKind::SingleIntegrator => RobotState {
                position: x.position + u * self.dt,
                heading: None,
                radius: x.radius,
            },
            ModelKind::Unicycle => {
                let th = x.theta();
                let (v, w) = (u.x, u.y);
                RobotState {
                    position: x.position + Vec2::new(v * th.cos(), v * th.sin()) * self.dt,
                    heading: Some(wrap_angle(th + w * self.dt)),
                    radius: x.radius,
                }
            }
        }
    }

    /// Jacobians `(∂x⁺/∂x, ∂x⁺/∂u)` of the nominal step over the padded state
    /// `(px, py, θ)`. The integrator's θ row and column are inert.
    pub fn jacobians(&self, x: &RobotState, u: &ControlInput) -> (Matrix3<f64>, Matrix3x2<f64>) {
        let dt = self.dt;
        match self.kind {
            ModelKind::SingleIntegrator => {
                let mut b = Matrix3x2::zeros();
                b[(0, 0)] = dt;
                b[(1, 1)] = dt;
                (Matrix3::identity(), b)
            }
            ModelKind::Unicycle => {
                let th = x.theta();
                let v = u.0.x;
                let mut a = Matrix3::identity();
                a[(0, 2)] = -v * th.sin() * dt;
                a[(1, 2)] = v * th.cos() * dt;
                let mut b = Matrix3x2::zeros();
                b[(0, 0)] = th.cos() * dt;
                b[(1, 0)] = th.sin() * dt;
                b[(2, 1)] = dt;
                (a, b)
            }
        }
    }

    /// The point the barrier is evaluated at, and its Jacobian with respect
    /// to the padded state.
    pub fn barrier_point(&self, x: &RobotState) -> (Vec2, Matrix2x3<f64>) {
        match self.kind {
            ModelKind::SingleIntegrator => {
                let mut j = Matrix2x3::zeros();
                j[(0, 0)] = 1.0;
                j[(1, 1)] = 1.0;
                (x.position, j)
            }
            ModelKind::Unicycle => {
                let th = x.theta();
                let d = self.lookahead;
                let p = x.position + Vec2::new(d * th.cos(), d * th.sin());
                let mut j = Matrix2x3::zeros();
                j[(0, 0)] = 1.0;
                j[(1, 1)] = 1.0;
                j[(0, 2)] = -d * th.sin();
                j[(1, 2)] = d * th.cos();
                (p, j)
            }
        }
    }

    /// Input matrix `M(x)` mapping controls to the barrier point's velocity,
    /// `ṗ = M(x)·u`.
    pub fn point_input_matrix(&self, x: &RobotState) -> nalgebra::Matrix2<f64> {
        match self.kind {
            ModelKind::SingleIntegrator => nalgebra::Matrix2::identity(),
            ModelKind::Unicycle => {
                let th = x.theta();
                let d = self.lookahead;
                nalgebra::Matrix2::new(th.cos(), -d * th.sin(), th.sin(), d * th.cos())
            }
        }
    }

    /// Derivative of `M(x)·u` with respect to θ (zero for the integrator).
    pub fn point_velocity_dtheta(&self, x: &RobotState, u: &ControlInput) -> Vec2 {
        match self.kind {
            ModelKind::SingleIntegrator => Vec2::zeros(),
            ModelKind::Unicycle => {
                let th = x.theta();
                let d = self.lookahead;
                let (v, w) = (u.0.x, u.0.y);
                Vec2::new(
                    -v * th.sin() - d * w * th.cos(),
                    v * th.cos() - d * w * th.sin(),
                )
            }
        }
    }

    /// Safety radius used between barrier points. For the unicycle, with
    /// `movers` look-ahead points in the pair, it is `R + movers·d`, so
    /// clear barrier points imply clear centers for every heading.
    pub fn barrier_radius(&self, combined: f64, movers: usize) -> f64 {
        match self.kind {
            ModelKind::SingleIntegrator => combined,
            ModelKind::Unicycle => combined + movers as f64 * self.lookahead,
        }
    }

    /// Zero-velocity command.
    pub fn brake(&self) -> ControlInput {
        ControlInput::zero()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Motion-noise distribution. All kinds are two-dimensional, matching the
/// control vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: [f64; 2] },
    Uniform { lo: [f64; 2], hi: [f64; 2] },
    /// Each draw picks one component uniformly at random.
    Mixture { components: Vec<NoiseSpec> },
}

fn unit_scale() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default = "unit_scale")]
    pub scale: [f64; 2],
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian {
                sigma: [sigma, sigma],
            },
            scale: unit_scale(),
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self {
            kind: NoiseKind::Uniform {
                lo: [lo, lo],
                hi: [hi, hi],
            },
            scale: unit_scale(),
        }
    }

    pub fn mixture(components: Vec<NoiseSpec>) -> Self {
        Self {
            kind: NoiseKind::Mixture { components },
            scale: unit_scale(),
        }
    }

    pub fn none() -> Self {
        Self::gaussian(0.0)
    }

    pub fn scaled(mut self, scale: [f64; 2]) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("noise.scale", "must be finite"));
        }
        match &self.kind {
            NoiseKind::Gaussian { sigma } => {
                if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                    return Err(Error::config("noise.sigma", "must be non-negative"));
                }
            }
            NoiseKind::Uniform { lo, hi } => {
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(Error::config("noise.lo", "lo must not exceed hi"));
                }
            }
            NoiseKind::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::config("noise.components", "mixture must be non-empty"));
                }
                for c in components {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// Draws one noise vector from `spec`.
pub fn sample_noise(spec: &NoiseSpec, rng: &mut RngStream) -> Vec2 {
    let raw = match &spec.kind {
        NoiseKind::Gaussian { sigma } => {
            let mut out = Vec2::zeros();
            for d in 0..2 {
                let z: f64 = rng.inner.sample(StandardNormal);
                out[d] = if sigma[d] == 0.0 { 0.0 } else { sigma[d] * z };
            }
            out
        }
        NoiseKind::Uniform { lo, hi } => {
            let mut out = Vec2::zeros();
            for d in 0..2 {
                out[d] = if lo[d] == hi[d] {
                    lo[d]
                } else {
                    rng.inner.random_range(lo[d]..=hi[d])
                };
            }
            out
        }
        NoiseKind::Mixture { components } => {
            let pick = rng.inner.random_range(0..components.len());
            sample_noise(&components[pick], rng)
        }
    };
    Vec2::new(raw.x * spec.scale[0], raw.y * spec.scale[1])
}

/// A seeded random stream owned by a single consumer.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Spawns named sub-streams from one master seed. A stream depends only on
/// the master seed and its name, so adding robots leaves existing streams
/// untouched.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    master: u64,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn stream(&self, name: &str) -> RngStream {
        // FNV-1a over the name, then one splitmix64 round mixed with the master seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RngStream::from_seed(splitmix64(self.master ^ splitmix64(h)))
    }

    pub fn robot_noise(&self, robot: usize) -> RngStream {
        self.stream(&format!("robot/{robot}/noise"))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
