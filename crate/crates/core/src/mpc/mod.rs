//! Finite-horizon MPC with conformally tightened barrier constraints.
//!
//! The optimizer works on a linearization of the problem around a reference
//! control sequence (the previous step's shifted plan). Positions are
//! tracked with a quadratic stage and terminal cost, controls are boxed, and
//! each pair contributes one tightened certificate per horizon step. The
//! certificate at step `t` is linearized in the step's own controls and,
//! through the predicted state, in all earlier controls.
//!
//! [`solve_qp`] solves that QP once (single integrator: dynamics and cost are
//! exact, only the certificates are linearized). [`solve_sqp`] re-linearizes
//! and resolves until the plan stops moving (unicycle).

pub mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3x2};
use serde::{Deserialize, Serialize};

use crate::cbf::{linearize_barrier, margin, BarrierPair, ObstacleSpec, TighteningMode};
use crate::dynamics::{ControlInput, DynamicsModel, ModelKind, RobotState, Vec2};
use crate::error::{Error, Result};
use qp::{QpProblem, QpSettings, QpStatus};

/// Slack below this counts as unused.
pub const SLACK_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// One joint problem over every robot's controls.
    #[default]
    Centralized,
    /// One problem per robot; neighbours follow their previous plans and
    /// each robot of a pair takes half of the certificate.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcParams {
    pub horizon: usize,
    /// Stage weight on position error.
    pub q_weight: f64,
    /// Stage weight on control effort.
    pub r_weight: f64,
    /// Terminal weight on position error.
    pub p_weight: f64,
    /// Lower control bound in SI units per component.
    #[serde(rename = "u_min_si")]
    pub u_min: Vec2,
    #[serde(rename = "u_max_si")]
    pub u_max: Vec2,
    pub slack_penalty: f64,
    pub eps_tol: f64,
    pub max_iter: usize,
    pub mode: SolveMode,
    /// Decoupled mode only: pairs whose reference clearance stays above this
    /// over the whole horizon are left out of a robot's problem.
    #[serde(rename = "sensing_radius_m")]
    pub sensing_radius: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            horizon: 8,
            q_weight: 1.0,
            r_weight: 0.1,
            p_weight: 10.0,
            u_min: Vec2::new(-1.0, -1.0),
            u_max: Vec2::new(1.0, 1.0),
            slack_penalty: 1e4,
            eps_tol: 1e-6,
            max_iter: 4000,
            mode: SolveMode::Centralized,
            sensing_radius: 1.0,
        }
    }
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        for (name, w) in [
            ("q_weight", self.q_weight),
            ("r_weight", self.r_weight),
            ("p_weight", self.p_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, "weights must be non-negative"));
            }
        }
        if !(self.u_min.x <= self.u_max.x && self.u_min.y <= self.u_max.y) {
            return Err(Error::config("u_min", "lower control bound exceeds upper bound"));
        }
        if !(self.slack_penalty > 0.0) {
            return Err(Error::config("slack_penalty", "must be positive"));
        }
        if !(self.eps_tol > 0.0) {
            return Err(Error::config("eps_tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be positive"));
        }
        Ok(())
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            eps_abs: self.eps_tol,
            eps_rel: self.eps_tol,
            max_iter: self.max_iter,
            ..QpSettings::default()
        }
    }
}

/// How conformal quantiles become constraint margins.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tightening {
    pub mode: TighteningMode,
    pub lipschitz: f64,
}

/// A tightened certificate at one horizon step, linear in the stacked
/// control vector: `row·u + constant − margin ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonConstraint {
    /// Lag whose quantile tightens this row; the row sits at step `tau − 1`.
    pub tau: usize,
    pub pair: usize,
    pub row: Vec<(usize, f64)>,
    pub constant: f64,
    pub margin: f64,
}

impl HorizonConstraint {
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        self.row.iter().map(|(i, a)| a * u[*i]).sum::<f64>() + self.constant - self.margin
    }
}

/// One MPC instance, linearized at `reference`.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub model: DynamicsModel,
    pub params: MpcParams,
    pub gamma: f64,
    pub start: Vec<RobotState>,
    pub goals: Vec<Vec2>,
    pub obstacles: Vec<ObstacleSpec>,
    pub pairs: Vec<BarrierPair>,
    /// Margin per pair and lag (`margins[p][tau − 1]`).
    pub margins: Vec<Vec<f64>>,
    /// Robots whose controls are pinned to zero.
    pub parked: Vec<bool>,
    /// Linearization point, `reference[t][robot]`.
    pub reference: Vec<Vec<ControlInput>>,
    pub constraints: Vec<HorizonConstraint>,
}

impl MpcProblem {
    pub fn robots(&self) -> usize {
        self.start.len()
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn var(&self, t: usize, robot: usize, comp: usize) -> usize {
        (t * self.robots() + robot) * 2 + comp
    }

    pub fn n_vars(&self) -> usize {
        2 * self.robots() * self.horizon()
    }

    /// Stacks a `[t][robot]` control sequence into the decision vector.
    pub fn stack(&self, controls: &[Vec<ControlInput>]) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_vars());
        for (t, step) in controls.iter().enumerate().take(self.horizon()) {
            for (r, u) in step.iter().enumerate() {
                v[self.var(t, r, 0)] = u.0.x;
                v[self.var(t, r, 1)] = u.0.y;
            }
        }
        v
    }

    pub fn unstack(&self, v: &DVector<f64>) -> Vec<Vec<ControlInput>> {
        (0..self.horizon())
            .map(|t| {
                (0..self.robots())
                    .map(|r| ControlInput::new(v[self.var(t, r, 0)], v[self.var(t, r, 1)]))
                    .collect()
            })
            .collect()
    }

    fn bounds(&self, robot: usize) -> (Vec2, Vec2) {
        if self.parked[robot] {
            (Vec2::zeros(), Vec2::zeros())
        } else {
            (self.params.u_min, self.params.u_max)
        }
    }

    fn clamp(&self, controls: &mut [Vec<ControlInput>]) {
        for step in controls.iter_mut() {
            for (r, u) in step.iter_mut().enumerate() {
                let (lo, hi) = self.bounds(r);
                *u = u.clamp(&lo, &hi);
            }
        }
    }

    /// Nominal rollout of a control sequence; `H + 1` joint states.
    pub fn rollout(&self, controls: &[Vec<ControlInput>]) -> Result<Vec<Vec<RobotState>>> {
        let mut states = Vec::with_capacity(self.horizon() + 1);
        states.push(self.start.clone());
        for step in controls.iter().take(self.horizon()) {
            let prev = states.last().expect("non-empty");
            let next = prev
                .iter()
                .zip(step)
                .map(|(x, u)| self.model.step_nominal(x, u))
                .collect::<Result<Vec<_>>>()?;
            states.push(next);
        }
        Ok(states)
    }

    /// Tracking cost `Σ‖pₜ − g‖²_Q + ‖p_H − g‖²_P + Σ‖uₜ‖²_R` of a sequence
    /// under the nonlinear rollout.
    pub fn cost(&self, controls: &[Vec<ControlInput>]) -> Result<f64> {
        let states = self.rollout(controls)?;
        let h = self.horizon();
        let mut j = 0.0;
        for (t, step) in states.iter().enumerate().skip(1) {
            let w = if t == h { self.params.p_weight } else { self.params.q_weight };
            for (r, x) in step.iter().enumerate() {
                j += w * (x.position - self.goals[r]).norm_squared();
            }
        }
        for step in controls.iter().take(h) {
            for u in step {
                j += self.params.r_weight * u.0.norm_squared();
            }
        }
        Ok(j)
    }

    /// Certificate values `B(xₜ, uₜ)` per lag and pair along the nonlinear
    /// rollout, `[tau − 1][pair]`. Degenerate pairs report NaN.
    pub fn predicted_barriers(
        &self,
        controls: &[Vec<ControlInput>],
        states: &[Vec<RobotState>],
    ) -> Vec<Vec<f64>> {
        (0..self.horizon())
            .map(|t| {
                self.pairs
                    .iter()
                    .map(|p| {
                        linearize_barrier(p, &states[t], &controls[t], &self.obstacles, &self.model, self.gamma)
                            .map(|l| l.value)
                            .unwrap_or(f64::NAN)
                    })
                    .collect()
            })
            .collect()
    }

    /// Constraint violation of a sequence under the nonlinear model.
    pub fn violation(&self, controls: &[Vec<ControlInput>]) -> Result<f64> {
        let states = self.rollout(controls)?;
        let b = self.predicted_barriers(controls, &states);
        let mut v = 0.0;
        for (t, row) in b.iter().enumerate() {
            for (p, val) in row.iter().enumerate() {
                let m = self.margins[p][t];
                if val.is_nan() {
                    v += m.max(1.0);
                } else {
                    v += (m - val).max(0.0);
                }
            }
        }
        Ok(v)
    }

    pub fn penalized_objective(&self, controls: &[Vec<ControlInput>]) -> Result<f64> {
        Ok(self.cost(controls)? + self.params.slack_penalty * self.violation(controls)?)
    }

    /// Re-linearizes the problem around `reference`.
    pub fn relinearize(&mut self, reference: Vec<Vec<ControlInput>>) -> Result<()> {
        self.reference = reference;
        self.constraints = linearize(self)?.rows;
        Ok(())
    }
}

/// Builds a problem over the joint state, linearized at `reference` (zero
/// controls when `None`). Quantiles are indexed `[pair][tau − 1]` and become
/// margins through `tightening`.
#[allow(clippy::too_many_arguments)]
pub fn build_problem(
    joint_state: &[RobotState],
    goals: &[Vec2],
    pairs: &[BarrierPair],
    obstacles: &[ObstacleSpec],
    quantiles: &[Vec<f64>],
    tightening: Tightening,
    params: &MpcParams,
    model: &DynamicsModel,
    gamma: f64,
    reference: Option<Vec<Vec<ControlInput>>>,
    parked: Option<Vec<bool>>,
) -> Result<MpcProblem> {
    params.validate()?;
    if goals.len() != joint_state.len() {
        return Err(Error::config("goal_m", "one goal per robot is required"));
    }
    if quantiles.len() != pairs.len() || quantiles.iter().any(|q| q.len() < params.horizon) {
        return Err(Error::Contract(
            "quantiles must cover every pair and lag 1..=H".into(),
        ));
    }
    if !(gamma > 0.0) {
        return Err(Error::config("gamma", "must be positive"));
    }
    for x in joint_state {
        model.check_state(x)?;
    }
    let h = params.horizon;
    let n = joint_state.len();
    let margins = quantiles
        .iter()
        .map(|qs| {
            qs.iter()
                .take(h)
                .map(|e| margin(*e, tightening.mode, tightening.lipschitz))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(e) = quantiles.iter().flatten().find(|e| !(**e >= 0.0)) {
        return Err(Error::Contract(format!("quantile must be non-negative, got {e}")));
    }
    let parked = parked.unwrap_or_else(|| vec![false; n]);
    let reference = match reference {
        Some(r) if r.len() == h && r.iter().all(|s| s.len() == n) => r,
        _ => vec![vec![ControlInput::zero(); n]; h],
    };
    let mut problem = MpcProblem {
        model: *model,
        params: *params,
        gamma,
        start: joint_state.to_vec(),
        goals: goals.to_vec(),
        obstacles: obstacles.to_vec(),
        pairs: pairs.to_vec(),
        margins,
        parked,
        reference: Vec::new(),
        constraints: Vec::new(),
    };
    let mut reference = reference;
    problem.clamp(&mut reference);
    problem.relinearize(reference)?;
    Ok(problem)
}

/// Linearization data around `problem.reference`.
struct Linearization {
    rollout: Vec<Vec<RobotState>>,
    /// `sens[r][t][s] = ∂xₜ/∂uₛ` for robot `r`, `s < t`.
    sens: Vec<Vec<Vec<Matrix3x2<f64>>>>,
    rows: Vec<HorizonConstraint>,
}

fn linearize(problem: &MpcProblem) -> Result<Linearization> {
    let h = problem.horizon();
    let n = problem.robots();
    let rollout = problem.rollout(&problem.reference)?;
    let mut sens = vec![vec![Vec::<Matrix3x2<f64>>::new(); h + 1]; n];
    for r in 0..n {
        for t in 0..h {
            let (a, b) = problem
                .model
                .jacobians(&rollout[t][r], &problem.reference[t][r]);
            let mut next: Vec<Matrix3x2<f64>> = sens[r][t].iter().map(|m| a * m).collect();
            next.push(b);
            sens[r][t + 1] = next;
        }
    }
    let mut rows = Vec::with_capacity(problem.pairs.len() * h);
    for t in 0..h {
        for (p, pair) in problem.pairs.iter().enumerate() {
            let lin = linearize_barrier(
                pair,
                &rollout[t],
                &problem.reference[t],
                &problem.obstacles,
                &problem.model,
                problem.gamma,
            )?;
            let mut row = Vec::with_capacity(4 + 4 * t);
            for (r, du) in &lin.du {
                row.push((problem.var(t, *r, 0), du.x));
                row.push((problem.var(t, *r, 1), du.y));
            }
            for (r, dx) in &lin.dx {
                for (s, m) in sens[*r][t].iter().enumerate() {
                    let g = m.transpose() * dx;
                    row.push((problem.var(s, *r, 0), g.x));
                    row.push((problem.var(s, *r, 1), g.y));
                }
            }
            let at_ref: f64 = row
                .iter()
                .map(|(i, a)| {
                    let (t, r, c) = unvar(problem, *i);
                    a * problem.reference[t][r].0[c]
                })
                .sum();
            rows.push(HorizonConstraint {
                tau: t + 1,
                pair: p,
                row,
                constant: lin.value - at_ref,
                margin: problem.margins[p][t],
            });
        }
    }
    Ok(Linearization {
        rollout,
        sens,
        rows,
    })
}

fn unvar(problem: &MpcProblem, i: usize) -> (usize, usize, usize) {
    let c = i % 2;
    let k = i / 2;
    (k / problem.robots(), k % problem.robots(), c)
}

/// Quadratic tracking cost of robot `r` over its own `2H` controls,
/// `½vᵀPv + qᵀv + constant`, exact for the integrator and Gauss-Newton for
/// the unicycle.
fn robot_cost(problem: &MpcProblem, lin: &Linearization, r: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let h = problem.horizon();
    let nv = 2 * h;
    let mut p = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    let mut constant = 0.0;
    let w_r = problem.params.r_weight;
    for i in 0..nv {
        p[(i, i)] += 2.0 * w_r;
    }
    let ubar: DVector<f64> = DVector::from_iterator(
        nv,
        (0..h).flat_map(|t| {
            let u = problem.reference[t][r].0;
            [u.x, u.y]
        }),
    );
    for t in 1..=h {
        let w = if t == h { problem.params.p_weight } else { problem.params.q_weight };
        if w == 0.0 {
            continue;
        }
        // pₜ ≈ p̄ₜ + J(v − v̄), J is 2 × 2H.
        let mut jac = DMatrix::zeros(2, nv);
        for (s, m) in lin.sens[r][t].iter().enumerate() {
            for row in 0..2 {
                jac[(row, 2 * s)] = m[(row, 0)];
                jac[(row, 2 * s + 1)] = m[(row, 1)];
            }
        }
        let offset = lin.rollout[t][r].position - problem.goals[r] - {
            let jv = &jac * &ubar;
            Vec2::new(jv[0], jv[1])
        };
        let off = DVector::from_vec(vec![offset.x, offset.y]);
        p += 2.0 * w * jac.transpose() * &jac;
        q += 2.0 * w * jac.transpose() * &off;
        constant += w * offset.norm_squared();
    }
    (p, q, constant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    Relaxed,
}

impl SolverStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::MaxIter => "max_iter",
            SolverStatus::Relaxed => "relaxed",
        }
    }

    fn worst(self, other: SolverStatus) -> SolverStatus {
        use SolverStatus::*;
        match (self, other) {
            (MaxIter, _) | (_, MaxIter) => MaxIter,
            (Relaxed, _) | (_, Relaxed) => Relaxed,
            _ => Optimal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// `controls[t][robot]`, within bounds.
    pub controls: Vec<Vec<ControlInput>>,
    /// Nominal states under `controls`, `H + 1` entries.
    pub states: Vec<Vec<RobotState>>,
    /// `B^τ` per lag and pair on the solution's own rollout, `[tau − 1][pair]`.
    pub predicted: Vec<Vec<f64>>,
    /// Slack used per constraint (same order as `MpcProblem::constraints`).
    pub slack: Vec<f64>,
    pub status: SolverStatus,
    pub iterations: usize,
    /// QP objective including the slack penalty.
    pub objective: f64,
    pub solve_time_s: f64,
}

impl MpcSolution {
    pub fn first_control(&self) -> Vec<ControlInput> {
        self.controls[0].clone()
    }

    pub fn slack_norm(&self) -> f64 {
        self.slack.iter().sum()
    }
}

/// Zero-velocity fallback command.
pub fn apply_brake(model: &DynamicsModel) -> ControlInput {
    model.brake()
}

struct QpOutcome {
    controls: Vec<Vec<ControlInput>>,
    slack: Vec<f64>,
    status: SolverStatus,
    iterations: usize,
    objective: f64,
}

/// Assembles the centralized QP. Certificate rows are soft, penalized by
/// the slack penalty per unit of violation; bound rows are hard.
fn centralized_qp(problem: &MpcProblem, lin: &Linearization) -> (QpProblem, f64) {
    let n = problem.n_vars();
    let mc = lin.rows.len();
    let h = problem.horizon();
    let mut p = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    let mut constant = 0.0;
    for r in 0..problem.robots() {
        let (pr, qr, cr) = robot_cost(problem, lin, r);
        constant += cr;
        for a in 0..2 * h {
            let ga = problem.var(a / 2, r, a % 2);
            q[ga] += qr[a];
            for b in 0..2 * h {
                p[(ga, problem.var(b / 2, r, b % 2))] += pr[(a, b)];
            }
        }
    }
    let m = mc + n;
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::from_element(m, f64::INFINITY);
    let mut penalty = DVector::zeros(m);
    for (k, c) in lin.rows.iter().enumerate() {
        for (i, v) in &c.row {
            a[(k, *i)] += v;
        }
        l[k] = c.margin - c.constant;
        penalty[k] = problem.params.slack_penalty;
    }
    for t in 0..h {
        for r in 0..problem.robots() {
            let (lo, hi) = problem.bounds(r);
            for comp in 0..2 {
                let v = problem.var(t, r, comp);
                let row = mc + v;
                a[(row, v)] = 1.0;
                l[row] = lo[comp];
                u[row] = hi[comp];
            }
        }
    }
    (QpProblem::new(p, q, a, l, u).with_penalty(penalty), constant)
}

/// Solves the penalized QP. The certificates come first among its rows, so
/// the first `n_rows` slacks are theirs. A solution with every slack below
/// tolerance solves the hard problem exactly (the penalty is exact), and is
/// reported optimal.
fn solve_penalized(
    problem: &MpcProblem,
    qp_problem: &QpProblem,
    constant: f64,
    n_rows: usize,
    warm: &DVector<f64>,
) -> (DVector<f64>, Vec<f64>, SolverStatus, usize, f64) {
    let settings = problem.params.qp_settings();
    let sol = qp::solve(qp_problem, &settings, Some((warm, &DVector::zeros(qp_problem.m()))));
    let slack: Vec<f64> = qp_problem.slack(&sol.x).into_iter().take(n_rows).collect();
    let obj = qp_problem.objective(&sol.x) + constant;
    let status = match sol.status {
        QpStatus::Solved if slack.iter().all(|s| *s <= SLACK_TOL) => SolverStatus::Optimal,
        QpStatus::Solved => SolverStatus::Relaxed,
        _ => SolverStatus::MaxIter,
    };
    let slack = if status == SolverStatus::Optimal {
        vec![0.0; n_rows]
    } else {
        slack
    };
    (sol.x, slack, status, sol.iterations, obj)
}

fn solve_linearized(problem: &MpcProblem, lin: &Linearization) -> Result<QpOutcome> {
    match problem.params.mode {
        SolveMode::Centralized => {
            let warm = problem.stack(&problem.reference);
            let (qp_problem, constant) = centralized_qp(problem, lin);
            let (x, slack, status, iterations, objective) =
                solve_penalized(problem, &qp_problem, constant, lin.rows.len(), &warm);
            let mut controls = problem.unstack(&x);
            problem.clamp(&mut controls);
            Ok(QpOutcome {
                controls,
                slack,
                status,
                iterations,
                objective,
            })
        }
        SolveMode::Decoupled => solve_decoupled(problem, lin),
    }
}

/// Rows relevant to robot `r` in decoupled mode, with the robot's share of
/// each certificate.
fn decoupled_rows(problem: &MpcProblem, lin: &Linearization, r: usize) -> Vec<(usize, Vec<(usize, f64)>, f64)> {
    let h = problem.horizon();
    let ubar = problem.stack(&problem.reference);
    let near: Vec<bool> = problem
        .pairs
        .iter()
        .map(|pair| {
            pair.involves(r)
                && (0..=h).any(|t| {
                    crate::cbf::clearance(pair, &lin.rollout[t], &problem.obstacles)
                        .map(|c| c < problem.params.sensing_radius)
                        .unwrap_or(true)
                })
        })
        .collect();
    let mut out = Vec::new();
    for (k, c) in lin.rows.iter().enumerate() {
        if !near[c.pair] {
            continue;
        }
        let pair = &problem.pairs[c.pair];
        let other_parked = match pair.robots() {
            (a, Some(b)) => problem.parked[if a == r { b } else { a }],
            (_, None) => true,
        };
        let share = if other_parked { 1.0 } else { 0.5 };
        // Linearized certificate at the reference, minus margin.
        let at_ref = c.residual(&ubar);
        let mut own = Vec::new();
        let mut own_ref = 0.0;
        for (i, a) in &c.row {
            let (t, rr, comp) = unvar(problem, *i);
            if rr == r {
                own.push((2 * t + comp, *a));
                own_ref += a * problem.reference[t][r].0[comp];
            }
        }
        // own·v − own·v̄ + share·at_ref ≥ 0
        out.push((k, own, share * at_ref - own_ref));
    }
    out
}

fn solve_decoupled(problem: &MpcProblem, lin: &Linearization) -> Result<QpOutcome> {
    use rayon::prelude::*;
    let h = problem.horizon();
    let nv = 2 * h;
    let per_robot: Vec<(usize, Option<(DVector<f64>, Vec<(usize, f64)>, SolverStatus, usize, f64)>)> = (0
        ..problem.robots())
        .into_par_iter()
        .map(|r| {
            if problem.parked[r] {
                return (r, None);
            }
            let (pc, qc, cc) = robot_cost(problem, lin, r);
            let rows = decoupled_rows(problem, lin, r);
            let mc = rows.len();
            let (lo, hi) = problem.bounds(r);
            let m = mc + nv;
            let mut a = DMatrix::zeros(m, nv);
            let mut l = DVector::from_element(m, f64::NEG_INFINITY);
            let mut u = DVector::from_element(m, f64::INFINITY);
            let mut penalty = DVector::zeros(m);
            for (k, (_, own, constant)) in rows.iter().enumerate() {
                for (i, v) in own {
                    a[(k, *i)] += v;
                }
                l[k] = -constant;
                penalty[k] = problem.params.slack_penalty;
            }
            for v in 0..nv {
                a[(mc + v, v)] = 1.0;
                l[mc + v] = lo[v % 2];
                u[mc + v] = hi[v % 2];
            }
            let qp_problem = QpProblem::new(pc, qc, a, l, u).with_penalty(penalty);
            let warm = DVector::from_iterator(
                nv,
                (0..h).flat_map(|t| {
                    let u = problem.reference[t][r].0;
                    [u.x, u.y]
                }),
            );
            let (x, slack, status, iters, obj) = solve_penalized(problem, &qp_problem, cc, mc, &warm);
            let slack_rows = rows.iter().map(|(k, _, _)| *k).zip(slack).collect();
            (r, Some((x, slack_rows, status, iters, obj)))
        })
        .collect();

    let mut controls = vec![vec![ControlInput::zero(); problem.robots()]; h];
    let mut slack = vec![0.0; lin.rows.len()];
    let mut status = SolverStatus::Optimal;
    let mut iterations = 0;
    let mut objective = 0.0;
    for (r, out) in per_robot {
        if let Some((x, slack_rows, st, it, obj)) = out {
            for t in 0..h {
                controls[t][r] = ControlInput::new(x[2 * t], x[2 * t + 1]);
            }
            for (k, s) in slack_rows {
                slack[k] += s;
            }
            status = status.worst(st);
            iterations += it;
            objective += obj;
        }
    }
    problem.clamp(&mut controls);
    Ok(QpOutcome {
        controls,
        slack,
        status,
        iterations,
        objective,
    })
}

fn finish(problem: &MpcProblem, out: QpOutcome, started: Instant) -> Result<MpcSolution> {
    let states = problem.rollout(&out.controls)?;
    let predicted = problem.predicted_barriers(&out.controls, &states);
    Ok(MpcSolution {
        controls: out.controls,
        states,
        predicted,
        slack: out.slack,
        status: out.status,
        iterations: out.iterations,
        objective: out.objective,
        solve_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Solves the problem's QP once at its linearization point.
pub fn solve_qp(problem: &MpcProblem) -> Result<MpcSolution> {
    if problem.model.kind != ModelKind::SingleIntegrator {
        return Err(Error::config(
            "model.kind",
            "solve_qp needs control-affine constraints; use solve_sqp for the unicycle",
        ));
    }
    let started = Instant::now();
    let lin = linearize(problem)?;
    let out = solve_linearized(problem, &lin)?;
    finish(problem, out, started)
}

/// Outer iterations of [`solve_sqp`].
pub const SQP_MAX_OUTER: usize = 10;

/// Sequential QP: roll out, linearize, solve, then step toward the QP plan
/// with a backtracking line search (factor ½) on cost plus penalized
/// violation. Stops when the plan moves less than `eps_tol` or the merit
/// improves by less than `eps_tol` relative.
pub fn solve_sqp(problem: &MpcProblem) -> Result<MpcSolution> {
    let started = Instant::now();
    let mut work = problem.clone();
    let mut current = work.reference.clone();
    let mut merit = work.penalized_objective(&current)?;
    let mut last: Option<QpOutcome> = None;
    let mut iterations = 0;
    for _ in 0..SQP_MAX_OUTER {
        let lin = linearize(&work)?;
        let out = solve_linearized(&work, &lin)?;
        iterations += out.iterations;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let cand: Vec<Vec<ControlInput>> = current
                .iter()
                .zip(&out.controls)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(ua, ub)| ControlInput(ua.0 + step * (ub.0 - ua.0)))
                        .collect()
                })
                .collect();
            let m = work.penalized_objective(&cand)?;
            if m <= merit + 1e-12 * merit.abs().max(1.0) {
                accepted = Some((cand, m));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, m)) = accepted else {
            last = Some(out);
            break;
        };
        let change = current
            .iter()
            .flatten()
            .zip(cand.iter().flatten())
            .map(|(a, b)| (a.0 - b.0).amax())
            .fold(0.0, f64::max);
        let stalled = merit - m <= work.params.eps_tol * merit.abs().max(1.0);
        current = cand;
        merit = m;
        work.relinearize(current.clone())?;
        last = Some(out);
        if change < work.params.eps_tol || stalled {
            break;
        }
    }
    let out = last.expect("at least one outer iteration");
    // Report the accepted iterate and its linearized constraints.
    let lin = linearize(&work)?;
    let v = work.stack(&current);
    let slack: Vec<f64> = lin.rows.iter().map(|c| (-c.residual(&v)).max(0.0)).collect();
    let status = if out.status == SolverStatus::MaxIter {
        SolverStatus::MaxIter
    } else if slack.iter().any(|s| *s > work.params.eps_tol.max(SLACK_TOL)) {
        SolverStatus::Relaxed
    } else {
        SolverStatus::Optimal
    };
    let slack = if status == SolverStatus::Optimal {
        vec![0.0; slack.len()]
    } else {
        slack
    };
    let mut controls = current;
    work.clamp(&mut controls);
    let objective = work.cost(&controls)? + work.params.slack_penalty * slack.iter().sum::<f64>();
    finish(
        &work,
        QpOutcome {
            controls,
            slack,
            status,
            iterations,
            objective,
        },
        started,
    )
}

/// Dispatches on the model: QP for the integrator, SQP for the unicycle.
pub fn solve(problem: &MpcProblem) -> Result<MpcSolution> {
    match problem.model.kind {
        ModelKind::SingleIntegrator => solve_qp(problem),
        ModelKind::Unicycle => solve_sqp(problem),
    }
}

/// The previous plan shifted one step, last control repeated.
pub fn shift_plan(plan: &[Vec<ControlInput>]) -> Vec<Vec<ControlInput>> {
    if plan.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<Vec<ControlInput>> = plan[1..].to_vec();
    out.push(plan[plan.len() - 1].clone());
    out
}
