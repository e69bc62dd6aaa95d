//! Closed-loop execution: observe, score, tighten, solve, apply.
//!
//! Each step of [`run`]:
//! 1. observes the joint state and evaluates `h` and `B̂ₖ` (under the
//!    previous control) for every pair;
//! 2. scores the buffered predictions against `B̂ₖ` and feeds one event per
//!    ledger and lag to the conformal ledgers;
//! 3. reads the per-lag quantiles, builds and solves the MPC;
//! 4. applies the first control through the stochastic model and rolls the
//!    prediction buffer forward.

mod log;
mod scenario;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acp::{lagged_scores, observed_barrier, AcpLedger, PredictionBuffer};
use crate::cbf::{barrier_h, clearance, BarrierPair, PairGroup};
use crate::dynamics::{ControlInput, NoiseSpec, RngStreams, RobotState};
use crate::error::{Error, Result};
use crate::mpc::{self, build_problem, shift_plan, SolverStatus};

pub use log::{parse_csv, write_rows, CsvRow, LoggedEvent, RunMetadata, StepRecord, StepStatus, TrajectoryLog, CSV_COLUMNS};
pub use scenario::{Granularity, Method, RobotSpec, Scenario};

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<TrajectoryLog> {
    scenario.validate()?;
    let model = scenario.dynamics()?;
    let pairs = scenario.pairs()?;
    let goals = scenario.goals();
    let obstacles = &scenario.obstacles;
    let h_len = scenario.mpc.horizon;
    let gamma = scenario.gamma;
    let n = scenario.robots.len();

    let (ledger_labels, ledger_of) = ledger_layout(&pairs, scenario.granularity);
    let mut ledgers = ledger_labels
        .iter()
        .map(|_| AcpLedger::new(h_len, scenario.acp))
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = PredictionBuffer::new(h_len);

    let streams = RngStreams::new(scenario.seed);
    let mut rngs: Vec<_> = (0..n).map(|i| streams.robot_noise(i)).collect();

    let mut x = scenario.initial_states();
    let mut prev_u = vec![ControlInput::zero(); n];
    let mut plan: Option<Vec<Vec<ControlInput>>> = None;
    let mut steps = Vec::with_capacity(scenario.steps);

    for k in 0..scenario.steps {
        let h: Vec<f64> = pairs
            .iter()
            .map(|p| barrier_h(p, &x, obstacles, &model))
            .collect::<Result<_>>()?;
        let (min_rr, min_ro) = min_clearances(&pairs, &x, obstacles)?;

        let b_hat: Vec<Option<f64>> = if k == 0 {
            vec![None; pairs.len()]
        } else {
            pairs
                .iter()
                .map(|p| observed_barrier(&x, &prev_u, p, obstacles, &model, gamma).ok())
                .collect()
        };
        let observed: Vec<f64> = b_hat.iter().map(|b| b.unwrap_or(f64::NAN)).collect();

        // One event per (ledger, lag): the scored pair with the smallest h.
        let mut chosen: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
        for (tau, p, score) in lagged_scores(&buffer, &observed, k) {
            let key = (ledger_of[p], tau);
            match chosen.get(&key) {
                Some((q, _)) if h[*q] <= h[p] => {}
                _ => {
                    chosen.insert(key, (p, score));
                }
            }
        }
        let mut events = Vec::with_capacity(chosen.len());
        for ((l, tau), (p, score)) in chosen {
            let event = ledgers[l].observe(k, tau, score)?;
            events.push(LoggedEvent {
                ledger: l,
                pair: p,
                b_hat: observed[p],
                event,
            });
        }

        let quantiles: Vec<Vec<f64>> = ledgers
            .iter()
            .map(|l| (1..=h_len).map(|tau| l.quantile(tau)).collect())
            .collect();
        let alphas: Vec<Vec<f64>> = ledgers
            .iter()
            .map(|l| (1..=h_len).map(|tau| l.level(tau)).collect())
            .collect();
        let pair_q: Vec<Vec<f64>> = match scenario.method {
            Method::AcpSbc => ledger_of.iter().map(|l| quantiles[*l].clone()).collect(),
            Method::CbfBaseline => vec![vec![0.0; h_len]; pairs.len()],
        };

        let parked: Vec<bool> = (0..n)
            .map(|i| scenario.stop_at_goal && (x[i].position - goals[i]).norm() <= scenario.goal_tolerance_m)
            .collect();
        let reference = plan.as_ref().map(|p| shift_plan(p));
        let solved = build_problem(
            &x,
            &goals,
            &pairs,
            obstacles,
            &pair_q,
            scenario.tightening(),
            &scenario.mpc,
            &model,
            gamma,
            reference,
            Some(parked.clone()),
        )
        .and_then(|prob| Ok((mpc::solve(&prob)?, prob)));

        let mut pair_slack = vec![0.0; pairs.len()];
        let (u, status, iterations, solve_time_s) = match solved {
            Ok((sol, prob)) => {
                for (c, s) in prob.constraints.iter().zip(&sol.slack) {
                    pair_slack[c.pair] += s;
                }
                let status = match sol.status {
                    SolverStatus::Optimal => StepStatus::Optimal,
                    SolverStatus::Relaxed => StepStatus::Relaxed,
                    SolverStatus::MaxIter => StepStatus::MaxIter,
                };
                let u = sol.first_control();
                let info = (status, sol.iterations, sol.solve_time_s);
                plan = Some(sol.controls);
                (u, info.0, info.1, info.2)
            }
            Err(Error::Config { .. }) | Err(Error::Parse(_)) | Err(Error::Io(_)) => {
                return Err(solved.err().expect("error arm"))
            }
            Err(_) => {
                plan = None;
                (vec![mpc::apply_brake(&model); n], StepStatus::Brake, 0, 0.0)
            }
        };
        let u: Vec<ControlInput> = u
            .into_iter()
            .zip(&parked)
            .map(|(u, p)| if *p { ControlInput::zero() } else { u })
            .collect();

        buffer.open(k, &x);
        let next = x
            .iter()
            .zip(&u)
            .enumerate()
            .map(|(i, (xi, ui))| model.step_stochastic(xi, ui, scenario.noise_for(i), &mut rngs[i]))
            .collect::<Result<Vec<_>>>()?;
        buffer.advance(&u, &pairs, obstacles, &model, gamma)?;

        steps.push(StepRecord {
            k,
            states: std::mem::replace(&mut x, next),
            controls: u.clone(),
            h,
            b_hat,
            quantiles,
            alphas,
            events,
            min_rr,
            min_ro,
            pair_slack,
            status,
            iterations,
            solve_time_s,
        });
        prev_u = u;
    }

    Ok(TrajectoryLog {
        meta: RunMetadata {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            method: scenario.method.as_str().to_string(),
            config_hash: scenario.config_hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        pairs,
        ledgers: ledger_labels,
        ledger_of,
        goals,
        steps,
        final_states: x,
    })
}

fn ledger_layout(pairs: &[BarrierPair], granularity: Granularity) -> (Vec<String>, Vec<usize>) {
    match granularity {
        Granularity::PerKind => {
            let labels = vec![PairGroup::RobotRobot.label().to_string(), PairGroup::RobotObstacle.label().to_string()];
            let of = pairs
                .iter()
                .map(|p| match p.group() {
                    PairGroup::RobotRobot => 0,
                    PairGroup::RobotObstacle => 1,
                })
                .collect();
            (labels, of)
        }
        Granularity::PerPair => {
            let labels = pairs
                .iter()
                .map(|p| {
                    let (a, b) = p.ids();
                    format!("{a}-{b}")
                })
                .collect();
            (labels, (0..pairs.len()).collect())
        }
    }
}

fn min_clearances(
    pairs: &[BarrierPair],
    x: &[RobotState],
    obstacles: &[crate::cbf::ObstacleSpec],
) -> Result<(Option<f64>, Option<f64>)> {
    let mut rr: Option<f64> = None;
    let mut ro: Option<f64> = None;
    for p in pairs {
        let c = clearance(p, x, obstacles)?;
        let slot = match p.group() {
            PairGroup::RobotRobot => &mut rr,
            PairGroup::RobotObstacle => &mut ro,
        };
        *slot = Some(slot.map_or(c, |m| m.min(c)));
    }
    Ok((rr, ro))
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub method: String,
    /// Minimum `h` over all pairs and logged steps; absent without pairs.
    pub min_h: Option<f64>,
    pub collided: bool,
    pub min_clearance_rr: Option<f64>,
    pub min_clearance_ro: Option<f64>,
    /// Step by which every robot has come within the goal tolerance at least
    /// once.
    pub goal_reach_step: Option<usize>,
    /// Empirical coverage per lag (lags without events are omitted).
    pub coverage: BTreeMap<usize, f64>,
    pub mean_solve_time_s: f64,
    pub relaxed_steps: usize,
    pub brake_steps: usize,
    pub max_iter_steps: usize,
    pub total_slack: f64,
}

impl Metrics {
    pub fn from_log(log: &TrajectoryLog, goal_tolerance_m: f64) -> Self {
        let min_h = log.steps.iter().filter_map(|s| s.min_h()).reduce(f64::min);
        let fold = |f: fn(&StepRecord) -> Option<f64>| log.steps.iter().filter_map(f).reduce(f64::min);
        let horizon = log.steps.first().map(|s| s.quantiles.first().map_or(0, |q| q.len())).unwrap_or(0);
        let coverage = (1..=horizon)
            .filter_map(|tau| coverage_rate(log, tau).map(|c| (tau, c)))
            .collect();
        let count = |st: StepStatus| log.steps.iter().filter(|s| s.status == st).count();
        let solve: f64 = log.steps.iter().map(|s| s.solve_time_s).sum();
        Metrics {
            scenario: log.meta.scenario.clone(),
            seed: log.meta.seed,
            method: log.meta.method.clone(),
            min_h,
            collided: min_h.is_some_and(|h| h < 0.0),
            min_clearance_rr: fold(|s| s.min_rr),
            min_clearance_ro: fold(|s| s.min_ro),
            goal_reach_step: goal_reach_step(log, goal_tolerance_m),
            coverage,
            mean_solve_time_s: if log.steps.is_empty() { 0.0 } else { solve / log.steps.len() as f64 },
            relaxed_steps: count(StepStatus::Relaxed),
            brake_steps: count(StepStatus::Brake),
            max_iter_steps: count(StepStatus::MaxIter),
            total_slack: log.steps.iter().map(|s| s.slack()).sum(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// First step at which each robot is within `tol` of its goal, maximized
/// over robots. The state after the final control counts as step `len`.
pub fn goal_reach_step(log: &TrajectoryLog, tol: f64) -> Option<usize> {
    let n = log.goals.len();
    let mut worst = 0;
    for i in 0..n {
        let within = |x: &RobotState| (x.position - log.goals[i]).norm() <= tol;
        let first = log
            .steps
            .iter()
            .find(|s| within(&s.states[i]))
            .map(|s| s.k)
            .or_else(|| within(&log.final_states[i]).then_some(log.steps.len()))?;
        worst = worst.max(first);
    }
    Some(worst)
}

/// Fraction of unbreached coverage events at lag `tau`; `None` without events.
pub fn coverage_rate(log: &TrajectoryLog, tau: usize) -> Option<f64> {
    let (mut total, mut ok) = (0usize, 0usize);
    for e in log.events(tau) {
        total += 1;
        if !e.event.breached {
            ok += 1;
        }
    }
    (total > 0).then(|| ok as f64 / total as f64)
}

/// Per-step minimum clearance (distance minus combined radius) among robot
/// pairs and between robots and obstacles. A series is `None` when the
/// scenario has no pair of that kind.
pub fn min_distance_series(log: &TrajectoryLog) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let series = |f: fn(&StepRecord) -> Option<f64>| -> Option<Vec<f64>> {
        log.steps.iter().map(f).collect()
    };
    (series(|s| s.min_rr), series(|s| s.min_ro))
}

/// The three motion-noise settings used for distribution comparisons:
/// standard normal, uniform on [−1, 1] and an equal mixture of the two.
pub fn noise_suite() -> [(&'static str, NoiseSpec); 3] {
    [
        ("gaussian", NoiseSpec::gaussian(1.0)),
        ("uniform", NoiseSpec::uniform(-1.0, 1.0)),
        (
            "mixture",
            NoiseSpec::mixture(vec![NoiseSpec::gaussian(1.0), NoiseSpec::uniform(-1.0, 1.0)]),
        ),
    ]
}

/// Independent runs over `seeds`, in the given order.
pub fn batch_run(scenario: &Scenario, seeds: &[u64]) -> Result<Vec<Metrics>> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("seeds", "seeds must be distinct"));
    }
    seeds
        .par_iter()
        .map(|s| {
            let sc = scenario.clone().with_seed(*s);
            run(&sc).map(|log| Metrics::from_log(&log, sc.goal_tolerance_m))
        })
        .collect()
}

/// Re-simulates the logged controls through the stochastic model with the
/// logged seed, returning the visited joint states (including the final one).
pub fn replay(scenario: &Scenario, log: &TrajectoryLog) -> Result<Vec<Vec<RobotState>>> {
    let model = scenario.dynamics()?;
    let streams = RngStreams::new(log.meta.seed);
    let n = scenario.robots.len();
    let mut rngs: Vec<_> = (0..n).map(|i| streams.robot_noise(i)).collect();
    let mut x = scenario.initial_states();
    let mut out = vec![x.clone()];
    for s in &log.steps {
        x = x
            .iter()
            .zip(&s.controls)
            .enumerate()
            .map(|(i, (xi, ui))| model.step_stochastic(xi, ui, scenario.noise_for(i), &mut rngs[i]))
            .collect::<Result<Vec<_>>>()?;
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_robot() -> Scenario {
        Scenario::from_json(
            r#"{
            "name": "lone",
            "model": "single_integrator",
            "dt_s": 0.05,
            "robots": [{"start_m": [0, 0], "goal_m": [1, 0.5], "radius_m": 0.1}],
            "noise": {"kind": "gaussian", "sigma": [0, 0]},
            "mpc": {"horizon": 4},
            "gamma": 1.0,
            "steps": 60
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn lone_robot_reaches_goal_without_pairs() {
        let sc = lone_robot();
        let log = run(&sc).unwrap();
        let m = Metrics::from_log(&log, sc.goal_tolerance_m);
        assert!(m.goal_reach_step.is_some());
        assert_eq!(m.min_h, None);
        assert!(!m.collided);
        assert!(m.coverage.is_empty());
        assert_eq!(min_distance_series(&log), (None, None));
    }

    #[test]
    fn replay_matches_bitwise() {
        let mut sc = lone_robot();
        sc.noise = crate::dynamics::NoiseSpec::gaussian(0.3);
        sc.obstacles = vec![crate::cbf::ObstacleSpec::new(0.5, 0.3, 0.1)];
        let log = run(&sc).unwrap();
        let states = replay(&sc, &log).unwrap();
        for (s, x) in log.steps.iter().zip(&states) {
            assert_eq!(&s.states, x);
        }
        assert_eq!(states.last().unwrap(), &log.final_states);
    }

    #[test]
    fn coverage_rate_counts_unbreached() {
        let mut sc = lone_robot();
        sc.noise = crate::dynamics::NoiseSpec::gaussian(0.5);
        sc.obstacles = vec![crate::cbf::ObstacleSpec::new(2.0, 2.0, 0.1)];
        let mut log = run(&sc).unwrap();
        assert!(coverage_rate(&log, 1).is_some());
        for s in &mut log.steps {
            for e in &mut s.events {
                e.event.breached = true;
            }
        }
        assert_eq!(coverage_rate(&log, 1), Some(0.0));
        assert_eq!(coverage_rate(&log, 99), None);
    }

    #[test]
    fn csv_round_trip_is_idempotent() {
        let mut sc = lone_robot();
        sc.noise = crate::dynamics::NoiseSpec::gaussian(0.2);
        sc.obstacles = vec![crate::cbf::ObstacleSpec::new(0.5, 0.2, 0.1)];
        sc.steps = 15;
        let text = run(&sc).unwrap().to_csv_string();
        assert!(text.starts_with(&CSV_COLUMNS.join(",")));
        let rows = parse_csv(&text).unwrap();
        let mut again = Vec::new();
        write_rows(&rows, &mut again).unwrap();
        assert_eq!(String::from_utf8(again).unwrap(), text);
    }
}
