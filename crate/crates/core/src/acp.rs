//! Online adaptive conformal quantiles over time-lagged barrier scores.
//!
//! A score for lag τ compares the barrier value observed at step k with the
//! value predicted τ steps earlier. Each lag keeps its own sorted multiset of
//! scores and its own adaptive miscoverage level α^τ, updated after every
//! event as `α^τ ← clamp(α^τ + δ(α − e))`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cbf::{barrier_terms, BarrierPair, ObstacleSpec};
use crate::dynamics::{ControlInput, DynamicsModel, RobotState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcpConfig {
    /// Target miscoverage level α.
    pub alpha: f64,
    /// Learning rate δ.
    pub delta: f64,
    /// Quantile returned while a lag is warming up.
    pub e_init: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Pool every lag's scores into one multiset (levels stay per lag).
    pub shared_lags: bool,
}

impl Default for AcpConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            delta: 0.05,
            e_init: 1.0,
            alpha_min: 0.001,
            alpha_max: 0.999,
            shared_lags: false,
        }
    }
}

impl AcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("acp.alpha", "must lie in (0, 1)"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("acp.delta", "must be positive"));
        }
        if !(self.e_init >= 0.0) {
            return Err(Error::config("acp.e_init", "must be non-negative"));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < self.alpha_max && self.alpha_max < 1.0) {
            return Err(Error::config(
                "acp.alpha_min",
                "clamp bounds must satisfy 0 < alpha_min < alpha_max < 1",
            ));
        }
        Ok(())
    }

    /// Number of scores a lag needs before its quantile leaves `e_init`.
    pub fn warmup(&self) -> usize {
        (1.0 / self.alpha - 1e-9).ceil() as usize
    }
}

/// Per-lag score multisets and adaptive levels for lags `1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcpLedger {
    config: AcpConfig,
    scores: Vec<Vec<f64>>,
    levels: Vec<f64>,
}

impl AcpLedger {
    pub fn new(horizon: usize, config: AcpConfig) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        config.validate()?;
        let sets = if config.shared_lags { 1 } else { horizon };
        Ok(Self {
            config,
            scores: vec![Vec::new(); sets],
            levels: vec![config.alpha; horizon],
        })
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn config(&self) -> &AcpConfig {
        &self.config
    }

    fn check_lag(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.horizon() {
            return Err(Error::Contract(format!(
                "lag {tau} outside 1..={}",
                self.horizon()
            )));
        }
        Ok(())
    }

    fn set_index(&self, tau: usize) -> usize {
        if self.config.shared_lags {
            0
        } else {
            tau - 1
        }
    }

    /// Sorted scores backing lag `tau`.
    pub fn scores(&self, tau: usize) -> &[f64] {
        &self.scores[self.set_index(tau)]
    }

    pub fn level(&self, tau: usize) -> f64 {
        self.levels[tau - 1]
    }

    pub fn set_level(&mut self, tau: usize, level: f64) -> Result<()> {
        self.check_lag(tau)?;
        self.levels[tau - 1] = level.clamp(self.config.alpha_min, self.config.alpha_max);
        Ok(())
    }

    /// Inserts a score keeping the multiset sorted.
    pub fn record_score(&mut self, tau: usize, score: f64) -> Result<()> {
        self.check_lag(tau)?;
        if !(score >= 0.0) {
            return Err(Error::Contract(format!("score must be non-negative, got {score}")));
        }
        let idx = self.set_index(tau);
        let set = &mut self.scores[idx];
        let at = set.partition_point(|s| *s <= score);
        set.insert(at, score);
        Ok(())
    }

    /// The conformal quantile for lag `tau`: the rank-⌈(n+1)(1−α^τ)⌉ order
    /// statistic, the maximum when that rank exceeds n, and `e_init` while
    /// fewer than ⌈1/α⌉ scores exist.
    pub fn quantile(&self, tau: usize) -> f64 {
        let set = self.scores(tau);
        let n = set.len();
        if n == 0 || n < self.config.warmup() {
            return self.config.e_init;
        }
        let r = conformal_rank(n, self.level(tau));
        if r > n {
            set[n - 1]
        } else {
            set[r.max(1) - 1]
        }
    }

    /// `α^τ ← clamp(α^τ + δ(α − e))` with `e = 1` on a breach.
    pub fn update_alpha(&mut self, tau: usize, breached: bool) -> Result<f64> {
        self.check_lag(tau)?;
        let e = if breached { 1.0 } else { 0.0 };
        let cfg = self.config;
        let a = &mut self.levels[tau - 1];
        *a = (*a + cfg.delta * (cfg.alpha - e)).clamp(cfg.alpha_min, cfg.alpha_max);
        Ok(*a)
    }

    /// Scores a new observation against the current quantile, adapts α^τ and
    /// then records the score.
    pub fn observe(&mut self, k: usize, tau: usize, score: f64) -> Result<CoverageEvent> {
        self.check_lag(tau)?;
        let quantile = self.quantile(tau);
        let breached = score > quantile;
        let alpha = self.update_alpha(tau, breached)?;
        self.record_score(tau, score)?;
        Ok(CoverageEvent {
            k,
            tau,
            score,
            quantile,
            alpha,
            breached,
        })
    }
}

/// ⌈(n+1)(1−α)⌉. A small guard absorbs binary rounding of products such as
/// 20·0.95, which are integers in exact arithmetic.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - 1e-9).ceil().max(0.0) as usize
}

/// Outcome of checking one score against the quantile in force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageEvent {
    pub k: usize,
    pub tau: usize,
    pub score: f64,
    pub quantile: f64,
    /// Level after the update triggered by this event.
    pub alpha: f64,
    pub breached: bool,
}

/// `B̂ₖ`: the certificate evaluated at the observed state under the control
/// actually applied.
pub fn observed_barrier(
    robots: &[RobotState],
    applied: &[ControlInput],
    pair: &BarrierPair,
    obstacles: &[ObstacleSpec],
    model: &DynamicsModel,
    gamma: f64,
) -> Result<f64> {
    Ok(barrier_terms(pair, robots, obstacles, model, gamma)?.eval(applied))
}

/// An open prediction: the state observed at `origin`, rolled forward with
/// the controls applied since, plus the certificate values it implies at
/// its current target step.
#[derive(Debug, Clone, PartialEq)]
struct PredictionEntry {
    origin: usize,
    target: usize,
    state: Vec<RobotState>,
    /// Predicted certificate per pair (index-aligned with the pair list);
    /// `None` where the prediction is degenerate.
    predicted: Vec<Option<f64>>,
}

/// Ring buffer of the last `horizon` open predictions.
///
/// Each step the newest observed state opens an entry; applying a control
/// advances every entry one nominal step and records its predicted
/// certificate values, so the entry opened at `k − τ` holds `B^τ` for step k.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBuffer {
    horizon: usize,
    entries: VecDeque<PredictionEntry>,
    pending: Option<(usize, Vec<RobotState>)>,
}

impl PredictionBuffer {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            entries: VecDeque::with_capacity(horizon),
            pending: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers the state observed at step `k` as the origin of a new
    /// prediction.
    pub fn open(&mut self, k: usize, observed: &[RobotState]) {
        self.pending = Some((k, observed.to_vec()));
    }

    /// Advances every prediction by the control applied at the current step
    /// and evaluates the predicted certificates under that control.
    pub fn advance(
        &mut self,
        applied: &[ControlInput],
        pairs: &[BarrierPair],
        obstacles: &[ObstacleSpec],
        model: &DynamicsModel,
        gamma: f64,
    ) -> Result<()> {
        if let Some((k, state)) = self.pending.take() {
            self.entries.push_back(PredictionEntry {
                origin: k,
                target: k,
                state,
                predicted: Vec::new(),
            });
        }
        while self.entries.len() > self.horizon {
            self.entries.pop_front();
        }
        for entry in self.entries.iter_mut() {
            let next = entry
                .state
                .iter()
                .zip(applied)
                .map(|(x, u)| model.step_nominal(x, u))
                .collect::<Result<Vec<_>>>()?;
            entry.predicted = pairs
                .iter()
                .map(|p| {
                    barrier_terms(p, &next, obstacles, model, gamma)
                        .ok()
                        .map(|t| t.eval(applied))
                })
                .collect();
            entry.state = next;
            entry.target += 1;
        }
        Ok(())
    }

    /// `B^τ_{k−τ}` for `pair`, if a prediction made τ steps before `k` exists.
    pub fn lookup(&self, k: usize, tau: usize, pair: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.target == k && e.origin + tau == k)
            .and_then(|e| e.predicted.get(pair).copied().flatten())
    }
}

/// Time-lagged scores `|B̂ₖ − B^τ_{k−τ}|` for every lag with a buffered
/// prediction. `observed` is index-aligned with the pair list; lags still
/// warming up are skipped.
pub fn lagged_scores(buffer: &PredictionBuffer, observed: &[f64], k: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for tau in 1..=buffer.horizon.min(k) {
        for (p, b_hat) in observed.iter().enumerate() {
            if let Some(pred) = buffer.lookup(k, tau, p) {
                if b_hat.is_finite() {
                    out.push((tau, p, (b_hat - pred).abs()));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::all_pairs;
    use rand::Rng;

    fn ledger(h: usize, alpha: f64) -> AcpLedger {
        AcpLedger::new(
            h,
            AcpConfig {
                alpha,
                ..AcpConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn sorted_insert_and_duplicates() {
        let mut l = ledger(1, 0.5);
        l.record_score(1, 0.1).unwrap();
        l.record_score(1, 0.9).unwrap();
        l.record_score(1, 0.5).unwrap();
        assert_eq!(l.scores(1), &[0.1, 0.5, 0.9]);
        let mut d = ledger(1, 0.5);
        d.record_score(1, 0.1).unwrap();
        d.record_score(1, 0.1).unwrap();
        assert_eq!(d.scores(1), &[0.1, 0.1]);
    }

    #[test]
    fn record_rejects_bad_input() {
        let mut l = ledger(2, 0.1);
        assert!(l.record_score(1, -0.1).is_err());
        assert!(l.record_score(0, 0.1).is_err());
        assert!(l.record_score(3, 0.1).is_err());
        assert!(l.record_score(1, f64::NAN).is_err());
    }

    #[test]
    fn quantile_examples() {
        let mut l = ledger(1, 0.5);
        for s in 1..=10 {
            l.record_score(1, s as f64).unwrap();
        }
        l.set_level(1, 0.5).unwrap();
        assert_eq!(l.quantile(1), 6.0);

        let mut m = ledger(1, 0.5);
        for s in 1..=3 {
            m.record_score(1, s as f64).unwrap();
        }
        m.set_level(1, 0.05).unwrap();
        assert_eq!(m.quantile(1), 3.0);
    }

    #[test]
    fn quantile_warmup_returns_e_init() {
        let mut l = ledger(1, 0.05);
        assert_eq!(l.quantile(1), 1.0);
        for _ in 0..19 {
            l.record_score(1, 0.01).unwrap();
        }
        assert_eq!(l.quantile(1), 1.0);
        l.record_score(1, 0.01).unwrap();
        assert_eq!(l.quantile(1), 0.01);
    }

    #[test]
    fn quantile_of_uniform_scores() {
        let mut rng = crate::dynamics::RngStream::from_seed(1);
        let mut l = ledger(1, 0.1);
        for _ in 0..1000 {
            l.record_score(1, rng.rng().random::<f64>()).unwrap();
        }
        assert!((l.quantile(1) - 0.9).abs() <= 0.03);
    }

    #[test]
    fn update_alpha_examples() {
        let mut l = AcpLedger::new(
            1,
            AcpConfig {
                alpha: 0.05,
                delta: 0.01,
                ..AcpConfig::default()
            },
        )
        .unwrap();
        assert!((l.update_alpha(1, true).unwrap() - 0.0405).abs() < 1e-15);
        l.set_level(1, 0.05).unwrap();
        assert!((l.update_alpha(1, false).unwrap() - 0.0505).abs() < 1e-15);
        l.set_level(1, 0.0005).unwrap();
        assert_eq!(l.level(1), 0.001);
        assert_eq!(l.update_alpha(1, true).unwrap(), 0.001);
    }

    #[test]
    fn alpha_drift_telescopes() {
        // Over a window where breaches occur at rate α the net drift is zero.
        let cfg = AcpConfig {
            alpha: 0.25,
            delta: 0.01,
            ..AcpConfig::default()
        };
        let mut l = AcpLedger::new(1, cfg).unwrap();
        let start = l.level(1);
        let pattern = [true, false, false, false];
        for _ in 0..50 {
            for b in pattern {
                l.update_alpha(1, b).unwrap();
            }
        }
        assert!((l.level(1) - start).abs() < 1e-12);
    }

    #[test]
    fn shared_lags_pool_scores() {
        let mut l = AcpLedger::new(
            3,
            AcpConfig {
                shared_lags: true,
                alpha: 0.5,
                ..AcpConfig::default()
            },
        )
        .unwrap();
        l.record_score(1, 0.3).unwrap();
        l.record_score(3, 0.1).unwrap();
        assert_eq!(l.scores(2), &[0.1, 0.3]);
        l.update_alpha(2, true).unwrap();
        assert!(l.level(1) != l.level(2));
    }

    #[test]
    fn observe_uses_quantile_before_recording() {
        let mut l = ledger(1, 0.5);
        l.record_score(1, 1.0).unwrap();
        l.record_score(1, 2.0).unwrap();
        let q = l.quantile(1);
        let ev = l.observe(7, 1, 5.0).unwrap();
        assert_eq!(ev.quantile, q);
        assert!(ev.breached);
        assert_eq!(ev.k, 7);
        assert_eq!(l.scores(1).len(), 3);
    }

    #[test]
    fn invalid_configs() {
        assert!(AcpLedger::new(0, AcpConfig::default()).is_err());
        let bad = AcpConfig {
            alpha: 1.5,
            ..AcpConfig::default()
        };
        assert!(AcpLedger::new(2, bad).is_err());
        let bad_clamp = AcpConfig {
            alpha_min: 0.5,
            alpha_max: 0.4,
            ..AcpConfig::default()
        };
        assert!(bad_clamp.validate().is_err());
    }

    #[test]
    fn observed_barrier_example() {
        let model = DynamicsModel::single_integrator(0.05).unwrap();
        let robots = [
            RobotState::integrator(0.0, 0.1, 0.075),
            RobotState::integrator(1.0, 0.0, 0.075),
        ];
        let pair = BarrierPair::robot_robot(0, 1, 0.15).unwrap();
        let u = [ControlInput::new(1.0, 0.0), ControlInput::zero()];
        let b = observed_barrier(&robots, &u, &pair, &[], &model, 1.0).unwrap();
        assert!((b - (-1.0125)).abs() < 1e-12);
    }

    #[test]
    fn lagged_scores_absolute_difference() {
        let model = DynamicsModel::single_integrator(0.05).unwrap();
        let obstacles = [ObstacleSpec::new(1.0, 0.0, 0.2)];
        let start = [RobotState::integrator(0.0, 0.0, 0.0)];
        let pairs = all_pairs(&start, &obstacles).unwrap();
        let u = [ControlInput::new(1.0, 0.0)];
        let mut buf = PredictionBuffer::new(3);
        assert!(lagged_scores(&buf, &[0.0], 0).is_empty());
        buf.open(0, &start);
        buf.advance(&u, &pairs, &obstacles, &model, 1.0).unwrap();
        let pred = buf.lookup(1, 1, 0).unwrap();

        // Perfect observation scores zero.
        let nominal = [model.step_nominal(&start[0], &u[0]).unwrap()];
        let b = observed_barrier(&nominal, &u, &pairs[0], &obstacles, &model, 1.0).unwrap();
        assert_eq!(b, pred);
        assert_eq!(lagged_scores(&buf, &[b], 1), vec![(1, 0, 0.0)]);
        let scores = lagged_scores(&buf, &[pred + 0.2], 1);
        assert_eq!(scores.len(), 1);
        assert!((scores[0].2 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn buffer_keeps_horizon_entries() {
        let model = DynamicsModel::single_integrator(0.05).unwrap();
        let robots = [RobotState::integrator(0.0, 0.0, 0.1), RobotState::integrator(1.0, 0.0, 0.1)];
        let pairs = all_pairs(&robots, &[]).unwrap();
        let u = [ControlInput::new(0.1, 0.0), ControlInput::new(-0.1, 0.0)];
        let mut buf = PredictionBuffer::new(2);
        let mut state = robots.to_vec();
        for k in 0..5 {
            buf.open(k, &state);
            buf.advance(&u, &pairs, &[], &model, 1.0).unwrap();
            state = state
                .iter()
                .zip(&u)
                .map(|(x, u)| model.step_nominal(x, u).unwrap())
                .collect();
            assert!(buf.len() <= 2);
        }
        assert!(buf.lookup(5, 1, 0).is_some());
        assert!(buf.lookup(5, 2, 0).is_some());
        assert!(buf.lookup(5, 3, 0).is_none());
    }
}
