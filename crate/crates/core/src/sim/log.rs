use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::acp::CoverageEvent;
use crate::cbf::BarrierPair;
use crate::dynamics::{ControlInput, RobotState, Vec2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Optimal,
    MaxIter,
    Relaxed,
    /// The solver failed hard and every robot was braked.
    Brake,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIter => "max_iter",
            StepStatus::Relaxed => "relaxed",
            StepStatus::Brake => "brake",
        }
    }
}

/// A coverage event together with the ledger and pair that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedEvent {
    pub ledger: usize,
    pub pair: usize,
    pub b_hat: f64,
    pub event: CoverageEvent,
}

/// Everything observed and decided at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// Observed joint state.
    pub states: Vec<RobotState>,
    /// Controls applied after observing `states`.
    pub controls: Vec<ControlInput>,
    /// `h` per pair at `states`.
    pub h: Vec<f64>,
    /// `B̂ₖ` per pair under the previous control; absent at k = 0.
    pub b_hat: Vec<Option<f64>>,
    /// Quantiles in force for this step's MPC, `[ledger][tau − 1]`.
    pub quantiles: Vec<Vec<f64>>,
    /// Levels after this step's updates, `[ledger][tau − 1]`.
    pub alphas: Vec<Vec<f64>>,
    pub events: Vec<LoggedEvent>,
    pub min_rr: Option<f64>,
    pub min_ro: Option<f64>,
    /// Slack summed over each pair's horizon constraints.
    pub pair_slack: Vec<f64>,
    pub status: StepStatus,
    pub iterations: usize,
    pub solve_time_s: f64,
}

impl StepRecord {
    pub fn slack(&self) -> f64 {
        self.pair_slack.iter().sum()
    }

    pub fn min_h(&self) -> Option<f64> {
        self.h.iter().copied().reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub scenario: String,
    pub seed: u64,
    pub method: String,
    pub config_hash: String,
    pub version: String,
}

/// The record of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub meta: RunMetadata,
    pub pairs: Vec<BarrierPair>,
    /// Ledger labels: `rr`/`ro`, or the pair ids when ledgers are per pair.
    pub ledgers: Vec<String>,
    /// Ledger index used by each pair.
    pub ledger_of: Vec<usize>,
    pub goals: Vec<Vec2>,
    pub steps: Vec<StepRecord>,
    /// State reached after the last applied control.
    pub final_states: Vec<RobotState>,
}

/// One row of `trajectory.csv`.
///
/// Row types:
/// - `step`: `h` is the minimum over pairs, plus `min_rr`, `min_ro`, total
///   `slack` and solver `status`.
/// - `pair`: `id_a`/`id_b`, `h`, `b_hat`, the lag-1 `quantile` applied to the
///   pair and the pair's `slack`.
/// - `lag`: `id_a` is the ledger, with the lag's `quantile` used this step and
///   its `alpha` after this step's update.
/// - `coverage`: one per ledger and lag once scores exist; `h` holds the
///   score, `quantile` the value it was judged against, `alpha` the updated
///   level and `id_a`/`id_b` the scored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub k: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub id_a: String,
    pub id_b: String,
    pub tau: Option<usize>,
    pub h: Option<f64>,
    pub b_hat: Option<f64>,
    pub quantile: Option<f64>,
    pub alpha: Option<f64>,
    pub breached: Option<bool>,
    pub min_rr: Option<f64>,
    pub min_ro: Option<f64>,
    pub slack: Option<f64>,
    pub status: String,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "k", "type", "id_a", "id_b", "tau", "h", "b_hat", "quantile", "alpha", "breached", "min_rr",
    "min_ro", "slack", "status",
];

fn row(k: usize, kind: &str) -> CsvRow {
    CsvRow {
        k,
        kind: kind.to_string(),
        id_a: String::new(),
        id_b: String::new(),
        tau: None,
        h: None,
        b_hat: None,
        quantile: None,
        alpha: None,
        breached: None,
        min_rr: None,
        min_ro: None,
        slack: None,
        status: String::new(),
    }
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rows(&self) -> Vec<CsvRow> {
        let mut out = Vec::new();
        for s in &self.steps {
            let mut st = row(s.k, "step");
            st.h = s.min_h();
            st.min_rr = s.min_rr;
            st.min_ro = s.min_ro;
            st.slack = Some(s.slack());
            st.status = s.status.as_str().to_string();
            out.push(st);
            for (p, pair) in self.pairs.iter().enumerate() {
                let (a, b) = pair.ids();
                let mut r = row(s.k, "pair");
                r.id_a = a;
                r.id_b = b;
                r.h = Some(s.h[p]);
                r.b_hat = s.b_hat[p];
                r.quantile = s.quantiles[self.ledger_of[p]].first().copied();
                r.slack = Some(s.pair_slack[p]);
                out.push(r);
            }
            for (l, label) in self.ledgers.iter().enumerate() {
                for (t, q) in s.quantiles[l].iter().enumerate() {
                    let mut r = row(s.k, "lag");
                    r.id_a = label.clone();
                    r.tau = Some(t + 1);
                    r.quantile = Some(*q);
                    r.alpha = Some(s.alphas[l][t]);
                    out.push(r);
                }
            }
            for e in &s.events {
                let (a, b) = self.pairs[e.pair].ids();
                let mut r = row(s.k, "coverage");
                r.id_a = a;
                r.id_b = b;
                r.tau = Some(e.event.tau);
                r.h = Some(e.event.score);
                r.b_hat = Some(e.b_hat);
                r.quantile = Some(e.event.quantile);
                r.alpha = Some(e.event.alpha);
                r.breached = Some(e.event.breached);
                out.push(r);
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.rows(), w)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Per-step robot states and applied controls:
    /// `k,robot,x_m,y_m,heading_rad,u0,u1`.
    pub fn states_csv(&self) -> String {
        let mut s = String::from("k,robot,x_m,y_m,heading_rad,u0,u1\n");
        for st in &self.steps {
            for (i, (x, u)) in st.states.iter().zip(&st.controls).enumerate() {
                let heading = x.heading.map(|h| h.to_string()).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    st.k, i, x.position.x, x.position.y, heading, u.0.x, u.0.y
                ));
            }
        }
        s
    }

    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata serializes")
    }

    /// Every coverage event at lag `tau`.
    pub fn events(&self, tau: usize) -> impl Iterator<Item = &LoggedEvent> {
        self.steps
            .iter()
            .flat_map(|s| s.events.iter())
            .filter(move |e| e.event.tau == tau)
    }
}

pub fn write_rows<W: Write>(rows: &[CsvRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Parses `trajectory.csv`, checking the header against the schema.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::Parse(format!("unexpected csv header: {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
