//! Minimal SVG output: polylines, circles and a reference line.

use std::fmt::Write;

use acpsbc::cbf::ObstacleSpec;
use acpsbc::sim::{min_distance_series, TrajectoryLog};

const W: f64 = 640.0;
const H: f64 = 640.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    equal: bool,
}

impl Frame {
    fn new(mut x0: f64, mut x1: f64, mut y0: f64, mut y1: f64, equal: bool) -> Self {
        if !(x1 > x0) {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if !(y1 > y0) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        if equal {
            let span = (x1 - x0).max(y1 - y0);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - span / 2.0;
            x1 = cx + span / 2.0;
            y0 = cy - span / 2.0;
            y1 = cy + span / 2.0;
        }
        Frame { x0, x1, y0, y1, equal }
    }

    fn sx(&self) -> f64 {
        (W - 2.0 * PAD) / (self.x1 - self.x0)
    }

    fn sy(&self) -> f64 {
        (H - 2.0 * PAD) / (self.y1 - self.y0)
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (PAD + (x - self.x0) * self.sx(), H - PAD - (y - self.y0) * self.sy())
    }

    fn len(&self, r: f64) -> f64 {
        debug_assert!(self.equal);
        r * self.sx()
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn polyline(out: &mut String, f: &Frame, pts: impl IntoIterator<Item = (f64, f64)>, color: &str, extra: &str) {
    let mut d = String::new();
    for (x, y) in pts {
        let (px, py) = f.map(x, y);
        let _ = write!(d, "{px:.2},{py:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5" {extra}/>"#,
        d.trim_end()
    );
}

fn text(out: &mut String, x: f64, y: f64, s: &str, color: &str) {
    let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="12" fill="{color}">{s}</text>"#);
}

fn workspace(logs: &[&TrajectoryLog], obstacles: &[ObstacleSpec]) -> Frame {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut grow = |x: f64, y: f64, r: f64| {
        x0 = x0.min(x - r);
        x1 = x1.max(x + r);
        y0 = y0.min(y - r);
        y1 = y1.max(y + r);
    };
    for log in logs {
        for s in &log.steps {
            for x in &s.states {
                grow(x.position.x, x.position.y, x.radius);
            }
        }
        for x in &log.final_states {
            grow(x.position.x, x.position.y, x.radius);
        }
        for g in &log.goals {
            grow(g.x, g.y, 0.0);
        }
    }
    for o in obstacles {
        grow(o.center.x, o.center.y, o.radius);
    }
    Frame::new(x0, x1, y0, y1, true)
}

fn obstacles_svg(out: &mut String, f: &Frame, obstacles: &[ObstacleSpec]) {
    for o in obstacles {
        let (cx, cy) = f.map(o.center.x, o.center.y);
        let _ = writeln!(
            out,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="#999" fill-opacity="0.5" stroke="#333"/>"##,
            f.len(o.radius)
        );
    }
}

fn robot_path(log: &TrajectoryLog, i: usize) -> Vec<(f64, f64)> {
    log.steps
        .iter()
        .map(|s| &s.states[i])
        .chain(log.final_states.get(i))
        .map(|x| (x.position.x, x.position.y))
        .collect()
}

/// Robot paths with start discs, goal markers and obstacle circles.
pub fn trajectory_svg(log: &TrajectoryLog, obstacles: &[ObstacleSpec]) -> String {
    let f = workspace(&[log], obstacles);
    let mut out = String::new();
    header(&mut out);
    obstacles_svg(&mut out, &f, obstacles);
    let n = log.goals.len();
    for i in 0..n {
        let color = PALETTE[i % PALETTE.len()];
        let path = robot_path(log, i);
        polyline(&mut out, &f, path.iter().copied(), color, "");
        if let Some(first) = log.steps.first().map(|s| &s.states[i]) {
            let (cx, cy) = f.map(first.position.x, first.position.y);
            let r = f.len(first.radius).max(2.0);
            let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="{color}"/>"#);
        }
        let (gx, gy) = f.map(log.goals[i].x, log.goals[i].y);
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}"/>"#,
            gx - 3.0,
            gy - 3.0
        );
    }
    text(&mut out, PAD, PAD / 2.0, &format!("{} ({})", log.meta.scenario, log.meta.method), "#000");
    out.push_str("</svg>\n");
    out
}

/// Paths from several runs of the same scenario, one color per run.
pub fn overlay_svg(runs: &[(String, TrajectoryLog)], obstacles: &[ObstacleSpec]) -> String {
    let logs: Vec<&TrajectoryLog> = runs.iter().map(|(_, l)| l).collect();
    let f = workspace(&logs, obstacles);
    let mut out = String::new();
    header(&mut out);
    obstacles_svg(&mut out, &f, obstacles);
    for (k, (label, log)) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for i in 0..log.goals.len() {
            polyline(&mut out, &f, robot_path(log, i), color, "");
        }
        text(&mut out, PAD, PAD / 2.0 + 14.0 * k as f64, label, color);
    }
    out.push_str("</svg>\n");
    out
}

/// Per-step minimum clearance with a dashed zero line; negative values mean
/// contact.
pub fn min_distance_svg(log: &TrajectoryLog) -> String {
    let (rr, ro) = min_distance_series(log);
    let series: Vec<(&str, Vec<f64>)> = [("robot-robot", rr), ("robot-obstacle", ro)]
        .into_iter()
        .filter_map(|(l, s)| s.map(|s| (l, s)))
        .collect();
    let len = log.steps.len().max(2) as f64 - 1.0;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (_, s) in &series {
        for v in s {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let f = Frame::new(0.0, len, lo, hi.max(lo + 1e-3), false);
    let mut out = String::new();
    header(&mut out);
    let (ax, ay) = f.map(0.0, 0.0);
    let (bx, _) = f.map(len, 0.0);
    let _ = writeln!(
        out,
        r##"<line x1="{ax:.2}" y1="{ay:.2}" x2="{bx:.2}" y2="{ay:.2}" stroke="#000" stroke-dasharray="6,4"/>"##
    );
    for (k, (label, s)) in series.iter().enumerate() {
        let color = PALETTE[k];
        polyline(&mut out, &f, s.iter().enumerate().map(|(i, v)| (i as f64, *v)), color, "");
        text(&mut out, PAD, PAD / 2.0 + 14.0 * k as f64, label, color);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">step</text>"#, W - PAD - 30.0, H - 10.0);
    out.push_str("</svg>\n");
    out
}
