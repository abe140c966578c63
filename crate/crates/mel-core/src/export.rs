//! Exports derived from run artifacts: metrics CSV, reward curves as SVG,
//! and a pool summary table.
//!
//! Every writer is deterministic — floats go through Rust's shortest
//! round-trip `Display` and rows keep a fixed order — so exporting the
//! same run twice produces byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::metaexp::{ErrorKind, MeStatus, MetaExperiencePool};
use crate::trainer::EventRecord;

/// Parse `events.jsonl`, reporting the offending line on failure.
pub fn read_events(run_dir: &Path) -> Result<Vec<EventRecord>> {
    let path = run_dir.join("events.jsonl");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| MelError::Data(format!("{}: {e}", path.display())))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(line).map_err(|e| {
            MelError::Data(format!("{}:{}: bad event record: {e}", path.display(), i + 1))
        })?;
        events.push(record);
    }
    Ok(events)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render the event log as CSV text.
pub fn metrics_csv(events: &[EventRecord]) -> String {
    let mut out = String::from(
        "step,mean_reward,degenerate_fraction,pairs_built,candidates,validated,rejected,\
         retention_ratio,nll_loss,meta_return,grad_norm_grpo,grad_norm_mel,grad_norm_joint,\
         clipped_tokens,wall_clock_ms\n",
    );
    for e in events {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.step,
            e.mean_reward,
            e.degenerate_fraction,
            e.pairs_built,
            e.candidates,
            e.validated,
            e.rejected,
            e.retention_ratio,
            opt_cell(e.nll_loss),
            opt_cell(e.meta_return),
            e.grad_norm_grpo,
            e.grad_norm_mel,
            e.grad_norm_joint,
            e.clipped_tokens,
            e.wall_clock_ms,
        );
    }
    out
}

/// Write `metrics.csv` next to the event log it was derived from.
pub fn write_metrics_csv(run_dir: &Path) -> Result<PathBuf> {
    let events = read_events(run_dir)?;
    let path = run_dir.join("metrics.csv");
    std::fs::write(&path, metrics_csv(&events))?;
    Ok(path)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 40.0;

fn polyline(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render mean reward and retention ratio against the step axis.
pub fn curves_svg(events: &[EventRecord]) -> Result<String> {
    if events.is_empty() {
        return Err(MelError::Data("no events to plot".into()));
    }
    let max_step = events.iter().map(|e| e.step).max().unwrap_or(1).max(1) as f64;
    let x = |step: u64| MARGIN + (SVG_W - 2.0 * MARGIN) * (step as f64 / max_step);
    // Both series live in [0, 1].
    let y = |v: f64| SVG_H - MARGIN - (SVG_H - 2.0 * MARGIN) * v.clamp(0.0, 1.0);
    let reward: Vec<(f64, f64)> = events.iter().map(|e| (x(e.step), y(e.mean_reward))).collect();
    let retention: Vec<(f64, f64)> =
        events.iter().map(|e| (x(e.step), y(e.retention_ratio))).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    );
    let _ = writeln!(svg, "  <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        t = MARGIN,
        b = SVG_H - MARGIN
    );
    let _ = writeln!(
        svg,
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>",
        polyline(&reward)
    );
    let _ = writeln!(
        svg,
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>",
        polyline(&retention)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"20\" fill=\"#1f77b4\" font-size=\"12\">mean reward</text>",
        MARGIN
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"20\" fill=\"#d62728\" font-size=\"12\">retention ratio</text>",
        MARGIN + 110.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\">step</text>",
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write `curves.svg` into the run directory.
pub fn write_curves_svg(run_dir: &Path) -> Result<PathBuf> {
    let events = read_events(run_dir)?;
    let path = run_dir.join("curves.svg");
    std::fs::write(&path, curves_svg(&events)?)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub candidate: usize,
    pub validated: usize,
    pub rejected: usize,
}

impl StatusCounts {
    fn bump(&mut self, status: MeStatus) {
        match status {
            MeStatus::Candidate => self.candidate += 1,
            MeStatus::Validated => self.validated += 1,
            MeStatus::Rejected => self.rejected += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.candidate + self.validated + self.rejected
    }
}

/// Error-kind by status breakdown of a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub by_kind: BTreeMap<String, StatusCounts>,
    pub totals: StatusCounts,
    pub retention_ratio: f64,
}

pub fn pool_summary(pool: &MetaExperiencePool) -> PoolSummary {
    let mut by_kind: BTreeMap<String, StatusCounts> = BTreeMap::new();
    // Keep every kind visible even at zero.
    for kind in [
        ErrorKind::WrongOperation,
        ErrorKind::ArithmeticSlip,
        ErrorKind::WrongModulus,
        ErrorKind::FormatViolation,
    ] {
        by_kind.entry(kind.token().to_string()).or_default();
    }
    let mut totals = StatusCounts::default();
    for me in &pool.entries {
        by_kind.entry(me.heuristic.kind.token().to_string()).or_default().bump(me.status);
        totals.bump(me.status);
    }
    PoolSummary { by_kind, totals, retention_ratio: pool.retention_ratio() }
}

impl PoolSummary {
    /// Fixed-width text table for terminal display.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>9} {:>9} {:>9} {:>9}",
            "error kind", "candidate", "validated", "rejected", "total"
        );
        for (kind, c) in &self.by_kind {
            let _ = writeln!(
                out,
                "{:<18} {:>9} {:>9} {:>9} {:>9}",
                kind,
                c.candidate,
                c.validated,
                c.rejected,
                c.total()
            );
        }
        let _ = writeln!(
            out,
            "{:<18} {:>9} {:>9} {:>9} {:>9}",
            "all",
            self.totals.candidate,
            self.totals.validated,
            self.totals.rejected,
            self.totals.total()
        );
        let _ = writeln!(out, "retention ratio: {}", self.retention_ratio);
        out
    }
}
