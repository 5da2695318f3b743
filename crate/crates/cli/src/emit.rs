//! Result emission: per-step CSV, run-summary JSON, and static SVG plots
//! (trajectory overlay and cost curve with its moving average).

use crate::config::ExperimentConfig;
use coverage_core::RunLog;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("run log is empty")]
    EmptyLog,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed CSV column order:
/// `t, px_0, py_0, .., px_{M-1}, py_{M-1}, v_0, .., v_{M-1},
///  coverage_cost, min_distance, swapped, planned`.
pub fn write_csv(log: &RunLog, path: &Path) -> Result<(), EmitError> {
    if log.steps.is_empty() {
        return Err(EmitError::EmptyLog);
    }
    let m = log.steps[0].positions.len();
    let mut out = String::from("t");
    for i in 0..m {
        write!(out, ",px_{i},py_{i}").unwrap();
    }
    for i in 0..m {
        write!(out, ",v_{i}").unwrap();
    }
    out.push_str(",coverage_cost,min_distance,swapped,planned\n");
    for rec in &log.steps {
        write!(out, "{}", rec.t).unwrap();
        for p in &rec.positions {
            write!(out, ",{},{}", p.x, p.y).unwrap();
        }
        for v in &rec.tracker_values {
            write!(out, ",{v}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{}",
            rec.coverage_cost,
            if rec.min_distance.is_finite() {
                rec.min_distance.to_string()
            } else {
                "inf".to_string()
            },
            rec.swapped as u8,
            rec.planned as u8
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    steps: usize,
    planner_rounds: usize,
    swap_count: usize,
    messages: usize,
    first_cost: f64,
    final_cost: f64,
    min_distance_overall: f64,
    containment_violations: usize,
    max_post_update_value: f64,
    final_positions: Vec<[f64; 2]>,
    iteration_costs: &'a [f64],
}

pub fn write_summary(
    config: &ExperimentConfig,
    log: &RunLog,
    path: &Path,
) -> Result<(), EmitError> {
    if log.steps.is_empty() {
        return Err(EmitError::EmptyLog);
    }
    let summary = Summary {
        config,
        steps: log.steps.len(),
        planner_rounds: log.planner_rounds,
        swap_count: log.swap_times.len(),
        messages: log.messages.len(),
        first_cost: log.steps.first().unwrap().coverage_cost,
        final_cost: log.steps.last().unwrap().coverage_cost,
        min_distance_overall: log
            .steps
            .iter()
            .map(|r| r.min_distance)
            .fold(f64::INFINITY, f64::min),
        containment_violations: log.steps.iter().filter(|r| !r.containment_ok).count(),
        max_post_update_value: log
            .post_update_values
            .iter()
            .copied()
            .fold(0.0, f64::max),
        final_positions: log.final_positions.iter().map(|p| [p.x, p.y]).collect(),
        iteration_costs: &log.iteration_costs,
    };
    std::fs::write(path, serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(())
}

/// Trailing-window mean: `out[i] = mean(series[i .. i + window])`, so the
/// output has `len - window + 1` entries.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || window > series.len() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut sum: f64 = series[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..series.len() {
        sum += series[i] - series[i - window];
        out.push(sum / window as f64);
    }
    out
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Render the trajectory overlay and the cost curve. `window` is the
/// moving-average window (the plan horizon). Returns the written paths.
pub fn emit_plots(
    log: &RunLog,
    dir: &Path,
    arena: [f64; 4],
    window: usize,
) -> Result<Vec<PathBuf>, EmitError> {
    if log.steps.is_empty() {
        return Err(EmitError::EmptyLog);
    }
    std::fs::create_dir_all(dir)?;
    let traj = dir.join("trajectories.svg");
    std::fs::write(&traj, trajectories_svg(log, arena))?;
    let cost = dir.join("cost.svg");
    std::fs::write(&cost, cost_svg(log, window))?;
    Ok(vec![traj, cost])
}

fn trajectories_svg(log: &RunLog, arena: [f64; 4]) -> String {
    let size = 600.0;
    let pad = 30.0;
    let [x0, x1, y0, y1] = arena;
    let sx = (size - 2.0 * pad) / (x1 - x0);
    let sy = (size - 2.0 * pad) / (y1 - y0);
    let map = |px: f64, py: f64| -> (f64, f64) {
        (pad + (px - x0) * sx, size - pad - (py - y0) * sy)
    };
    let m = log.steps[0].positions.len();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    );
    let (ax, ay) = map(x0, y1);
    write!(
        svg,
        "<rect x=\"{ax}\" y=\"{ay}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        (x1 - x0) * sx,
        (y1 - y0) * sy
    )
    .unwrap();
    for i in 0..m {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for rec in &log.steps {
            let (x, y) = map(rec.positions[i].x, rec.positions[i].y);
            write!(pts, "{x:.2},{y:.2} ").unwrap();
        }
        write!(
            svg,
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        )
        .unwrap();
        let (sx0, sy0) = map(log.steps[0].positions[i].x, log.steps[0].positions[i].y);
        let (ex, ey) = map(
            log.steps.last().unwrap().positions[i].x,
            log.steps.last().unwrap().positions[i].y,
        );
        write!(
            svg,
            "<circle cx=\"{sx0:.2}\" cy=\"{sy0:.2}\" r=\"4\" fill=\"none\" stroke=\"{color}\"/>\n\
             <circle cx=\"{ex:.2}\" cy=\"{ey:.2}\" r=\"4\" fill=\"{color}\"/>\n"
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn cost_svg(log: &RunLog, window: usize) -> String {
    let w = 800.0;
    let h = 400.0;
    let pad = 45.0;
    let costs: Vec<f64> = log.steps.iter().map(|r| r.coverage_cost).collect();
    let ma = moving_average(&costs, window.min(costs.len()).max(1));
    let y_max = costs.iter().copied().fold(f64::MIN, f64::max).max(1e-12);
    let y_min = 0.0f64.min(costs.iter().copied().fold(f64::MAX, f64::min));
    let n = costs.len().max(2) as f64;
    let map = |t: f64, v: f64| -> (f64, f64) {
        (
            pad + t / (n - 1.0) * (w - 2.0 * pad),
            h - pad - (v - y_min) / (y_max - y_min) * (h - 2.0 * pad),
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    write!(
        svg,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    )
    .unwrap();
    let mut pts = String::new();
    for (t, v) in costs.iter().enumerate() {
        let (x, y) = map(t as f64, *v);
        write!(pts, "{x:.2},{y:.2} ").unwrap();
    }
    write!(
        svg,
        "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#999999\" stroke-width=\"1\"/>\n"
    )
    .unwrap();
    if !ma.is_empty() {
        let off = costs.len() - ma.len();
        let mut pts = String::new();
        for (i, v) in ma.iter().enumerate() {
            let (x, y) = map((i + off) as f64, *v);
            write!(pts, "{x:.2},{y:.2} ").unwrap();
        }
        write!(
            svg,
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n"
        )
        .unwrap();
    }
    write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\">step</text>\n\
         <text x=\"8\" y=\"{pad}\" font-size=\"13\">coverage cost (gray: instantaneous, red: moving average)</text>\n",
        w / 2.0,
        h - 12.0
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}
