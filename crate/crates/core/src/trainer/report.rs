use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AblationReport, RunReport};
use crate::error::{Error, Result};

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn phases_csv(report: &RunReport) -> String {
    let mut s = String::from("phase,acc,auc,samples\n");
    for p in &report.phases {
        writeln!(s, "{},{},{},{}", p.phase.name(), p.acc, p.auc, p.samples).unwrap();
    }
    s
}

pub fn eu_trace_csv(report: &RunReport) -> String {
    let mut s = String::from("iteration,value\n");
    for p in &report.eu_trace.points {
        writeln!(s, "{},{}", p.iteration, p.value).unwrap();
    }
    s
}

/// Writes `report.json`, `phases.csv`, `eu_trace.csv`, `phases.svg` and
/// `eu_trace.svg` into `out_dir`; returns the paths written.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let phase_labels: Vec<String> = report.phases.iter().map(|p| p.phase.name().to_string()).collect();
    let idx = |i: usize| i as f64;
    let phases_svg = svg_line_chart(
        &format!("{} ({:?})", report.config.variant, report.config.backbone),
        "phase",
        "percent",
        Some(&phase_labels),
        &[
            Series::new("AUC", report.phases.iter().enumerate().map(|(i, p)| (idx(i), p.auc)).collect()),
            Series::new("ACC", report.phases.iter().enumerate().map(|(i, p)| (idx(i), p.acc)).collect()),
        ],
    );
    let eu_svg = svg_line_chart(
        &format!("epistemic uncertainty, {}", report.config.variant),
        "iteration",
        "EU",
        None,
        &[trace_series(report)],
    );
    Ok(vec![
        write(out_dir.join("report.json"), &serde_json::to_string_pretty(report)?)?,
        write(out_dir.join("phases.csv"), &phases_csv(report))?,
        write(out_dir.join("eu_trace.csv"), &eu_trace_csv(report))?,
        write(out_dir.join("phases.svg"), &phases_svg)?,
        write(out_dir.join("eu_trace.svg"), &eu_svg)?,
    ])
}

fn trace_series(report: &RunReport) -> Series {
    Series::new(
        report.config.variant.name(),
        report.eu_trace.points.iter().map(|p| (p.iteration as f64, p.value)).collect(),
    )
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One subdirectory per variant plus `ablation.json`, `ablation.csv` and an
/// overlay of all uncertainty traces in `eu_traces.svg`.
pub fn emit_ablation(report: &AblationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for run in &report.runs {
        written.extend(emit_report(run, &out_dir.join(run.config.variant.name()))?);
    }
    let mut csv = String::from("variant,phase,acc,auc\n");
    for run in &report.runs {
        for p in &run.phases {
            writeln!(csv, "{},{},{},{}", run.config.variant, p.phase.name(), p.acc, p.auc).unwrap();
        }
    }
    let series: Vec<Series> = report
        .runs
        .iter()
        .filter(|r| !r.eu_trace.points.is_empty())
        .map(trace_series)
        .collect();
    written.push(write(out_dir.join("ablation.json"), &serde_json::to_string_pretty(report)?)?);
    written.push(write(out_dir.join("ablation.csv"), &csv)?);
    written.push(write(
        out_dir.join("eu_traces.svg"),
        &svg_line_chart("epistemic uncertainty per iteration", "iteration", "EU", None, &series),
    )?);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal static line chart. `x_labels` replaces numeric x ticks with one
/// label per integer position.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, x_labels: Option<&[String]>, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 150.0, 36.0, 48.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, left - 6.0, sy(y) + 4.0, y).unwrap();
        writeln!(s, r##"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left + pw, sy(y), sy(y)).unwrap();
    }
    match x_labels {
        Some(labels) => {
            for (i, l) in labels.iter().enumerate() {
                writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(i as f64), top + ph + 18.0, escape(l)).unwrap();
            }
        }
        None => {
            for i in 0..=4 {
                let x = x0 + (x1 - x0) * i as f64 / 4.0;
                writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.0}</text>"#, sx(x), top + ph + 18.0, x).unwrap();
            }
        }
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 8.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        if ser.points.len() <= 12 {
            for p in &path {
                let (cx, cy) = p.split_once(',').unwrap();
                writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#).unwrap();
            }
        }
        let ly = top + 16.0 + 18.0 * k as f64;
        writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 12.0, w - right + 32.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 38.0, ly + 4.0, escape(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
