//! SVG line plots of sweep medians against N_new, one line per method.
//!
//! Every marker carries `data-method`, `data-n-new` and `data-value`
//! attributes holding the plotted median, so a plot can be checked against
//! the CSV it came from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{SweepMethod, SweepResult, SweepRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ETheta,
    SigmaF,
}

impl Metric {
    pub fn value(self, row: &SweepRow) -> f64 {
        match self {
            Metric::ETheta => row.e_theta,
            Metric::SigmaF => row.sigma_f,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Metric::ETheta => "e_theta.svg",
            Metric::SigmaF => "sigma_f.svg",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::ETheta => "E_theta [rad]",
            Metric::SigmaF => "sigma_f [N]",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub method: String,
    pub n_new: usize,
    pub value: f64,
}

fn color(method: SweepMethod) -> &'static str {
    match method {
        SweepMethod::Transplant => "#7f7f7f",
        SweepMethod::I => "#1f77b4",
        SweepMethod::II => "#ff7f0e",
        SweepMethod::III => "#2ca02c",
        SweepMethod::NoCopy => "#d62728",
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

pub fn render(result: &SweepResult, metric: Metric) -> String {
    let ns = result.n_new_values();
    let series: Vec<(SweepMethod, Vec<(usize, f64)>)> = result
        .methods()
        .into_iter()
        .map(|m| {
            let pts = ns
                .iter()
                .filter_map(|&n| result.median(m, n, |r| metric.value(r)).map(|v| (n, v)))
                .collect();
            (m, pts)
        })
        .collect();
    let x_max = ns.iter().copied().max().unwrap_or(1).max(1) as f64;
    let y_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let px = |n: f64| LEFT + n / x_max * (W - LEFT - RIGHT);
    let py = |v: f64| H - BOTTOM - v / y_max * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    for &n in &ns {
        let x = px(n as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{n}</text>"#,
            y0 + 16.0
        );
    }
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">N_new</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" font-size="12">{}</text>"#, TOP - 10.0, metric.label());
    for (k, (method, pts)) in series.iter().enumerate() {
        let c = color(*method);
        let path: Vec<String> = pts.iter().map(|&(n, v)| format!("{:.2},{:.2}", px(n as f64), py(v))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        for &(n, v) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}" data-method="{}" data-n-new="{n}" data-value="{v:e}"/>"#,
                px(n as f64),
                py(v),
                method.name()
            );
        }
        let ly = TOP + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{c}">{}</text>"#,
            W - RIGHT + 14.0,
            method.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_plots(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for metric in [Metric::ETheta, Metric::SigmaF] {
        let path = dir.join(metric.file_name());
        std::fs::write(&path, render(result, metric)).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

/// Data markers of a rendered plot.
pub fn parse_points(svg: &str) -> Result<Vec<PlotPoint>> {
    let mut out = Vec::new();
    for (i, line) in svg.lines().enumerate() {
        if !line.contains("data-value") {
            continue;
        }
        let bad = || Error::parse(i + 1, "malformed plot marker");
        out.push(PlotPoint {
            method: attr(line, "data-method").ok_or_else(bad)?.to_string(),
            n_new: attr(line, "data-n-new").and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            value: attr(line, "data-value").and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(out)
}
