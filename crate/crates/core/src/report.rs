//! JSON reports and SVG plots for run directories.
//!
//! A training run directory holds `config.json`, `checkpoint.bin`,
//! `metrics.jsonl` (one iteration log per line), `evals.json` and
//! `summary.json`. An ablation directory holds `ablation.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ablate::AblationReport;
use crate::error::{Error, Result};
use crate::train::IterationLog;

pub const PALETTE: &[&str] = &["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// A named polyline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 || !v.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if v <= m * mag {
            return m * mag;
        }
    }
    10.0 * mag
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, y_max: f64) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
"##,
        W / 2.0,
        esc(title)
    );
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    let _ = writeln!(
        out,
        r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"##
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            x0 - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" text-anchor="middle">{}</text>"##,
        (x0 + x1) / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r##"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"##,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD_T + 10.0 + 18.0 * i as f64;
        let x = W - PAD_R + 12.0;
        let _ = writeln!(
            out,
            r##"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"##,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            esc(n)
        );
    }
}

/// Line chart of one or more series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let x_max = pts.clone().map(|p| p.0).fold(0.0, f64::max).max(1.0);
    let y_max = nice_max(pts.map(|p| p.1).fold(0.0, f64::max));
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label, y_max);
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    x0 + (x1 - x0) * x / x_max,
                    y0 - (y0 - y1) * (y / y_max).clamp(0.0, 1.0)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"##,
            PALETTE[i % PALETTE.len()],
            path.join(" ")
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{x1}" y="{}" text-anchor="end">{}</text>"##,
        y0 + 16.0,
        fmt_tick(x_max)
    );
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], groups: &[(String, Vec<f64>)]) -> String {
    let y_max = nice_max(groups.iter().flat_map(|g| g.1.iter().copied()).fold(0.0, f64::max));
    let mut out = String::new();
    frame(&mut out, title, "", y_label, y_max);
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    let slot = (x1 - x0) / labels.len().max(1) as f64;
    let bw = slot * 0.8 / groups.len().max(1) as f64;
    for (li, label) in labels.iter().enumerate() {
        let sx = x0 + slot * li as f64 + slot * 0.1;
        for (gi, (_, vals)) in groups.iter().enumerate() {
            let v = vals.get(li).copied().unwrap_or(0.0);
            let h = (y0 - y1) * (v / y_max).clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{v:.2}</title></rect>"##,
                sx + bw * gi as f64,
                y0 - h,
                bw,
                h,
                PALETTE[gi % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"##,
            sx + slot * 0.4,
            y0 + 16.0,
            esc(label)
        );
    }
    let names: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Moving average of the total loss, sampled at up to `points` positions.
pub fn loss_curve(log: &[IterationLog], window: usize, points: usize) -> Vec<(f64, f64)> {
    if log.is_empty() {
        return Vec::new();
    }
    let w = window.max(1);
    let step = (log.len() / points.max(1)).max(1);
    (0..log.len())
        .step_by(step)
        .chain(std::iter::once(log.len() - 1))
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s = &log[lo..=i];
            ((i + 1) as f64, s.iter().map(|l| l.loss.total).sum::<f64>() / s.len() as f64)
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn ablation_report(run: &Path, report: &AblationReport) -> Result<ReportFiles> {
    let datasets: Vec<String> = {
        let mut v: Vec<String> = Vec::new();
        for r in &report.rows {
            for d in r.results.keys() {
                if !v.contains(&d.to_string()) {
                    v.push(d.to_string());
                }
            }
        }
        v
    };
    let mut table = Vec::new();
    for r in &report.rows {
        let mut per: IndexMap<String, Value> = IndexMap::new();
        for (d, res) in &r.results {
            per.insert(
                d.to_string(),
                json!({"AP": res.ap, "AP50": res.ap50, "AP75": res.ap75, "AR1": res.ar1, "AR10": res.ar10}),
            );
        }
        table.push(json!({
            "row": r.name,
            "final_loss": r.final_loss,
            "metrics": per,
            "selection_recall": r.selection.iter().map(|(d, s)| (d.to_string(), s.recall)).collect::<IndexMap<_, _>>(),
        }));
    }
    let doc = json!({
        "kind": "ablation",
        "suite": report.suite,
        "seeds": report.seeds,
        "iterations": report.iterations,
        "rows": table,
    });
    let json_path = run.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;
    let labels: Vec<String> = report.rows.iter().map(|r| r.name.clone()).collect();
    let groups: Vec<(String, Vec<f64>)> = datasets
        .iter()
        .map(|d| {
            let vals = report
                .rows
                .iter()
                .map(|r| {
                    r.results
                        .iter()
                        .find(|(k, _)| k.as_str() == d)
                        .map_or(0.0, |(_, v)| v.ap)
                })
                .collect();
            (d.clone(), vals)
        })
        .collect();
    let svg = bar_chart(&format!("{} ablation", report.suite), "AP", &labels, &groups);
    let plot = run.join(format!("ablation_{}.svg", report.suite));
    fs::write(&plot, svg)?;
    Ok(ReportFiles {
        json: json_path,
        plots: vec![plot],
    })
}

fn train_report(run: &Path) -> Result<ReportFiles> {
    let log = read_metrics(&run.join("metrics.jsonl"))?;
    let summary: Value = match fs::read_to_string(run.join("summary.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Value::Null,
    };
    let evals: Value = match fs::read_to_string(run.join("evals.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Value::Null,
    };
    let mean = |s: &[IterationLog]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|l| l.loss.total).sum::<f64>() / s.len() as f64
        }
    };
    let tail = (log.len() / 10).max(1).min(log.len());
    let curve = loss_curve(&log, 50, 200);
    let doc = json!({
        "kind": "train",
        "iterations": log.len(),
        "loss_first_10": mean(&log[..log.len().min(10)]),
        "loss_last_tenth": mean(&log[log.len() - tail..]),
        "summary": summary,
        "evals": evals,
        "loss_curve": curve,
    });
    let json_path = run.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;
    let plot = run.join("loss.svg");
    fs::write(
        &plot,
        line_chart(
            "training loss (moving average)",
            "iteration",
            "total loss",
            &[Series {
                name: "total".into(),
                points: curve,
            }],
        ),
    )?;
    Ok(ReportFiles {
        json: json_path,
        plots: vec![plot],
    })
}

/// Writes `report.json` and SVG plots into a run or ablation directory.
pub fn report(run: &Path) -> Result<ReportFiles> {
    let ablation = run.join("ablation.json");
    if ablation.exists() {
        let r: AblationReport = serde_json::from_str(&fs::read_to_string(&ablation)?)?;
        return ablation_report(run, &r);
    }
    if run.join("metrics.jsonl").exists() {
        return train_report(run);
    }
    Err(Error::Format {
        path: run.to_path_buf(),
        reason: "neither ablation.json nor metrics.jsonl found".into(),
    })
}
