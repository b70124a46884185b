//! CSV tables and SVG plots built from a run's artifacts.

use std::fmt::Write as _;

use facenas_core::metrics::Prediction;
use facenas_core::search::{FinalReport, LeaderboardEntry, StepSummary};

pub fn leaderboard_csv(entries: &[LeaderboardEntry]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "canonical_key", "mean_e_val", "count"])?;
    for (i, e) in entries.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            e.key.clone(),
            e.mean_e_val.to_string(),
            e.count.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn learning_curve_csv(history: &[StepSummary]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "timestep",
        "mean_e_val",
        "min_e_val",
        "mean_reward",
        "failures",
    ])?;
    for s in history {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            s.stage.to_string(),
            s.timestep.to_string(),
            f(s.mean_e_val),
            f(s.min_e_val),
            f(s.update.as_ref().map(|u| u.mean_reward)),
            s.failures.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn predictions_csv(preds: &[Prediction]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["clip_id", "predicted", "actual"])?;
    for p in preds {
        w.write_record([p.clip_id.clone(), p.predicted.to_string(), p.actual.to_string()])?;
    }
    Ok(w.into_inner()?)
}

pub fn finalists_csv(report: &FinalReport) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "canonical_key",
        "rmse",
        "mae",
        "search_mean_e_val",
        "seeds",
        "best",
    ])?;
    for (i, f) in report.finalists.iter().enumerate() {
        let seeds: Vec<String> = f.runs.iter().map(|r| r.seed.to_string()).collect();
        w.write_record([
            (i + 1).to_string(),
            f.canonical_key.clone(),
            f.rmse.to_string(),
            f.mae.to_string(),
            f.search_mean_e_val.to_string(),
            seeds.join(" "),
            f.best.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open_svg(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for i in 0..=4 {
        let u = i as f64 / 4.0;
        let xv = f.x0 + u * (f.x1 - f.x0);
        let yv = f.y0 + u * (f.y1 - f.y0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            f.px(xv),
            b + 16.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            l - 4.0,
            f.py(yv) + 4.0
        );
    }
}

/// Mean validation error per timestep, one line per stage.
pub fn learning_curve_svg(history: &[StepSummary]) -> String {
    let mut stages: Vec<String> = Vec::new();
    for s in history {
        let name = s.stage.to_string();
        if !stages.contains(&name) {
            stages.push(name);
        }
    }
    let pts = history
        .iter()
        .filter_map(|s| s.mean_e_val.map(|v| (s.timestep as f64, v)));
    let f = Frame::fit(pts.clone().map(|p| p.0), pts.clone().map(|p| p.1));
    let mut out = String::new();
    open_svg(
        &mut out,
        "Controller learning curve",
        "timestep",
        "mean validation error",
        &f,
    );
    for (i, stage) in stages.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> = history
            .iter()
            .filter(|s| &s.stage.to_string() == stage)
            .filter_map(|s| {
                s.mean_e_val
                    .map(|v| format!("{:.2},{:.2}", f.px(s.timestep as f64), f.py(v)))
            })
            .collect();
        if !line.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 14.0 * i as f64,
            escape(stage)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Predicted against actual, with the identity line.
pub fn scatter_svg(preds: &[Prediction], title: &str) -> String {
    let all = preds.iter().flat_map(|p| [p.predicted, p.actual]);
    let f = Frame::fit(all.clone(), all);
    let mut out = String::new();
    open_svg(&mut out, title, "actual", "predicted", &f);
    let (a, b) = (f.x0.max(f.y0), f.x1.min(f.y1));
    if a < b {
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 4"/>"##,
            f.px(a),
            f.py(a),
            f.px(b),
            f.py(b)
        );
    }
    for p in preds {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"><title>{}</title></circle>"#,
            f.px(p.actual),
            f.py(p.predicted),
            COLORS[0],
            escape(&p.clip_id)
        );
    }
    out.push_str("</svg>\n");
    out
}
