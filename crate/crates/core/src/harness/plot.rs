//! Training-curve SVG emission: one chart per metric, runs overlaid as
//! polylines with a legend of run names.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{read_metrics, MetricsRow};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 42.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Render one chart with shared axes over all series.
pub fn render_chart(title: &str, series: &[Series]) -> Result<String> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Usage(format!("chart `{title}` has no data points")));
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = move |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = move |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"#333\"/>\n",
        HEIGHT - MARGIN_B
    ));
    // axis labels (min/max ticks)
    for (v, xpix) in [(x0, sx(x0)), (x1, sx(x1))] {
        svg.push_str(&format!(
            "<text x=\"{xpix}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{v:.0}</text>\n",
            HEIGHT - MARGIN_B + 16.0
        ));
    }
    for (v, ypix) in [(y0, sy(y0)), (y1, sy(y1))] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ypix}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            MARGIN_L - 6.0
        ));
    }

    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 14.0 + i as f64 * 18.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 8.0,
            WIDTH - MARGIN_R + 28.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R + 32.0,
            ly + 4.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string())
}

/// One SVG per metric family (reward, terrain level, losses), every run
/// overlaid. Returns the written paths.
pub fn plot_runs(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if csvs.is_empty() {
        return Err(Error::Usage("no metrics CSVs given".into()));
    }
    let mut runs: Vec<(String, Vec<MetricsRow>)> = Vec::new();
    for csv in csvs {
        let rows = read_metrics(csv)?;
        if rows.is_empty() {
            return Err(Error::Schema(format!(
                "{}: no data rows to plot",
                csv.display()
            )));
        }
        runs.push((run_name(csv), rows));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let extract = |rows: &[MetricsRow], f: &dyn Fn(&MetricsRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.iter as f64, f(r))).collect()
    };

    // reward
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, rows)| Series {
            name: name.clone(),
            points: extract(rows, &|r| r.reward_mean),
        })
        .collect();
    let path = out_dir.join("reward.svg");
    std::fs::write(&path, render_chart("mean step reward", &series)?)?;
    written.push(path);

    // terrain level
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, rows)| Series {
            name: name.clone(),
            points: extract(rows, &|r| r.terrain_level),
        })
        .collect();
    let path = out_dir.join("terrain_level.svg");
    std::fs::write(&path, render_chart("mean terrain level", &series)?)?;
    written.push(path);

    // losses: one polyline per (run, loss column) that is not identically 0
    let loss_cols: [(&str, fn(&MetricsRow) -> f64); 5] = [
        ("policy", |r| r.loss_policy),
        ("value", |r| r.loss_value),
        ("mse", |r| r.loss_mse),
        ("bt_diag", |r| r.loss_bt_diag),
        ("bt_offdiag", |r| r.loss_bt_offdiag),
    ];
    let mut series = Vec::new();
    for (name, rows) in &runs {
        for (col, f) in &loss_cols {
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.iter as f64, f(r))).collect();
            if pts.iter().any(|(_, y)| *y != 0.0) {
                series.push(Series {
                    name: format!("{name}:{col}"),
                    points: pts,
                });
            }
        }
    }
    if !series.is_empty() {
        let path = out_dir.join("losses.svg");
        std::fs::write(&path, render_chart("training losses", &series)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Parse the polylines back out of an SVG (test oracle support).
pub fn parse_polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for chunk in svg.split("<polyline").skip(1) {
        if let Some(start) = chunk.find("points=\"") {
            let rest = &chunk[start + 8..];
            if let Some(end) = rest.find('"') {
                let pts: Vec<(f64, f64)> = rest[..end]
                    .split_whitespace()
                    .filter_map(|p| {
                        let mut it = p.split(',');
                        let x = it.next()?.parse().ok()?;
                        let y = it.next()?.parse().ok()?;
                        Some((x, y))
                    })
                    .collect();
                out.push(pts);
            }
        }
    }
    out
}
