//! SVG line charts of training records and the final-metric comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use regda_core::train::{Record, TrainReport};

/// One labeled series of records.
pub struct Run {
    pub label: String,
    pub method: String,
    pub records: Vec<Record>,
}

pub fn load_run(path: &Path) -> Result<Run> {
    let (label, method, records) = if path.extension().is_some_and(|e| e == "csv") {
        let records = TrainReport::read_csv(path).with_context(|| format!("reading {}", path.display()))?;
        let stem = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        (stem.clone(), stem, records)
    } else {
        let r = TrainReport::read_json(path).with_context(|| format!("reading {}", path.display()))?;
        (format!("{} seed {}", r.method, r.seed), r.method.to_string(), r.records)
    };
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(Run { label, method, records })
}

pub struct Panel {
    pub file: &'static str,
    pub title: &'static str,
    pub value: fn(&Record) -> f64,
}

pub const PANELS: [Panel; 4] = [
    Panel {
        file: "accuracy_f.svg",
        title: "Target PCK of f",
        value: |r| r.target_pck_f,
    },
    Panel {
        file: "accuracy_adv.svg",
        title: "Target PCK of f'",
        value: |r| r.target_pck_adv,
    },
    Panel {
        file: "accuracy_difference.svg",
        title: "Accuracy difference (f - f')",
        value: |r| r.accuracy_difference,
    },
    Panel {
        file: "prediction_difference.svg",
        title: "Prediction difference |y' - y| (grid cells)",
        value: |r| r.prediction_difference,
    },
];

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= n as f64)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    (0..)
        .map(|i| start + i as f64 * step)
        .take_while(|v| *v <= hi + step * 1e-9)
        .collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Self-contained SVG line chart, one polyline per run.
pub fn line_chart(title: &str, runs: &[Run], value: fn(&Record) -> f64) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let points: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| r.records.iter().map(|rec| (rec.step as f64, value(rec))).collect())
        .collect();
    let all = points.iter().flatten().filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
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
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(x0, x1, 8) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#f0f0f0"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 18.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    for (i, (run, pts)) in runs.iter().zip(&points).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&run.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Final metrics per method: run count, median and mean target MAE, mean PCK.
pub fn table_rows(runs: &[Run]) -> Vec<(String, usize, f64, f64, f64)> {
    let mut by: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in runs {
        by.entry(&r.method).or_default().push(r.records.last().expect("nonempty"));
    }
    by.into_iter()
        .map(|(m, recs)| {
            let mut maes: Vec<f64> = recs.iter().map(|r| r.target_mae_f).collect();
            let n = maes.len();
            let mean = maes.iter().sum::<f64>() / n as f64;
            let pck = recs.iter().map(|r| r.target_pck_f).sum::<f64>() / n as f64;
            (m.to_string(), n, median(&mut maes), mean, pck)
        })
        .collect()
}

pub fn table_text(rows: &[(String, usize, f64, f64, f64)]) -> String {
    let mut s = format!(
        "{:<16} {:>5} {:>12} {:>12} {:>10}\n",
        "method", "runs", "median MAE", "mean MAE", "mean PCK"
    );
    for (m, n, med, mean, pck) in rows {
        let _ = writeln!(s, "{m:<16} {n:>5} {med:>12.4} {mean:>12.4} {pck:>10.3}");
    }
    let _ = writeln!(s, "MAE unit: {}", regda_core::eval::MAE_UNIT);
    s
}

/// Writes the four panels, the raw series and the table into `out`.
pub fn write_all(runs: &[Run], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        bail!("no reports to plot");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for p in &PANELS {
        let path = out.join(p.file);
        std::fs::write(&path, line_chart(p.title, runs, p.value))?;
        written.push(path);
    }

    let series = out.join("series.csv");
    let mut w = String::new();
    w.push_str("label,step,target_pck_f,target_pck_adv,accuracy_difference,prediction_difference,target_mae_f\n");
    for r in runs {
        for rec in &r.records {
            let _ = writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.label.replace(',', ";"),
                rec.step,
                rec.target_pck_f,
                rec.target_pck_adv,
                rec.accuracy_difference,
                rec.prediction_difference,
                rec.target_mae_f
            );
        }
    }
    std::fs::write(&series, w)?;
    written.push(series);

    let rows = table_rows(runs);
    let mut t = String::from("method,runs,median_target_mae,mean_target_mae,mean_target_pck\n");
    for (m, n, med, mean, pck) in &rows {
        let _ = writeln!(t, "{m},{n},{med},{mean},{pck}");
    }
    let table = out.join("table.csv");
    std::fs::write(&table, t)?;
    written.push(table);
    let text = out.join("table.txt");
    std::fs::write(&text, table_text(&rows))?;
    written.push(text);
    Ok(written)
}
