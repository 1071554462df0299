//! Deterministic SVG line charts of metric records.
//!
//! Rows sharing an x value are averaged, so a multi-seed sweep plots as one
//! polyline per y key. All coordinates are printed with fixed precision;
//! the same rows always produce the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_Y: f64 = 40.0;
const TICKS: usize = 5;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Value of `key` in a record: a metric, or `sweep_value` / `seed`.
fn lookup(r: &MetricsRecord, key: &str) -> Option<f64> {
    match key {
        "sweep_value" => Some(r.sweep_value),
        "seed" => Some(r.seed as f64),
        _ => r.get(key),
    }
}

/// Per-key series of (x, mean y), sorted by x.
pub fn series(rows: &[MetricsRecord], x_key: &str, y_keys: &[&str]) -> Result<Vec<Vec<(f64, f64)>>> {
    if rows.is_empty() {
        return Err(Error::config("plot", "no rows to plot"));
    }
    y_keys
        .iter()
        .map(|&y| {
            let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
            for r in rows {
                let xv = lookup(r, x_key).ok_or_else(|| Error::config(format!("plot.x.{x_key}"), "key missing from rows"))?;
                let yv = lookup(r, y).ok_or_else(|| Error::config(format!("plot.y.{y}"), "key missing from rows"))?;
                // Ordered bit key: total order on f64, exact grouping.
                let bits = xv.to_bits();
                let key = if xv.is_sign_negative() { !bits } else { bits | (1 << 63) };
                let e = acc.entry(key).or_insert((xv, 0.0, 0));
                e.1 += yv;
                e.2 += 1;
            }
            Ok(acc.into_values().map(|(x, s, n)| (x, s / n as f64)).collect())
        })
        .collect()
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(rows: &[MetricsRecord], x_key: &str, y_keys: &[&str]) -> Result<String> {
    if y_keys.is_empty() {
        return Err(Error::config("plot.y", "at least one y key is required"));
    }
    let data = series(rows, x_key, y_keys)?;
    let (x0, x1) = span(data.iter().flatten().map(|p| p.0));
    let (y0, y1) = span(data.iter().flatten().map(|p| p.1));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN_Y - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN_LEFT, MARGIN_LEFT + plot_w, MARGIN_Y, HEIGHT - MARGIN_Y);
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2} {top:.2}V{bottom:.2}H{right:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{bottom:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 4.0,
            bottom + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 4.0,
            left - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        HEIGHT - 6.0,
        escape(x_key)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(&y_keys.join(", "))
    );
    for (i, (key, pts)) in y_keys.iter().zip(&data).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            right + 10.0,
            right + 30.0,
            right + 36.0,
            ly + 4.0,
            escape(key)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn emit_plot(rows: &[MetricsRecord], x_key: &str, y_keys: &[&str], path: &Path) -> Result<()> {
    std::fs::write(path, render(rows, x_key, y_keys)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, k: f64, carry: f64) -> MetricsRecord {
        let mut r = MetricsRecord::new("feasible-region", seed, "k", k);
        r.insert("carry", carry).unwrap();
        r
    }

    #[test]
    fn averages_and_sorts() {
        let rows = vec![row(0, 4.0, 1.0), row(0, 1.0, 3.0), row(1, 4.0, 2.0), row(1, 1.0, 5.0)];
        let s = series(&rows, "sweep_value", &["carry"]).unwrap();
        assert_eq!(s[0], vec![(1.0, 4.0), (4.0, 1.5)]);
    }

    #[test]
    fn single_point_is_valid() {
        let svg = render(&[row(0, 2.0, 0.5)], "sweep_value", &["carry"]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn deterministic_and_labeled() {
        let rows: Vec<_> = (0..6).map(|i| row(0, (1 << i) as f64, 1.0 / (i + 1) as f64)).collect();
        let a = render(&rows, "sweep_value", &["carry"]).unwrap();
        assert_eq!(a, render(&rows, "sweep_value", &["carry"]).unwrap());
        assert!(a.contains(">sweep_value<") && a.contains(">carry<"));
    }

    #[test]
    fn missing_key_is_a_config_error() {
        let rows = vec![row(0, 1.0, 1.0)];
        assert!(matches!(render(&rows, "sweep_value", &["psnr_db"]), Err(Error::Config { .. })));
        assert!(matches!(render(&rows, "nope", &["carry"]), Err(Error::Config { .. })));
    }
}
