//! Minimal SVG line charts. Every polyline carries a `data-column`
//! attribute naming the CSV column it was drawn from.

use std::fmt::Write as _;
use std::path::Path;

use super::{io_err, HarnessError};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub column: String,
    pub values: Vec<f64>,
    pub color: String,
}

impl Series {
    pub fn new(column: impl Into<String>, values: Vec<f64>, color: &str) -> Self {
        Self { column: column.into(), values, color: color.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub series: Vec<Series>,
    /// Horizontal reference lines `(label, y)`.
    pub hlines: Vec<(String, f64)>,
}

impl Chart {
    pub fn new(title: impl Into<String>, xlabel: impl Into<String>, ylabel: impl Into<String>) -> Self {
        Self { title: title.into(), xlabel: xlabel.into(), ylabel: ylabel.into(), series: vec![], hlines: vec![] }
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub fn render(chart: &Chart, xs: &[f64]) -> String {
    let (l, r, t, b) = MARGIN;
    let (x0, x1) = range(xs.iter().copied());
    let ys = chart.series.iter().flat_map(|s| s.values.iter().copied()).chain(chart.hlines.iter().map(|h| h.1));
    let (y0, y1) = range(ys);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (WIDTH - l - r);
    let py = |y: f64| HEIGHT - b - (y - y0) / (y1 - y0) * (HEIGHT - t - b);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&chart.title));
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - l - r,
        HEIGHT - t - b
    );
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, l - 6.0, py(yv) + 4.0, yv);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#, px(xv), HEIGHT - b + 16.0, xv);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(&chart.xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&chart.ylabel)
    );
    for (label, y) in &chart.hlines {
        let _ = writeln!(
            s,
            r#"<line x1="{l}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="black" stroke-dasharray="6 4"><title>{}</title></line>"#,
            WIDTH - r,
            escape(label),
            y = py(*y)
        );
    }
    for (idx, series) in chart.series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(&series.values)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-column="{}" fill="none" stroke="{}" stroke-width="1.6" points="{}"/>"#,
            escape(&series.column),
            escape(&series.color),
            pts.join(" ")
        );
        let ly = t + 16.0 + 16.0 * idx as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{}">{}</text>"#,
            l + 10.0,
            escape(&series.color),
            escape(&series.column)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write(path: &Path, chart: &Chart, xs: &[f64]) -> Result<(), HarnessError> {
    std::fs::write(path, render(chart, xs)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }

    #[test]
    fn skips_non_finite_points() {
        let mut c = Chart::new("t", "k", "y");
        c.series.push(Series::new("col", vec![0.0, f64::NAN, 1.0], "red"));
        let svg = render(&c, &[0.0, 1.0, 2.0]);
        let line = svg.lines().find(|l| l.contains("data-column=\"col\"")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap();
        assert_eq!(pts.trim_end_matches("\"/>").split(' ').count(), 2);
    }

    #[test]
    fn flat_series_gets_a_range() {
        let mut c = Chart::new("t", "k", "y");
        c.series.push(Series::new("flat", vec![1.0, 1.0], "red"));
        let svg = render(&c, &[0.0, 1.0]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
