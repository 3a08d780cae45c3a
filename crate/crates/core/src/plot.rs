//! Minimal SVG charts for inspecting run outputs.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(title: &str, x_label: &str, y_label: &str, y: (f64, f64)) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="14">{title}</text>
<text x="{cx}" y="{xb}" text-anchor="middle">{x_label}</text>
<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">{y_label}</text>
<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>
<text x="{tx}" y="{b}" text-anchor="end">{ylo:.3}</text>
<text x="{tx}" y="{top}" text-anchor="end">{yhi:.3}</text>
"#,
        cx = WIDTH / 2.0,
        cy = HEIGHT / 2.0,
        xb = HEIGHT - 10.0,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        tx = MARGIN - 4.0,
        top = MARGIN + 4.0,
        ylo = y.0,
        yhi = y.1,
        title = escape(title),
        x_label = escape(x_label),
        y_label = escape(y_label),
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Line chart with one polyline per series and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let xb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut svg = header(title, x_label, y_label, yb);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    project(x, xb, MARGIN, WIDTH - MARGIN),
                    project(y, yb, HEIGHT - MARGIN, MARGIN)
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of labelled values.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let yb = bounds(bars.iter().map(|b| b.1).chain([0.0]));
    let mut svg = header(title, x_label, y_label, yb);
    let n = bars.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let base = project(0.0, yb, HEIGHT - MARGIN, MARGIN);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        let y = project(
            if v.is_finite() { *v } else { 0.0 },
            yb,
            HEIGHT - MARGIN,
            MARGIN,
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            y.min(base),
            slot * 0.8,
            (base - y).abs(),
            PALETTE[0]
        );
        if bars.len() <= 20 {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                x + slot * 0.4,
                HEIGHT - MARGIN + 14.0,
                escape(label)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
