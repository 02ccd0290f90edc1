//! Minimal SVG line charts: history, ground truth and forecast.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 300.0;
const MARGIN: f64 = 30.0;

pub struct Line<'a> {
    pub label: &'a str,
    pub color: &'a str,
    /// x offset of the first value
    pub start: usize,
    pub values: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(title: &str, lines: &[Line<'_>]) -> String {
    let finite = lines.iter().flat_map(|l| l.values.iter()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (-1.0, 1.0)
    };
    let n = lines
        .iter()
        .map(|l| l.start + l.values.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let sx = (WIDTH - 2.0 * MARGIN) / (n - 1) as f64;
    let sy = (HEIGHT - 2.0 * MARGIN) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="18" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    for (i, line) in lines.iter().enumerate() {
        let mut points = String::new();
        for (j, v) in line.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x = MARGIN + (line.start + j) as f64 * sx;
            let y = HEIGHT - MARGIN - (v - lo) * sy;
            let _ = write!(points, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            line.color,
            points.trim_end()
        );
        let ly = 18.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.0}" y="{ly}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            WIDTH - 140.0,
            line.color,
            escape(line.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(path: &Path, title: &str, lines: &[Line<'_>]) -> Result<()> {
    std::fs::write(path, render_svg(title, lines))
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polylines() {
        let a = [1.0, 2.0, 3.0];
        let b = [3.0, f64::NAN];
        let svg = render_svg(
            "t<1>",
            &[
                Line { label: "history", color: "gray", start: 0, values: &a },
                Line { label: "forecast", color: "red", start: 3, values: &b },
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
