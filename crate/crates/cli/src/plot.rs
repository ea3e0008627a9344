//! Static SVG of true against predicted stiffness per sleeper.

use std::fmt::Write;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 48.0;

pub struct RecordSeries {
    pub record: usize,
    /// `[kp, kb]` per sleeper, N/m.
    pub truth: Vec<[f64; 2]>,
    pub pred: Vec<[f64; 2]>,
}

fn polyline(values: &[f64], x0: f64, y0: f64, lo: f64, hi: f64) -> String {
    let n = values.len().max(2) - 1;
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = x0 + PANEL_W * i as f64 / n as f64;
            let y = y0 + PANEL_H * (1.0 - (v - lo) / span);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_svg(series: &[RecordSeries]) -> String {
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = series.len() as f64 * (PANEL_H + 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (row, s) in series.iter().enumerate() {
        for (p, name) in ["k_p", "k_b"].iter().enumerate() {
            let x0 = p as f64 * (PANEL_W + 2.0 * MARGIN) + MARGIN;
            let y0 = row as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN;
            let t: Vec<f64> = s.truth.iter().map(|r| r[p] / 1e6).collect();
            let q: Vec<f64> = s.pred.iter().map(|r| r[p] / 1e6).collect();
            let lo = t.iter().chain(&q).fold(f64::INFINITY, |m, &v| m.min(v));
            let hi = t.iter().chain(&q).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.02).max(1e-9);
            let (lo, hi) = (lo - pad, hi + pad);
            let _ = writeln!(
                svg,
                r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="{x0}" y="{:.1}">record {} {} (MN/m)</text>"#,
                y0 - 8.0,
                s.record,
                name
            );
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.1}</text>"#, x0 - 4.0, y0 + 10.0);
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{lo:.1}</text>"#,
                x0 - 4.0,
                y0 + PANEL_H
            );
            let _ = writeln!(
                svg,
                r##"<polyline class="truth" fill="none" stroke="#1f4e9c" stroke-width="2" points="{}"/>"##,
                polyline(&t, x0, y0, lo, hi)
            );
            let _ = writeln!(
                svg,
                r##"<polyline class="prediction" fill="none" stroke="#d0502a" stroke-width="2" stroke-dasharray="6 4" points="{}"/>"##,
                polyline(&q, x0, y0, lo, hi)
            );
        }
    }
    let _ = writeln!(svg, "</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_polylines_per_panel() {
        let s = RecordSeries {
            record: 3,
            truth: vec![[1e8, 5e7]; 10],
            pred: vec![[1.1e8, 4e7]; 10],
        };
        let svg = render_svg(&[s]);
        assert_eq!(svg.matches("class=\"truth\"").count(), 2);
        assert_eq!(svg.matches("class=\"prediction\"").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn flat_truth_is_a_flat_line() {
        let line = polyline(&[5.0; 4], 0.0, 0.0, 4.0, 6.0);
        let ys: Vec<&str> = line.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.iter().all(|y| *y == ys[0]));
    }
}
