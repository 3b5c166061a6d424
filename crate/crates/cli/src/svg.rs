//! Minimal line-chart emitter.

use std::fmt::Write as _;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 420.0;
const H: f64 = 300.0;
const PAD: f64 = 50.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Side-by-side panels sharing a log-scaled x axis (NFE).
pub fn line_chart(panels: &[Panel], x_label: &str) -> String {
    let total_w = W * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k as f64 * W;
        let pts = || panel.series.iter().flat_map(|s| s.points.iter());
        let (xl, xh) = range(pts().map(|p| p.0.max(1e-12).ln()));
        let (yl, yh) = range(pts().map(|p| p.1).filter(|v| v.is_finite()));
        let px = |x: f64| x0 + PAD + (x.max(1e-12).ln() - xl) / (xh - xl) * (W - 2.0 * PAD);
        let py = |y: f64| H - PAD - (y - yl) / (yh - yl) * (H - 2.0 * PAD);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle">{}</text>"#, x0 + W / 2.0, panel.title);
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{PAD}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            x0 + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#, x0 + W / 2.0, H - 12.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yh:.3}</text>"#, x0 + PAD - 4.0, PAD + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yl:.3}</text>"#, x0 + PAD - 4.0, H - PAD);
        for (i, series) in panel.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
            for &(x, y) in series.points.iter().filter(|p| p.1.is_finite()) {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{x}</text>"#, px(x), H - PAD + 12.0);
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                x0 + PAD + 6.0,
                PAD + 14.0 + 13.0 * i as f64,
                series.label
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
