//! SVG line plot of a range-test curve: smoothed loss against log10 of the
//! learning rate, with the suggestion marked.

use std::fmt::Write;

use stagewise::optim::LrCurve;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 48.0;

pub fn lr_curve_svg(curve: &LrCurve) -> String {
    let mut out = String::new();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.lr > 0.0 && p.smoothed.is_finite())
        .map(|p| (p.lr.log10(), p.smoothed))
        .collect();
    if pts.is_empty() {
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">empty curve</text>"#, W / 2.0, H / 2.0).unwrap();
        out.push_str("</svg>\n");
        return out;
    }

    let (x0, x1) = span(pts.iter().map(|p| p.0));
    let (y0, y1) = span(pts.iter().map(|p| p.1));
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let (ax, ay) = (LEFT, H - BOTTOM);
    writeln!(out, r#"<path d="M{ax} {TOP} V{ay} H{}" stroke="black" fill="none"/>"#, W - RIGHT).unwrap();
    for decade in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = sx(decade as f64);
        writeln!(out, r#"<line x1="{x:.1}" y1="{ay}" x2="{x:.1}" y2="{}" stroke="black"/>"#, ay + 4.0).unwrap();
        writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{decade}</text>"#, ay + 16.0).unwrap();
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        writeln!(out, r#"<line x1="{}" y1="{y:.1}" x2="{ax}" y2="{y:.1}" stroke="black"/>"#, ax - 4.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, ax - 6.0, y + 4.0).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">learning rate</text>"#, (LEFT + W - RIGHT) / 2.0, H - 8.0).unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">smoothed loss</text>"#,
        (TOP + ay) / 2.0,
        (TOP + ay) / 2.0
    )
    .unwrap();

    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    writeln!(out, r#"<polyline points="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#, line.join(" ")).unwrap();

    let s = curve.suggested_lr.log10();
    if s.is_finite() {
        let nearest = pts.iter().min_by(|a, b| (a.0 - s).abs().total_cmp(&(b.0 - s).abs())).expect("non-empty");
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="crimson"><title>suggested {:.3e}</title></circle>"#,
            sx(nearest.0),
            sy(nearest.1),
            curve.suggested_lr
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stagewise::optim::{CurvePoint, StopReason};

    #[test]
    fn marks_suggestion_and_handles_empty() {
        let points = (0..5)
            .map(|i| {
                let lr = 10f64.powi(i - 4);
                CurvePoint { lr, loss: 1.0 / (i + 1) as f64, smoothed: 1.0 / (i + 1) as f64 }
            })
            .collect();
        let curve = LrCurve { points, suggested_lr: 1e-2, stop_reason: StopReason::Exhausted };
        let svg = lr_curve_svg(&curve);
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<polyline") && svg.contains("<circle"));
        assert!(svg.trim_end().ends_with("</svg>"));

        let empty = LrCurve { points: vec![], suggested_lr: 1e-3, stop_reason: StopReason::Exhausted };
        assert!(lr_curve_svg(&empty).contains("empty curve"));
    }
}
