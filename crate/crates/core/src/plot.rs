//! Minimal SVG charts: bars with whiskers and multi-series line plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo - 1.0, lo + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn y_axis(out: &mut String, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let plot_h = H - TOP - BOTTOM;
    let to_y = move |v: f64| TOP + plot_h * (1.0 - (v - lo) / (hi - lo));
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - BOTTOM, W - RIGHT, H - BOTTOM);
    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let y = to_y(v);
        let _ = writeln!(out, r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT, W - RIGHT);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, y + 4.0);
    }
    to_y
}

/// Bars of `values` with symmetric `errors` whiskers.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64], errors: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, title, y_label);
    let hi = values.iter().zip(errors).map(|(v, e)| v + e).fold(f64::MIN, f64::max);
    let lo = values.iter().zip(errors).map(|(v, e)| v - e).fold(f64::MAX, f64::min).min(0.0);
    let (lo, hi) = nice_range(lo, hi.max(lo + 1e-9));
    let to_y = y_axis(&mut out, lo, hi);
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, ((label, &v), &e)) in labels.iter().zip(values).zip(errors).enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let bw = slot * 0.6;
        let (y0, y1) = (to_y(v.max(lo)), to_y(lo.max(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="{}"/>"#,
            y0.min(y1),
            (y1 - y0).abs(),
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + bw / 2.0;
        let _ = writeln!(out, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, to_y(v - e), to_y(v + e));
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, to_y(v + e) - 5.0);
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, escape(label));
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per `(name, points)` series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, y_label);
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if xlo > xhi {
        (xlo, xhi, ylo, yhi) = (0.0, 1.0, 0.0, 1.0);
    }
    let (ylo, yhi) = nice_range(ylo, yhi);
    let (xlo, xhi) = if xhi > xlo { (xlo, xhi) } else { (xlo - 1.0, xlo + 1.0) };
    let to_y = y_axis(&mut out, ylo, yhi);
    let plot_w = W - LEFT - RIGHT;
    let to_x = |v: f64| LEFT + plot_w * (v - xlo) / (xhi - xlo);
    for t in 0..=5 {
        let v = xlo + (xhi - xlo) * t as f64 / 5.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, to_x(v), H - BOTTOM + 16.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, H - 14.0, escape(x_label));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", to_x(x), to_y(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in &path {
            let (x, y) = p.split_once(',').expect("pair");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            LEFT + 10.0,
            TOP + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let bars = bar_chart("t", "DSC", &["a".into(), "b<".into()], &[70.0, 76.0], &[1.0, 0.0]);
        assert!(bars.starts_with("<svg") && bars.trim_end().ends_with("</svg>"));
        assert!(bars.contains("b&lt;"));
        let lines = line_chart("t", "x", "y", &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert_eq!(lines.matches("<circle").count(), 2);
    }
}
