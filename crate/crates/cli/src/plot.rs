//! Gnuplot-ready column files and a small SVG line-plot writer.

use std::fmt::Write as _;

/// Whitespace-separated columns with a `#` header line.
pub fn columns(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = format!("# {}\n", header.join(" "));
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// One polyline per series; axes are logarithmic when `log` is set.
pub fn svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)], log: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let tf = |v: f64| if log { v.ln() } else { v };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|&(x, y)| tf(x).is_finite() && tf(y).is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(tf(x));
        x1 = x1.max(tf(x));
        y0 = y0.min(tf(y));
        y1 = y1.max(tf(y));
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (tf(x) - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (tf(y) - y0) / (y1 - y0) * (H - 2.0 * M);
    let back = |v: f64| if log { v.exp() } else { v };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{} {} M{M} {} L{M} {M}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let px = M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="{anchor}">{:.3}</text>"#, H - M + 16.0, back(v));
    }
    for v in [y0, y1] {
        let py = H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
        let _ = writeln!(s, r#"<text x="{}" y="{py}" text-anchor="end">{:.3}</text>"#, M - 4.0, back(v));
    }
    for (k, (name, data)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = data
            .iter()
            .filter(|&&(x, y)| tf(x).is_finite() && tf(y).is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - M - 120.0, M + 16.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
