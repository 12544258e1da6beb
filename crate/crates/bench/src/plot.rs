//! Static SVG line plots of best-so-far gap against oracle calls (log y).

use std::fmt::Write as _;

use crate::harness::Curve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 150.0, 40.0, 50.0); // left, right, top, bottom
/// Gaps below this are drawn at the floor of the log axis.
const GAP_FLOOR: f64 = 1e-12;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One plot with a line per curve; all curves share `grid`.
pub fn render_svg(title: &str, grid: &[u64], curves: &[Curve]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let pw = WIDTH - ml - mr;
    let ph = HEIGHT - mt - mb;
    let x_max = grid.last().copied().unwrap_or(1).max(1) as f64;
    let logs: Vec<Vec<f64>> = curves.iter().map(|c| c.values.iter().map(|v| v.max(GAP_FLOOR).log10()).collect()).collect();
    let all = logs.iter().flatten().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    lo = lo.floor();
    hi = hi.ceil().max(lo + 1.0);
    let sx = |c: f64| ml + pw * c / x_max;
    let sy = |l: f64| mt + ph * (hi - l) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for e in (lo as i64)..=(hi as i64) {
        let y = sy(e as f64);
        let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, ml + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, ml - 6.0, y + 4.0);
    }
    for i in 0..=4 {
        let c = x_max * i as f64 / 4.0;
        let x = sx(c);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, mt + ph + 18.0, c.round());
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">oracle calls</text>"#, ml + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">best-so-far gap</text>"#, mt + ph / 2.0, mt + ph / 2.0);
    for (k, (c, l)) in curves.iter().zip(&logs).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = grid.iter().zip(l).map(|(&g, &v)| format!("{:.2},{:.2}", sx(g as f64), sy(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, pts.join(" "));
        let ly = mt + 14.0 + 18.0 * k as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&c.method));
    }
    s.push_str("</svg>\n");
    s
}

/// One image per (family, dim) block: `(file stem, svg)`.
pub fn render_blocks(grid: &[u64], curves: &[Curve]) -> Vec<(String, String)> {
    let mut blocks: Vec<(String, usize)> = Vec::new();
    for c in curves {
        if !blocks.contains(&(c.family.clone(), c.dim)) {
            blocks.push((c.family.clone(), c.dim));
        }
    }
    blocks
        .into_iter()
        .map(|(f, d)| {
            let sel: Vec<Curve> = curves.iter().filter(|c| c.family == f && c.dim == d).cloned().collect();
            (format!("best_gap_{f}_d{d}"), render_svg(&format!("{f}, d = {d}"), grid, &sel))
        })
        .collect()
}
