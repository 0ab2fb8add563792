//! Static SVG chart of NPRMSE against d, one line per method.

use std::fmt::Write;

use gkdr_emulation::pipeline::BenchmarkReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 130.0;
const MARGIN_Y: f64 = 40.0;
const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

pub fn nprmse_chart(report: &BenchmarkReport) -> String {
    let mut methods: Vec<_> = report.rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let d_min = report.rows.iter().map(|r| r.d).min().unwrap_or(1) as f64;
    let d_max = report.rows.iter().map(|r| r.d).max().unwrap_or(1) as f64;
    let y_max = report.rows.iter().map(|r| r.nprmse).fold(0.0, f64::max).max(1e-12) * 1.1;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |d: f64| {
        if d_max > d_min {
            MARGIN_LEFT + (d - d_min) / (d_max - d_min) * plot_w
        } else {
            MARGIN_LEFT + 0.5 * plot_w
        }
    };
    let sy = |v: f64| MARGIN_Y + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN_LEFT, HEIGHT - MARGIN_Y, WIDTH - MARGIN_RIGHT, MARGIN_Y);
    let _ = writeln!(svg, r#"<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    let mut ds: Vec<usize> = report.rows.iter().map(|r| r.d).collect();
    ds.sort_unstable();
    ds.dedup();
    for d in &ds {
        let x = sx(*d as f64);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{d}</text>"#, y0 + 18.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">structural dimension d</text>"#,
        MARGIN_LEFT + 0.5 * plot_w,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">NPRMSE</text>"#,
        MARGIN_Y + 0.5 * plot_h,
        MARGIN_Y + 0.5 * plot_h
    );

    for (i, method) in methods.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.method == *method)
            .map(|r| format!("{:.1},{:.1}", sx(r.d as f64), sy(r.nprmse)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted point");
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = MARGIN_Y + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 16.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, method.name());
    }
    svg.push_str("</svg>\n");
    svg
}
