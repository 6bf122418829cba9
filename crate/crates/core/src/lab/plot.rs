//! Minimal SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

pub struct Series {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Equal scales on both axes.
    pub equal_aspect: bool,
    pub series: Vec<Series>,
    /// Horizontal reference line.
    pub reference: Option<(String, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Figure {
    pub fn to_svg(&self) -> String {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let finite = self.series.iter().flat_map(|s| &s.points).filter(|p| p[0].is_finite() && p[1].is_finite());
        for p in finite {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if let Some((_, y)) = &self.reference {
            lo[1] = lo[1].min(*y);
            hi[1] = hi[1].max(*y);
        }
        if !lo[0].is_finite() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        for a in 0..2 {
            let pad = 0.05 * (hi[a] - lo[a]).max(1e-12);
            lo[a] -= pad;
            hi[a] += pad;
        }
        let plot_w = WIDTH - 2.0 * MARGIN;
        let plot_h = HEIGHT - 2.0 * MARGIN;
        let mut sx = plot_w / (hi[0] - lo[0]);
        let mut sy = plot_h / (hi[1] - lo[1]);
        if self.equal_aspect {
            let s = sx.min(sy);
            sx = s;
            sy = s;
        }
        let px = |x: f64| MARGIN + (x - lo[0]) * sx;
        let py = |y: f64| HEIGHT - MARGIN - (y - lo[1]) * sy;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for (a, (x, y)) in [(lo[0], HEIGHT - MARGIN + 16.0), (hi[0], HEIGHT - MARGIN + 16.0)].into_iter().enumerate() {
            let anchor = if a == 0 { "start" } else { "end" };
            let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="{anchor}">{x:.3}</text>"#, px(x).clamp(MARGIN, WIDTH - MARGIN));
        }
        for y in [lo[1], hi[1]] {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, MARGIN - 4.0, py(y).clamp(MARGIN, HEIGHT - MARGIN));
        }
        if let Some((label, y)) = &self.reference {
            let _ = writeln!(
                out,
                r##"<line x1="{MARGIN}" x2="{:.1}" y1="{:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="4 3"/><text x="{:.1}" y="{:.2}" text-anchor="end" fill="#555">{}</text>"##,
                WIDTH - MARGIN,
                py(*y),
                py(*y),
                WIDTH - MARGIN - 4.0,
                py(*y) - 4.0,
                escape(label)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p[0].is_finite() && p[1].is_finite())
                .map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1])))
                .collect();
            let tag = if s.closed { "polygon" } else { "polyline" };
            let _ = writeln!(out, r#"<{tag} points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                MARGIN + 8.0,
                MARGIN + 16.0 + 14.0 * i as f64,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
