//! Tiny static SVG renderer for band plots and trend lines.

use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub enum Series {
    /// Shaded region between `lo` and `hi`.
    Band {
        x: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        color: &'static str,
        label: String,
    },
    Line {
        x: Vec<f64>,
        y: Vec<f64>,
        color: &'static str,
        dashed: bool,
        label: String,
    },
    Points {
        x: Vec<f64>,
        y: Vec<f64>,
        color: &'static str,
        label: String,
    },
}

impl Series {
    fn extent(&self) -> (f64, f64, f64, f64) {
        let (xs, ys): (&[f64], Vec<f64>) = match self {
            Series::Band { x, lo, hi, .. } => (x, lo.iter().chain(hi).copied().collect()),
            Series::Line { x, y, .. } | Series::Points { x, y, .. } => (x, y.clone()),
        };
        let fold = |v: &mut dyn Iterator<Item = f64>| {
            v.filter(|a| a.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
                    (lo.min(a), hi.max(a))
                })
        };
        let (x0, x1) = fold(&mut xs.iter().copied());
        let (y0, y1) = fold(&mut ys.into_iter());
        (x0, x1, y0, y1)
    }

    fn label(&self) -> &str {
        match self {
            Series::Band { label, .. }
            | Series::Line { label, .. }
            | Series::Points { label, .. } => label,
        }
    }

    fn color(&self) -> &'static str {
        match self {
            Series::Band { color, .. }
            | Series::Line { color, .. }
            | Series::Points { color, .. } => color,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; computed from the data when absent.
    pub y_range: Option<(f64, f64)>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 44.0;

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

impl Panel {
    fn render(&self, out: &mut String, ox: f64, oy: f64) {
        let ext = self.series.iter().map(Series::extent).fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |a, b| (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2), a.3.max(b.3)),
        );
        let (x0, x1) = nice_range(ext.0, ext.1);
        let (y0, y1) = self.y_range.unwrap_or_else(|| nice_range(ext.2, ext.3));
        let pw = PANEL_W - MARGIN_L - MARGIN_R;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let px = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| oy + MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
            ox + MARGIN_L,
            oy + MARGIN_T
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            ox + MARGIN_L + pw / 2.0,
            oy + 18.0,
            escape(&self.title)
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                px(fx),
                oy + MARGIN_T + ph + 14.0,
                fmt_tick(fx)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                ox + MARGIN_L - 4.0,
                py(fy) + 3.0,
                fmt_tick(fy)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            ox + MARGIN_L + pw / 2.0,
            oy + PANEL_H - 8.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            ox + 12.0,
            oy + MARGIN_T + ph / 2.0,
            ox + 12.0,
            oy + MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );

        let clip = format!("clip{:.0}_{:.0}", ox, oy);
        let _ = writeln!(
            out,
            r#"<clipPath id="{clip}"><rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}"/></clipPath><g clip-path="url(#{clip})">"#,
            ox + MARGIN_L,
            oy + MARGIN_T
        );
        for s in &self.series {
            match s {
                Series::Band {
                    x, lo, hi, color, ..
                } => {
                    let mut pts = String::new();
                    for (xi, yi) in x.iter().zip(hi) {
                        let _ = write!(pts, "{:.2},{:.2} ", px(*xi), py(*yi));
                    }
                    for (xi, yi) in x.iter().zip(lo).rev() {
                        let _ = write!(pts, "{:.2},{:.2} ", px(*xi), py(*yi));
                    }
                    let _ = writeln!(
                        out,
                        r#"<polygon points="{}" fill="{color}" fill-opacity="0.25" stroke="none"/>"#,
                        pts.trim_end()
                    );
                }
                Series::Line {
                    x,
                    y,
                    color,
                    dashed,
                    ..
                } => {
                    let mut pts = String::new();
                    for (xi, yi) in x.iter().zip(y) {
                        let _ = write!(pts, "{:.2},{:.2} ", px(*xi), py(*yi));
                    }
                    let dash = if *dashed {
                        r#" stroke-dasharray="5,3""#
                    } else {
                        ""
                    };
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"#,
                        pts.trim_end()
                    );
                }
                Series::Points { x, y, color, .. } => {
                    for (xi, yi) in x.iter().zip(y) {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{color}" fill-opacity="0.6"/>"#,
                            px(*xi),
                            py(*yi)
                        );
                    }
                }
            }
        }
        let _ = writeln!(out, "</g>");
        for (k, s) in self.series.iter().enumerate() {
            let ly = oy + MARGIN_T + 12.0 + 13.0 * k as f64;
            let lx = ox + MARGIN_L + 8.0;
            let _ = writeln!(
                out,
                r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="8" fill="{}"/><text x="{:.1}" y="{ly:.1}" font-size="10">{}</text>"#,
                ly - 8.0,
                s.color(),
                lx + 14.0,
                escape(s.label())
            );
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Lay out panels on a grid with `cols` columns.
pub fn render_grid(panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let width = PANEL_W * cols as f64;
    let height = PANEL_H * rows as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        let ox = PANEL_W * (i % cols) as f64;
        let oy = PANEL_H * (i / cols) as f64;
        p.render(&mut out, ox, oy);
    }
    out.push_str("</svg>\n");
    out
}
