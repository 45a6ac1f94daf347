//! Minimal SVG emitters: semi-logarithmic line plots and actuator layouts.

use std::fmt::Write as _;

use chstab::actuators::{ActuatorLayout, Family};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 180.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

/// Data-to-canvas map of a plot with a linear x axis and a log10 y axis.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub t0: f64,
    pub t1: f64,
    /// Decade bounds of the y axis.
    pub d0: i32,
    pub d1: i32,
}

impl Frame {
    fn fit(series: &[Series]) -> Option<Frame> {
        let mut t = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for (&ti, &yi) in s.t.iter().zip(&s.y) {
                if yi > 0.0 && yi.is_finite() && ti.is_finite() {
                    t = (t.0.min(ti), t.1.max(ti));
                    y = (y.0.min(yi), y.1.max(yi));
                }
            }
        }
        if !t.0.is_finite() {
            return None;
        }
        if t.1 <= t.0 {
            t.1 = t.0 + 1.0;
        }
        let d0 = y.0.log10().floor() as i32;
        let d1 = (y.1.log10().ceil() as i32).max(d0 + 1);
        Some(Frame {
            t0: t.0,
            t1: t.1,
            d0,
            d1,
        })
    }

    pub fn map(&self, t: f64, y: f64) -> (f64, f64) {
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let x = MARGIN_L + (t - self.t0) / (self.t1 - self.t0) * pw;
        let v = MARGIN_T + (self.d1 as f64 - y.log10()) / (self.d1 - self.d0) as f64 * ph;
        (x, v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Path data for one series; nonpositive or non-finite values break the line.
fn path_data(frame: &Frame, s: &Series) -> String {
    let mut d = String::new();
    let mut pen_down = false;
    for (&t, &y) in s.t.iter().zip(&s.y) {
        if !(y > 0.0 && y.is_finite()) {
            pen_down = false;
            continue;
        }
        let (x, v) = frame.map(t, y);
        let _ = write!(d, "{}{x:.2} {v:.2} ", if pen_down { "L" } else { "M" });
        pen_down = true;
    }
    d.trim_end().to_string()
}

/// Line plot of `series` with a logarithmic y axis.
pub fn log_plot(title: &str, y_label: &str, series: &[Series]) -> anyhow::Result<String> {
    let frame = Frame::fit(series).ok_or_else(|| anyhow::anyhow!("no positive values to plot"))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y_bottom) = (MARGIN_L, HEIGHT - MARGIN_B);
    let x1 = WIDTH - MARGIN_R;
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        (x0 + x1) / 2.0,
        escape(title)
    );
    // decades
    for d in frame.d0..=frame.d1 {
        let (_, v) = frame.map(frame.t0, 10f64.powi(d));
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{v:.2}" x2="{x1}" y2="{v:.2}" stroke="#dddddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            x0 - 6.0,
            v + 4.0
        );
    }
    for k in 0..=5 {
        let t = frame.t0 + (frame.t1 - frame.t0) * k as f64 / 5.0;
        let (x, _) = frame.map(t, 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y_bottom}" x2="{x:.2}" y2="{:.1}" stroke="black"/><text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y_bottom + 5.0,
            y_bottom + 20.0,
            trim_number(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{MARGIN_T}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y_bottom - MARGIN_T
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">t</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (MARGIN_T + y_bottom) / 2.0,
        (MARGIN_T + y_bottom) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d = path_data(&frame, ser);
        if !d.is_empty() {
            let _ = writeln!(
                s,
                r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
            );
        }
        let ly = MARGIN_T + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 + 10.0,
            x1 + 30.0,
            x1 + 36.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn trim_number(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

/// Actuator boxes over the domain: order boxes red, heat boxes green.
pub fn layout_svg(layout: &ActuatorLayout) -> String {
    let size = 480.0;
    let pad = 20.0;
    let lx = layout.domain[0];
    let ly = if layout.dim == 2 {
        layout.domain[1]
    } else {
        lx / 8.0
    };
    let scale = (size - 2.0 * pad) / lx.max(ly);
    let (w, h) = (lx * scale + 2.0 * pad, ly * scale + 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1}" height="{h:.1}" viewBox="0 0 {w:.1} {h:.1}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{:.2}" height="{:.2}" fill="white" stroke="black"/>"#,
        lx * scale,
        ly * scale
    );
    for (family, color) in [(Family::Order, "red"), (Family::Heat, "green")] {
        for r in layout.rects(family) {
            let (x0, x1) = (r.min[0], r.max[0]);
            // y grows downwards on the canvas
            let (y0, y1) = if layout.dim == 2 {
                (r.min[1], r.max[1])
            } else {
                (0.0, ly)
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                pad + x0 * scale,
                pad + (ly - y1) * scale,
                (x1 - x0) * scale,
                (y1 - y0) * scale
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use chstab::actuators::build_layout;
    use chstab::grid::GridSpec;

    fn points(svg: &str) -> Vec<(f64, f64)> {
        let start = svg.find(r#"<path d=""#).unwrap() + 9;
        let end = start + svg[start..].find('"').unwrap();
        let nums: Vec<f64> = svg[start..end]
            .split(|c: char| c == 'M' || c == 'L' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        nums.chunks(2).map(|c| (c[0], c[1])).collect()
    }

    #[test]
    fn exponential_decay_is_a_straight_line() {
        let t: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let y: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        let svg = log_plot(
            "decay",
            "norm",
            &[Series {
                label: "e^-3t".into(),
                t,
                y,
            }],
        )
        .unwrap();
        let p = points(&svg);
        assert_eq!(p.len(), 51);
        let slope = (p[50].1 - p[0].1) / (p[50].0 - p[0].0);
        for q in &p {
            let expected = p[0].1 + slope * (q.0 - p[0].0);
            // coordinates are printed with two decimals
            assert!((q.1 - expected).abs() < 0.02, "{q:?}");
        }
        assert!(slope > 0.0, "decaying curves go down the canvas");
    }

    #[test]
    fn nonpositive_values_break_the_line() {
        let s = Series {
            label: "x".into(),
            t: vec![0.0, 1.0, 2.0, 3.0],
            y: vec![1.0, 0.0, 0.1, 0.01],
        };
        let svg = log_plot("t", "y", &[s]).unwrap();
        let start = svg.find(r#"<path d=""#).unwrap() + 9;
        let end = start + svg[start..].find('"').unwrap();
        assert_eq!(svg[start..end].matches('M').count(), 2);
        assert!(log_plot(
            "t",
            "y",
            &[Series {
                label: "z".into(),
                t: vec![0.0],
                y: vec![0.0]
            }]
        )
        .is_err());
    }

    #[test]
    fn layout_colors() {
        let spec = GridSpec::unit_square(96);
        for (m, red, green) in [(1, 3, 1), (2, 12, 4), (3, 27, 9)] {
            let svg = layout_svg(&build_layout(m, &spec).unwrap());
            assert_eq!(svg.matches(r#"fill="red""#).count(), red);
            assert_eq!(svg.matches(r#"fill="green""#).count(), green);
        }
    }
}
