//! Minimal standalone SVG charts.

use std::fmt::Write;

use crate::metrics::ReliabilityTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;
const LEGEND_WIDTH: f64 = 140.0;
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN - LEGEND_WIDTH)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let (l, r) = (MARGIN, WIDTH - MARGIN - LEGEND_WIDTH);
        let (t, b) = (MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            svg,
            r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            r - l,
            b - t
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            (l + r) / 2.0,
            HEIGHT - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(y_label)
        );
        for (v, anchor, x, y) in [
            (self.x.0, "start", l, b + 16.0),
            (self.x.1, "end", r, b + 16.0),
            (self.y.0, "end", l - 4.0, b),
            (self.y.1, "end", l - 4.0, t + 10.0),
        ] {
            let _ = writeln!(
                svg,
                r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{}</text>"#,
                short(v)
            );
        }
    }
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn header(title: &str) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    svg
}

fn legend(svg: &mut String, names: &[&str]) {
    let x = WIDTH - LEGEND_WIDTH + 10.0;
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 16.0,
            y,
            escape(name)
        );
    }
}

/// Scatter plot of 2-D points with one fill color per class.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[usize], class_names: &[String], title: &str) -> String {
    let frame = Frame::fit(points.iter().map(|p| p[0]), points.iter().map(|p| p[1]));
    let mut svg = header(title);
    frame.axes(&mut svg, "y1", "y2");
    for (p, &l) in points.iter().zip(labels) {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.8"/>"#,
            frame.px(p[0]),
            frame.py(p[1]),
            PALETTE[l % PALETTE.len()]
        );
    }
    let names: Vec<&str> = class_names.iter().map(String::as_str).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

/// Line chart of series sharing the x values `1..=len`.
pub fn line_svg(series: &[(&str, &[f64])], title: &str, x_label: &str, y_label: &str) -> String {
    let xs = series.iter().flat_map(|(_, s)| (1..=s.len()).map(|i| i as f64));
    let ys = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied().filter(|v| v.is_finite()));
    let frame = Frame::fit(xs, ys);
    let mut svg = header(title);
    frame.axes(&mut svg, x_label, y_label);
    for (k, (_, s)) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", frame.px((i + 1) as f64), frame.py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            PALETTE[k % PALETTE.len()]
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

/// Reliability diagram: per-bin accuracy bars against the diagonal.
pub fn reliability_svg(table: &ReliabilityTable) -> String {
    let frame = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let mut svg = header(&format!("Reliability (ECE {:.4})", table.ece));
    frame.axes(&mut svg, "confidence", "accuracy");
    let _ = writeln!(
        svg,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        frame.px(0.0),
        frame.py(0.0),
        frame.px(1.0),
        frame.py(1.0)
    );
    for b in table.bins.iter().filter(|b| b.count > 0) {
        let (x0, x1) = (frame.px(b.lower), frame.px(b.upper));
        let top = frame.py(b.accuracy);
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.7" stroke="#333"/>"##,
            x1 - x0,
            frame.py(0.0) - top,
            PALETTE[0]
        );
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"##,
            frame.px(b.mean_confidence),
            frame.py(b.mean_confidence),
            PALETTE[3]
        );
    }
    legend(&mut svg, &["accuracy", "confidence"]);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_has_one_circle_per_point_and_legend() {
        let svg = scatter_svg(
            &[[0.0, 1.0], [2.0, -1.0], [1.0, 0.0]],
            &[0, 1, 1],
            &["a<b".into(), "c".into()],
            "t",
        );
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains(PALETTE[1]));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn reliability_draws_populated_bins() {
        let probs = crate::tensor::Tensor::from_rows(&[vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap();
        let table = crate::metrics::ece(&probs, &[0, 0], 10).unwrap();
        let svg = reliability_svg(&table);
        assert_eq!(svg.matches("fill-opacity=\"0.7\"").count(), 2);
    }

    #[test]
    fn line_chart_handles_single_point() {
        let svg = line_svg(&[("train", &[0.5]), ("val", &[0.7])], "loss", "epoch", "loss");
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
