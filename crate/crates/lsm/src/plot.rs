//! Minimal static SVG charts for run artifacts. CSV remains the contract;
//! these are convenience renderings of the same data.

use std::path::Path;

use crate::error::{LsmError, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut pts = series.iter().flat_map(|s| s.points.iter());
    let first = pts.next()?;
    let (mut x0, mut x1, mut y0, mut y1) = (first.0, first.0, first.1, first.1);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    Some((x0, x1, y0, y1))
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(x_label: &str, y_label: &str, b: (f64, f64, f64, f64)) -> String {
    let (x0, x1, y0, y1) = b;
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN / 2.0,
        t = MARGIN / 2.0
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        xml_escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    ));
    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let vx = x0 + fx * (x1 - x0);
        let px = MARGIN + fx * (W - 1.5 * MARGIN);
        out.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{vx:.3}</text>\n",
            H - MARGIN + 16.0
        ));
        let vy = y0 + fx * (y1 - y0);
        let py = H - MARGIN - fx * (H - 1.5 * MARGIN);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\" font-size=\"10\">{vy:.3}</text>\n",
            MARGIN - 6.0
        ));
    }
    out
}

fn project(p: (f64, f64), b: (f64, f64, f64, f64)) -> (f64, f64) {
    let (x0, x1, y0, y1) = b;
    let px = MARGIN + (p.0 - x0) / (x1 - x0) * (W - 1.5 * MARGIN);
    let py = H - MARGIN - (p.1 - y0) / (y1 - y0) * (H - 1.5 * MARGIN);
    (px, py)
}

/// Multi-series line chart with markers and a legend.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    let Some(b) = bounds(series) else {
        return Err(LsmError::Data("line_chart: no points".into()));
    };
    let mut svg = svg_header(title);
    svg.push_str(&axes(x_label, y_label, b));
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, c| a.0.total_cmp(&c.0));
        let pts: Vec<String> = sorted
            .iter()
            .map(|&p| {
                let (px, py) = project(p, b);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        for &p in &sorted {
            let (px, py) = project(p, b);
            svg.push_str(&format!(
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2.5\" fill=\"{color}\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MARGIN * 2.6,
            MARGIN / 2.0 + 16.0 * si as f64,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| LsmError::io(path, e))
}

/// Scatter plot of one point cloud.
pub fn scatter_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    path: &Path,
) -> Result<()> {
    let series = [Series {
        label: String::new(),
        points: points.to_vec(),
    }];
    let Some(b) = bounds(&series) else {
        return Err(LsmError::Data("scatter_chart: no points".into()));
    };
    let mut svg = svg_header(title);
    svg.push_str(&axes(x_label, y_label, b));
    for &p in points {
        let (px, py) = project(p, b);
        svg.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2\" fill=\"#1f77b4\" fill-opacity=\"0.55\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| LsmError::io(path, e))
}
