//! Minimal deterministic SVG output: line plots, heatmaps and histograms.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 50.0;

pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

pub struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Frame {
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (x0, x1) = pad(x.0, x.1);
        let (y0, y1) = pad(y.0, y.1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (ML, W - MR, MT, H - MB);
    let _ = writeln!(out, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", r - l, b - t);
    for i in 0..=4 {
        let s = i as f64 / 4.0;
        let xv = f.x0 + s * (f.x1 - f.x0);
        let yv = f.y0 + s * (f.y1 - f.y0);
        let (x, y) = (f.px(xv), f.py(yv));
        let _ = writeln!(out, "<line x1=\"{x:.2}\" y1=\"{b}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", b + 5.0);
        let _ = writeln!(out, "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", b + 18.0, fmt_tick(xv));
        let _ = writeln!(out, "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{l}\" y2=\"{y:.2}\" stroke=\"black\"/>", l - 5.0);
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", l - 8.0, y + 4.0, fmt_tick(yv));
    }
    let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (l + r) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, series: &[(&str, &str)]) {
    for (i, (label, color)) in series.iter().enumerate() {
        let y = MT + 14.0 + 16.0 * i as f64;
        let x = W - MR - 170.0;
        let _ = writeln!(out, "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>", x + 20.0);
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\">{}</text>", x + 26.0, y + 4.0, escape(label));
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    pts.fold(((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY)), |((a, b), (c, d)), p| {
        ((a.min(p.0), b.max(p.0)), (c.min(p.1), d.max(p.1)))
    })
}

/// Line plot; `bands` are shaded x-intervals drawn under the curves.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], bands: &[(f64, f64)]) -> String {
    let (xb, yb) = bounds(series);
    let f = Frame::new(xb, (yb.0.min(0.0), yb.1 * 1.05));
    let mut out = String::new();
    header(&mut out, title);
    for &(a, b) in bands {
        let (xa, xb) = (f.px(a.max(f.x0)), f.px(b.min(f.x1)));
        let _ = writeln!(
            out,
            "<rect x=\"{xa:.2}\" y=\"{MT}\" width=\"{:.2}\" height=\"{}\" fill=\"#dde8f5\"/>",
            (xb - xa).max(0.0),
            H - MT - MB
        );
    }
    axes(&mut out, &f, xlabel, ylabel);
    draw_series(&mut out, &f, series);
    out.push_str("</svg>\n");
    out
}

fn draw_series(out: &mut String, f: &Frame, series: &[Series]) {
    for s in series {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>", s.color, pts.join(" "));
        if s.markers {
            for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>", f.px(x), f.py(y), s.color);
            }
        }
    }
    let labels: Vec<(&str, &str)> = series.iter().map(|s| (s.label.as_str(), s.color)).collect();
    legend(out, &labels);
}

/// Plot on log10 axes of both coordinates.
pub fn loglog_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let logged: Vec<Series> = series
        .iter()
        .map(|s| Series {
            label: s.label.clone(),
            color: s.color,
            points: s.points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.log10(), p.1.log10())).collect(),
            markers: s.markers,
        })
        .collect();
    let (xb, yb) = bounds(&logged);
    let f = Frame::new((xb.0 - 0.05, xb.1 + 0.05), (yb.0 - 0.1, yb.1 + 0.1));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, &format!("log10 {xlabel}"), &format!("log10 {ylabel}"));
    draw_series(&mut out, &f, &logged);
    out.push_str("</svg>\n");
    out
}

fn ramp(t: f64) -> String {
    // dark blue -> teal -> yellow
    let stops = [(0.0, (68.0, 1.0, 84.0)), (0.5, (33.0, 145.0, 140.0)), (1.0, (253.0, 231.0, 37.0))];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let s = (t - a.0) / (b.0 - a.0);
    let c = |u: f64, v: f64| (u + s * (v - u)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.1 .0, b.1 .0), c(a.1 .1, b.1 .1), c(a.1 .2, b.1 .2))
}

/// Heatmap of `values[i][j]` at (xs[j], ys[i]); None cells are drawn grey
/// and crossed out.
pub fn heatmap(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64], values: &[Vec<Option<f64>>], log: bool) -> String {
    let tr = |v: f64| if log { v.max(1e-300).log10() } else { v };
    let finite: Vec<f64> = values.iter().flatten().flatten().map(|&v| tr(v)).filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let half = |v: &[f64]| if v.len() > 1 { (v[1] - v[0]).abs() / 2.0 } else { 0.5 };
    let (hx, hy) = (half(xs), half(ys));
    let f = Frame::new((xs[0] - hx, xs[xs.len() - 1] + hx), (ys[0] - hy, ys[ys.len() - 1] + hy));
    let mut out = String::new();
    header(&mut out, title);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x0, x1) = (f.px(xs[j] - hx), f.px(xs[j] + hx));
            let (y0, y1) = (f.py(ys[i] + hy), f.py(ys[i] - hy));
            let fill = match v {
                Some(v) if tr(*v).is_finite() => ramp(if hi > lo { (tr(*v) - lo) / (hi - lo) } else { 0.5 }),
                _ => "#bbbbbb".to_string(),
            };
            let _ = writeln!(out, "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>", x1 - x0, y1 - y0);
            if v.is_none() {
                let _ = writeln!(out, "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"#666\"/>");
            }
        }
    }
    axes(&mut out, &f, xlabel, ylabel);
    let scale = if log { "log10 " } else { "" };
    if lo.is_finite() {
        let _ =
            writeln!(out, "<text x=\"{ML}\" y=\"{:.2}\">{scale}range [{}, {}]; grey: failed</text>", MT - 6.0, fmt_tick(lo), fmt_tick(hi));
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram (bins as (lo, hi, density)) with density curves on top.
pub fn histogram(title: &str, xlabel: &str, bins: &[(f64, f64, f64)], curves: &[Series]) -> String {
    let x0 = bins.first().map_or(0.0, |b| b.0);
    let x1 = bins.last().map_or(1.0, |b| b.1);
    let ymax = bins.iter().map(|b| b.2).chain(curves.iter().flat_map(|c| c.points.iter().map(|p| p.1))).fold(0.0, f64::max);
    let f = Frame::new((x0, x1), (0.0, ymax * 1.05));
    let mut out = String::new();
    header(&mut out, title);
    for &(a, b, d) in bins {
        let (xa, xb) = (f.px(a), f.px(b));
        let (ya, yb) = (f.py(d), f.py(0.0));
        let _ = writeln!(
            out,
            "<rect x=\"{xa:.2}\" y=\"{ya:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#9ecae1\" stroke=\"#3182bd\"/>",
            xb - xa,
            yb - ya
        );
    }
    axes(&mut out, &f, xlabel, "density");
    draw_series(&mut out, &f, curves);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed_and_deterministic() {
        let s = || Series { label: "a<b".into(), color: "black", points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)], markers: true };
        let a = line_plot("t", "x", "y", &[s()], &[(0.2, 0.8)]);
        assert_eq!(a, line_plot("t", "x", "y", &[s()], &[(0.2, 0.8)]));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        let h = heatmap("h", "x", "y", &[0.0, 1.0], &[0.0, 1.0], &[vec![Some(1.0), None], vec![Some(3.0), Some(2.0)]], true);
        assert_eq!(h.matches("<rect").count(), 2 + 4);
        let g = histogram("g", "x", &[(0.0, 1.0, 0.5), (1.0, 2.0, 0.5)], &[]);
        assert!(g.contains("#9ecae1"));
        let l = loglog_plot("l", "n", "err", &[s()]);
        assert!(l.contains("log10 n"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
    }
}
