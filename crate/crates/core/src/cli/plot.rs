//! Standalone SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let widen = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, f: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
<text x="{PAD}" y="{}" text-anchor="start">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
"##,
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        W / 2.0,
        H - 10.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
        H - PAD + 14.0,
        f.x0,
        W - PAD,
        H - PAD + 14.0,
        f.x1,
        PAD - 4.0,
        H - PAD,
        f.y0,
        PAD - 4.0,
        PAD + 4.0,
        f.y1,
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per named series.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut s = open(title, &f, xlabel, ylabel);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 4.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Points coloured on a blue-to-red ramp by `values`.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)], values: &[f64]) -> String {
    let f = Frame::fit(pts.iter());
    let mut s = open(title, &f, xlabel, ylabel);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for (i, &(x, y)) in pts.iter().enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let u = values.get(i).map_or(0.5, |v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 });
        let (r, b) = ((255.0 * u) as u8, (255.0 * (1.0 - u)) as u8);
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#{r:02x}40{b:02x}" fill-opacity="0.7"/>"##,
            f.px(x),
            f.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars at positions `1..=n`.
pub fn bars(title: &str, xlabel: &str, ylabel: &str, values: &[f64]) -> String {
    let mut pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| (i as f64 + 1.0, v)).collect();
    pts.push((0.5, 0.0));
    pts.push((values.len() as f64 + 0.5, 0.0));
    let f = Frame::fit(pts.iter());
    let mut s = open(title, &f, xlabel, ylabel);
    let w = (f.px(1.0) - f.px(0.0)) * 0.7;
    for (i, &v) in values.iter().enumerate() {
        let x = f.px(i as f64 + 1.0);
        let (top, base) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x - w / 2.0,
            top,
            w,
            (base - top).max(0.5),
            PALETTE[0]
        );
    }
    s.push_str("</svg>\n");
    s
}
