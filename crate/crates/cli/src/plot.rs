//! Minimal self-contained SVG charts: lines, points, grouped bars and heatmaps.

use std::fmt::Write as _;

const W: f64 = 680.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Line,
    Points,
    Bars,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Clone, Debug, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Category names for bar charts; x values index into them.
    pub categories: Option<Vec<String>>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), ..Default::default() }
    }

    pub fn add(mut self, name: &str, points: Vec<(f64, f64)>, mark: Mark) -> Self {
        self.series.push(Series { name: name.into(), points, mark });
        self
    }

    pub fn categories(mut self, names: Vec<String>) -> Self {
        self.categories = Some(names);
        self
    }

    pub fn render(&self) -> String {
        let finite =
            || self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let bars = self.series.iter().any(|s| s.mark == Mark::Bars);
        let (mut x0, mut x1) = bounds(finite().map(|p| p.0));
        let (mut y0, mut y1) = bounds(finite().map(|p| p.1));
        if bars {
            y0 = y0.min(0.0);
            y1 = y1.max(0.0);
        }
        if let Some(c) = &self.categories {
            x0 = -0.5;
            x1 = c.len() as f64 - 0.5;
        }
        (x0, x1) = widen(x0, x1);
        (y0, y1) = widen(y0, y1);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = header(W, H, &self.title);
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
        );
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
                LEFT,
                LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                label(t)
            );
        }
        match &self.categories {
            Some(c) => {
                for (i, name) in c.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                        sx(i as f64),
                        TOP + ph + 16.0,
                        escape(name)
                    );
                }
            }
            None => {
                for t in ticks(x0, x1) {
                    let x = sx(t);
                    let _ = writeln!(
                        s,
                        r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/>"##,
                        TOP + ph,
                        TOP + ph + 4.0
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                        TOP + ph + 16.0,
                        label(t)
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16,{:.1}) rotate(-90)" font-size="12" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        let n_bars = self.series.iter().filter(|s| s.mark == Mark::Bars).count().max(1);
        let bar_w = 0.8 / n_bars as f64;
        let mut bar_i = 0;
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> =
                series.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            match series.mark {
                Mark::Line => {
                    let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
                        d.join(" ")
                    );
                }
                Mark::Points => {
                    for &(x, y) in &pts {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{color}" fill-opacity="0.7"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
                Mark::Bars => {
                    for &(x, y) in &pts {
                        let left = sx(x - 0.4 + bar_w * bar_i as f64);
                        let right = sx(x - 0.4 + bar_w * (bar_i + 1) as f64);
                        let (top, bottom) = (sy(y.max(0.0)), sy(y.min(0.0)));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                            right - left,
                            bottom - top
                        );
                    }
                    bar_i += 1;
                }
            }
            let ly = TOP + 12.0 + 16.0 * i as f64;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="8" fill="{color}"/>"#, ly - 8.0);
            let _ =
                writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-size="11">{}</text>"#, lx + 18.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Row-major grid, `values[j * resolution + i]` at x index `i`, y index `j`.
#[derive(Clone, Debug)]
pub struct HeatPanel {
    pub title: String,
    pub resolution: usize,
    pub values: Vec<f64>,
}

/// Side-by-side heatmaps, each with its own colour scale.
pub fn heatmaps(title: &str, x_label: &str, y_label: &str, panels: &[HeatPanel]) -> String {
    let size = 240.0;
    let gap = 70.0;
    let w = gap + panels.len() as f64 * (size + gap);
    let h = size + 110.0;
    let mut s = header(w, h, title);
    for (k, p) in panels.iter().enumerate() {
        let ox = gap + k as f64 * (size + gap);
        let oy = 50.0;
        let (lo, hi) = widen_flat(bounds(p.values.iter().copied().filter(|v| v.is_finite())));
        let r = p.resolution.max(1);
        let cell = size / r as f64;
        for j in 0..r {
            for i in 0..r {
                let v = p.values.get(j * r + i).copied().unwrap_or(f64::NAN);
                let fill = if v.is_finite() { colormap((v - lo) / (hi - lo)) } else { "#ffffff".to_string() };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                    ox + i as f64 * cell,
                    oy + size - (j + 1) as f64 * cell,
                    cell + 0.3,
                    cell + 0.3
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            ox + size / 2.0,
            oy - 8.0,
            escape(&p.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            ox + size / 2.0,
            oy + size + 18.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(-90)" font-size="11" text-anchor="middle">{}</text>"#,
            ox - 10.0,
            oy + size / 2.0,
            escape(y_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">loss {} (dark) to {} (light)</text>"#,
            ox + size / 2.0,
            oy + size + 36.0,
            label(lo),
            label(hi)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ =
        writeln!(s, r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn widen_flat((lo, hi): (f64, f64)) -> (f64, f64) {
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Finite, non-degenerate range with 4% padding.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = widen_flat((lo, hi));
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step && out.len() < 20 {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.into()
        }
    }
}

fn colormap(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.len(), 6);
        for (a, b) in t.iter().zip([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = ticks(-3.7, 12.2);
        assert!(t.first().unwrap() >= &-3.7 && t.last().unwrap() <= &12.2);
    }

    #[test]
    fn labels_are_compact() {
        assert_eq!(label(0.5), "0.5");
        assert_eq!(label(2.0), "2");
        assert_eq!(label(1e-6), "1.0e-6");
        assert_eq!(label(-0.0), "0");
    }

    #[test]
    fn render_is_deterministic_and_escaped() {
        let c = Chart::new("a < b", "x", "y").add("s&t", vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)], Mark::Line);
        let svg = c.render();
        assert_eq!(svg, c.render());
        assert!(svg.contains("a &lt; b") && svg.contains("s&amp;t"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_and_flat_inputs_render() {
        assert!(Chart::new("t", "x", "y").render().ends_with("</svg>\n"));
        let flat = Chart::new("t", "x", "y").add("c", vec![(1.0, 2.0), (2.0, 2.0)], Mark::Points).render();
        assert!(!flat.contains("NaN") && !flat.contains("inf"));
        let h = heatmaps("h", "a", "b", &[HeatPanel { title: "p".into(), resolution: 2, values: vec![1.0; 4] }]);
        assert!(!h.contains("NaN"));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), "#440154");
        assert_eq!(colormap(1.0), "#fde725");
    }
}
