//! Minimal SVG line charts and matching whitespace-separated data files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
/// Points per series kept in the SVG after min/max bucketing.
const MAX_POINTS: usize = 1500;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#ad494a",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Draw as a staircase (value held until the next point).
    pub step: bool,
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 6);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64, step: f64) -> String {
    let digits = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.digits$}")
}

/// Keeps the first, last, minimum and maximum point of each bucket.
fn decimate(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len().min(y.len());
    if n <= MAX_POINTS {
        return (0..n).map(|k| (x[k], y[k])).collect();
    }
    let buckets = MAX_POINTS / 2;
    let mut out = Vec::with_capacity(MAX_POINTS + 2);
    for b in 0..buckets {
        let s = b * n / buckets;
        let e = ((b + 1) * n / buckets).max(s + 1);
        let (mut kmin, mut kmax) = (s, s);
        for k in s..e {
            if y[k] < y[kmin] {
                kmin = k;
            }
            if y[k] > y[kmax] {
                kmax = k;
            }
        }
        let (a, c) = if kmin <= kmax { (kmin, kmax) } else { (kmax, kmin) };
        out.push((x[a], y[a]));
        if c != a {
            out.push((x[c], y[c]));
        }
    }
    out.push((x[n - 1], y[n - 1]));
    out
}

impl LinePlot {
    fn ranges(&self) -> (f64, f64, f64, f64) {
        let mut r = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (&x, &y) in s.x.iter().zip(&s.y) {
                if x.is_finite() && y.is_finite() {
                    r = (r.0.min(x), r.1.max(x), r.2.min(y), r.3.max(y));
                }
            }
        }
        if !r.0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if r.1 - r.0 <= 0.0 {
            r.1 = r.0 + 1.0;
        }
        let pad = (r.3 - r.2).abs().max(1e-9 * r.3.abs().max(1e-12));
        (r.0, r.1, r.2 - 0.05 * pad, r.3 + 0.05 * pad)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.ranges();
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * ph;

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(o, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        );

        let xs = nice_step(x1 - x0, 6);
        for t in ticks(x0, x1) {
            let px = sx(t);
            let _ = writeln!(
                o,
                r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#e0e0e0"/>"##,
                MARGIN_T,
                MARGIN_T + ph
            );
            let _ = writeln!(
                o,
                r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                MARGIN_T + ph + 16.0,
                tick_label(t, xs)
            );
        }
        let ys = nice_step(y1 - y0, 6);
        for t in ticks(y0, y1) {
            let py = sy(t);
            let _ = writeln!(
                o,
                r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#e0e0e0"/>"##,
                MARGIN_L,
                MARGIN_L + pw
            );
            let _ = writeln!(
                o,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                py + 4.0,
                tick_label(t, ys)
            );
        }
        let _ = writeln!(
            o,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );

        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts = decimate(&s.x, &s.y);
            let mut path = String::new();
            let mut prev_y: Option<f64> = None;
            for &(x, y) in &pts {
                if self.step {
                    if let Some(py) = prev_y {
                        let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(py));
                    }
                }
                let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(y));
                prev_y = Some(y);
            }
            let _ = writeln!(
                o,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                path.trim_end()
            );
            let ly = MARGIN_T + 14.0 + 16.0 * k as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                o,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
                lx + 20.0
            );
            let _ = writeln!(
                o,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 26.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        o.push_str("</svg>\n");
        o
    }

    /// Columns `x label_1 label_2 ...`; series must share the x grid of the first.
    pub fn to_dat(&self) -> String {
        let mut o = String::new();
        let labels: Vec<String> = self.series.iter().map(|s| s.label.replace(' ', "_")).collect();
        let _ = writeln!(o, "# {} {}", self.x_label.replace(' ', "_"), labels.join(" "));
        let Some(first) = self.series.first() else { return o };
        for (k, x) in first.x.iter().enumerate() {
            let _ = write!(o, "{x}");
            for s in &self.series {
                let _ = write!(o, " {}", s.y.get(k).copied().unwrap_or(f64::NAN));
            }
            o.push('\n');
        }
        o
    }

    /// Writes `<dir>/<stem>.svg` and `<dir>/<stem>.dat`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| Error::Io { path, source }
        };
        let svg = dir.join(format!("{stem}.svg"));
        std::fs::write(&svg, self.to_svg()).map_err(io(&svg))?;
        let dat = dir.join(format!("{stem}.dat"));
        std::fs::write(&dat, self.to_dat()).map_err(io(&dat))?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_extremes() {
        let x: Vec<f64> = (0..100_000).map(|k| k as f64).collect();
        let mut y = vec![0.0; x.len()];
        y[54_321] = 7.0;
        y[12_345] = -3.0;
        let d = decimate(&x, &y);
        assert!(d.len() <= MAX_POINTS + 2);
        assert!(d.iter().any(|p| p.1 == 7.0));
        assert!(d.iter().any(|p| p.1 == -3.0));
    }

    #[test]
    fn svg_is_well_formed() {
        let p = LinePlot {
            title: "a < b".into(),
            x_label: "t".into(),
            y_label: "y".into(),
            series: vec![Series { label: "s".into(), x: vec![0.0, 1.0, 2.0], y: vec![1.0, 1.0, 1.0] }],
            step: true,
        };
        let svg = p.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(p.to_dat().lines().count(), 4);
    }
}
