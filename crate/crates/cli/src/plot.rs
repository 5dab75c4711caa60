//! Deterministic PCA and the two SVG figures.

use std::fmt::Write as _;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Two leading principal axes found by power iteration with deflation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn leading_eigenvector(cov: &[Vec<f64>], skip: Option<&[f64]>) -> Vec<f64> {
    let d = cov.len();
    // Fixed, generic start so the result never depends on a random draw.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 1.0 / (i as f64 + 2.0)).collect();
    let orth = |v: &mut Vec<f64>| {
        if let Some(u) = skip {
            let p = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
    };
    orth(&mut v);
    if normalize(&mut v) == 0.0 {
        v = vec![0.0; d];
        v[d - 1] = 1.0;
        orth(&mut v);
        normalize(&mut v);
    }
    for _ in 0..1000 {
        let mut next: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
        orth(&mut next);
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    // Sign convention: largest-magnitude entry positive.
    let pivot = v
        .iter()
        .cloned()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

impl Pca {
    pub fn fit(points: &[Vec<f64>]) -> Self {
        let d = points.first().map_or(0, Vec::len);
        let n = points.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for p in points {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += c[i] * c[j] / n;
                }
            }
        }
        let first = leading_eigenvector(&cov, None);
        let second = if d > 1 {
            leading_eigenvector(&cov, Some(&first))
        } else {
            vec![0.0; d]
        };
        Self {
            mean,
            components: [first, second],
        }
    }

    pub fn project(&self, p: &[f64]) -> (f64, f64) {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        (dot(&c, &self.components[0]), dot(&c, &self.components[1]))
    }
}

/// Maps data coordinates into the plot area.
struct Frame {
    min: (f64, f64),
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for (x, y) in points {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        if !lo.0.is_finite() {
            return Self { min: (0.0, 0.0), scale: 1.0 };
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12);
        let scale = (WIDTH.min(HEIGHT) - 2.0 * MARGIN) / span;
        Self { min: lo, scale }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            MARGIN + (x - self.min.0) * self.scale,
            HEIGHT - MARGIN - (y - self.min.1) * self.scale,
        )
    }
}

pub struct ClassPoints {
    pub images: Vec<(f64, f64)>,
    /// One list of points per prompt.
    pub prototypes: Vec<Vec<(f64, f64)>>,
}

/// Scatter of projected image embeddings with prototypes over-plotted. One
/// `<g>` per class.
pub fn scatter_svg(classes: &[ClassPoints], title: &str) -> String {
    let all = classes
        .iter()
        .flat_map(|c| c.images.iter().chain(c.prototypes.iter().flatten()))
        .copied();
    let frame = Frame::fit(all);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (c, class) in classes.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        let _ = writeln!(s, r#"<g id="class-{c}" class="class" fill="{color}">"#);
        for &p in &class.images {
            let (x, y) = frame.map(p);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill-opacity="0.6"/>"#);
        }
        for (i, draws) in class.prototypes.iter().enumerate() {
            for &p in draws {
                let (x, y) = frame.map(p);
                let _ = writeln!(
                    s,
                    r#"<rect class="prototype" data-prompt="{i}" x="{:.2}" y="{:.2}" width="8" height="8" stroke="black" stroke-width="1"/>"#,
                    x - 4.0,
                    y - 4.0
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Bar chart of ascending class accuracies split into a lower and an upper
/// bin, each with a dashed line at the bin mean.
pub fn bins_svg(sorted: &[(usize, f64)], bins: (f64, f64)) -> String {
    let n = sorted.len().max(1);
    let split = if sorted.len() == 1 { 1 } else { sorted.len() / 2 };
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / n as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let groups = [("bin-low", &sorted[..split], "#d62728", bins.0, 0), ("bin-high", &sorted[split..], "#1f77b4", bins.1, split)];
    for (id, bars, color, mean, offset) in groups {
        let _ = writeln!(s, r#"<g id="{id}" fill="{color}">"#);
        for (j, &(class, acc)) in bars.iter().enumerate() {
            let x = MARGIN + (offset + j) as f64 * bar_w;
            let h = acc * plot_h;
            let _ = writeln!(
                s,
                r#"<rect data-class="{class}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                x + 1.0,
                HEIGHT - MARGIN - h,
                (bar_w - 2.0).max(1.0),
                h
            );
        }
        if !bars.is_empty() && mean.is_finite() {
            let y = HEIGHT - MARGIN - mean * plot_h;
            let x0 = MARGIN + offset as f64 * bar_w;
            let x1 = x0 + bars.len() as f64 * bar_w;
            let _ = writeln!(
                s,
                r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="black" stroke-dasharray="4 3"/>"#
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    );
    let _ = writeln!(s, "</svg>");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
