use std::fmt::Write as _;
use std::path::Path;

use super::pca::pca;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One row of the PCA coloring table.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColoredPoint {
    pub pc1: f64,
    pub pc2: f64,
    pub pc3: f64,
    pub color_f: usize,
    pub color_m: usize,
}

/// Projects `n` samples of dimension `d` onto their top three principal
/// components and tags sample `i` with `i mod tau_f` and `i mod tau_m`.
pub fn pca_coloring(samples: &[f64], n: usize, d: usize, tau_f: usize, tau_m: usize) -> Result<Vec<ColoredPoint>> {
    if tau_f == 0 || tau_m == 0 {
        return Err(Error::invalid("coloring periods must be positive"));
    }
    let p = pca(samples, n, d, 3)?;
    Ok((0..n)
        .map(|i| ColoredPoint {
            pc1: p.projections[i * 3],
            pc2: p.projections[i * 3 + 1],
            pc3: p.projections[i * 3 + 2],
            color_f: i % tau_f,
            color_m: i % tau_m,
        })
        .collect())
}

/// Writes the coloring table as CSV with columns `pc1,pc2,pc3,color_f,color_m`.
pub fn pca_coloring_export(
    samples: &[f64],
    n: usize,
    d: usize,
    tau_f: usize,
    tau_m: usize,
    path: &Path,
) -> Result<Vec<ColoredPoint>> {
    let points = pca_coloring(samples, n, d, tau_f, tau_m)?;
    write_coloring_csv(&points, path)?;
    Ok(points)
}

pub fn write_coloring_csv(points: &[ColoredPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn import_coloring_csv(path: &Path) -> Result<Vec<ColoredPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Fixed categorical palette; color index `c` uses entry `c mod 16`.
pub const PALETTE: [&str; 16] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
];

/// Deterministic static SVG scatter plot.
pub fn svg_scatter(xs: &[f64], ys: &[f64], colors: &[usize], title: &str) -> Result<String> {
    if xs.len() != ys.len() || xs.len() != colors.len() {
        return Err(Error::invalid("scatter columns differ in length"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("scatter coordinates must be finite"));
    }
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const M: f64 = 30.0;
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            (0.0, 1.0)
        } else if hi - lo <= 0.0 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(xs);
    let (y0, y1) = range(ys);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{M}" y="20" font-family="sans-serif" font-size="12">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    for ((x, y), c) in xs.iter().zip(ys).zip(colors) {
        let px = M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let py = H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
        let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="{}"/>"#, PALETTE[c % 16]);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
