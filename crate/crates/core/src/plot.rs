//! Portable graymap montages and SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::field::{LabelMap, Volume};
use crate::{Error, Result};

/// A 2D slice as row-major values: the volume itself in 2D, the middle
/// slice along the first axis in 3D.
fn slice2d(data: &[f64], dims: &[usize]) -> (usize, usize, Vec<f64>) {
    match dims {
        [h, w] => (*h, *w, data.to_vec()),
        [d, h, w] => {
            let z = d / 2;
            (*h, *w, data[z * h * w..(z + 1) * h * w].to_vec())
        }
        [w] => (1, *w, data.to_vec()),
        _ => unreachable!("grids are 1D to 3D"),
    }
}

/// Binary PGM (P5) with tiles laid out `cols` per row, intensities scaled
/// jointly to 0..255. Only the first channel of each volume is drawn.
pub fn pgm_montage(volumes: &[&Volume], cols: usize) -> Result<Vec<u8>> {
    let tiles: Vec<(usize, usize, Vec<f64>)> = volumes.iter().map(|v| slice2d(v.channel(0), v.grid().dims())).collect();
    montage(tiles, cols)
}

/// Label maps drawn with evenly spaced gray levels per label.
pub fn label_montage(maps: &[&LabelMap], cols: usize) -> Result<Vec<u8>> {
    let tiles = maps
        .iter()
        .map(|m| {
            let vals: Vec<f64> = m
                .labels()
                .iter()
                .map(|&l| l as f64 / (m.num_labels().max(2) - 1) as f64)
                .collect();
            slice2d(&vals, m.grid().dims())
        })
        .collect();
    montage(tiles, cols)
}

fn montage(tiles: Vec<(usize, usize, Vec<f64>)>, cols: usize) -> Result<Vec<u8>> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::contract("montage needs at least one tile and one column"));
    }
    let (h, w) = (tiles[0].0, tiles[0].1);
    if tiles.iter().any(|t| (t.0, t.1) != (h, w)) {
        return Err(Error::contract("montage tiles differ in size"));
    }
    let cols = cols.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (lo, hi) = tiles
        .iter()
        .flat_map(|t| t.2.iter())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (width, height) = (cols * w, rows * h);
    let mut px = vec![0u8; width * height];
    for (k, (_, _, vals)) in tiles.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let v = vals[y * w + x];
                let g = if v.is_finite() {
                    ((v - lo) / span * 255.0).round()
                } else {
                    0.0
                };
                px[(r * h + y) * width + c * w + x] = g.clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart with axes, tick labels and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{xv:.3}</text>"#,
            sx(xv),
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{yv:.3}</text>"#,
            m - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        h - 14.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            w - m - 120.0,
            w - m - 100.0,
            w - m - 95.0,
            ly + 4.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
