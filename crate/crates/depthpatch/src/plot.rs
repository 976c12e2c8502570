//! Minimal PNG charts drawn straight into an RGB buffer. There is no text
//! rendering; axes run from the data minimum to maximum and the numbers live
//! in the JSON/markdown next to each chart.

use std::path::Path;

use image::{Rgb, RgbImage};

use depthpatch_core::{DisparityMap, ImageTensor};

use crate::error::{AppError, AppResult};

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 24;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const INK: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> AppResult<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| AppError::io(path, e))?;
    crate::io::write_atomic(path, &bytes)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        put(img, x.round() as i64, y.round() as i64, c);
        put(img, x.round() as i64, y.round() as i64 + 1, c);
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared x index.
pub fn line_chart(path: &Path, series: &[Vec<f64>]) -> AppResult<()> {
    let mut img = canvas();
    let (lo, hi) = range(series.iter().flatten().copied());
    let len = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let px = |i: usize| MARGIN as f64 + 1.0 + i as f64 / (len - 1) as f64 * (W - MARGIN * 3 / 2 - 2) as f64;
    let py = |v: f64| (H - MARGIN - 1) as f64 - (v - lo) / (hi - lo) * (H - MARGIN * 3 / 2 - 2) as f64;
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (px(i), py(v)))
            .collect();
        for w in pts.windows(2) {
            segment(&mut img, w[0], w[1], INK[k % INK.len()]);
        }
    }
    save(&img, path)
}

/// Groups of bars; group `g` holds one bar per series.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>]) -> AppResult<()> {
    let mut img = canvas();
    let hi = groups.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let inner_w = (W - MARGIN * 3 / 2 - 2) as f64;
    let slot = inner_w / groups.len().max(1) as f64;
    for (g, bars) in groups.iter().enumerate() {
        let bw = slot * 0.8 / bars.len().max(1) as f64;
        for (k, &v) in bars.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 {
                continue;
            }
            let x0 = MARGIN as f64 + 1.0 + g as f64 * slot + slot * 0.1 + k as f64 * bw;
            let top = (H - MARGIN) as f64 - v / hi * (H - MARGIN * 3 / 2 - 2) as f64;
            for x in x0.round() as i64..(x0 + bw - 1.0).round() as i64 {
                for y in top.round() as i64..(H - MARGIN) as i64 {
                    put(&mut img, x, y, INK[k % INK.len()]);
                }
            }
        }
    }
    save(&img, path)
}

/// Bin counts of `values` over `[lo, hi]`; the last bin is closed.
pub fn bin_counts(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        if v.is_finite() && v >= lo && v <= hi {
            let i = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            counts[i.min(bins - 1)] += 1;
        }
    }
    counts
}

pub fn histogram(path: &Path, values: &[f64], bins: usize, lo: f64, hi: f64) -> AppResult<()> {
    let counts = bin_counts(values, bins, lo, hi);
    let groups: Vec<Vec<f64>> = counts.into_iter().map(|c| vec![c as f64]).collect();
    bar_chart(path, &groups)
}

/// Near is bright yellow, far is dark purple.
fn colormap(v: f64) -> Rgb<u8> {
    let stops = [[13.0, 8.0, 135.0], [204.0, 71.0, 120.0], [240.0, 249.0, 33.0]];
    let t = v.clamp(0.0, 1.0) * 2.0;
    let i = (t as usize).min(1);
    let f = t - i as f64;
    let c = |k: usize| (stops[i][k] + f * (stops[i + 1][k] - stops[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// A row of the before/after figure.
pub struct GridRow<'a> {
    pub clean_image: &'a ImageTensor,
    pub clean: &'a DisparityMap,
    pub adv_image: &'a ImageTensor,
    pub adv: &'a DisparityMap,
}

/// Clean image, clean disparity, attacked image, attacked disparity per row.
pub fn disparity_grid(path: &Path, rows: &[GridRow]) -> AppResult<()> {
    let Some(first) = rows.first() else {
        return Err(AppError::Data("no rows for the example grid".into()));
    };
    let (h, w) = first.clean_image.shape();
    let gap = 4;
    let mut img = RgbImage::from_pixel(
        (4 * w + 3 * gap) as u32,
        (rows.len() * h + (rows.len() - 1) * gap) as u32,
        BG,
    );
    for (r, row) in rows.iter().enumerate() {
        let oy = r * (h + gap);
        for (k, tile) in [0usize, 1, 2, 3].iter().enumerate() {
            let ox = k * (w + gap);
            for y in 0..h {
                for x in 0..w {
                    let px = match tile {
                        0 | 2 => {
                            let im = if *tile == 0 { row.clean_image } else { row.adv_image };
                            let c = |ch| (im.get(ch, y, x) * 255.0).round() as u8;
                            Rgb([c(0), c(1), c(2)])
                        }
                        1 => colormap(row.clean.get(y, x)),
                        _ => colormap(row.adv.get(y, x)),
                    };
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, px);
                }
            }
        }
    }
    save(&img, path)
}
