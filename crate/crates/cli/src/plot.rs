//! Static PNG line charts: one stacked panel per CSV column, sharing the
//! first column as the x axis. Panels run top to bottom in column order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const PANEL_HEIGHT: u32 = 180;
const MARGIN: u32 = 12;
const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_series(path: &Path, columns: &[String]) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        bail!("{}: need an x column and at least one value column", path.display());
    }
    let rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let wanted: Vec<usize> = if columns.is_empty() {
        (1..headers.len())
            .filter(|&c| rows.iter().all(|r| r[c].parse::<f64>().is_ok()))
            .collect()
    } else {
        columns
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .with_context(|| format!("{}: no column '{name}'", path.display()))
            })
            .collect::<Result<_>>()?
    };
    wanted
        .into_iter()
        .map(|c| {
            let points = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let x = r[0].parse::<f64>().unwrap_or(i as f64);
                    let y = r[c]
                        .parse::<f64>()
                        .with_context(|| format!("{}: column '{}' is not numeric", path.display(), headers[c]))?;
                    Ok((x, y))
                })
                .collect::<Result<_>>()?;
            Ok(Series { name: headers[c].clone(), points })
        })
        .collect()
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn render(series: &[Series]) -> RgbImage {
    let height = PANEL_HEIGHT * series.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(WIDTH, height, Rgb([255, 255, 255]));
    let grey = Rgb([200, 200, 200]);
    let (x_lo, x_hi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    for (k, s) in series.iter().enumerate() {
        let top = k as f64 * PANEL_HEIGHT as f64 + MARGIN as f64;
        let bottom = (k + 1) as f64 * PANEL_HEIGHT as f64 - MARGIN as f64;
        let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
        for (a, b) in [
            ((left, top), (right, top)),
            ((left, bottom), (right, bottom)),
            ((left, top), (left, bottom)),
            ((right, top), (right, bottom)),
        ] {
            line(&mut img, a, b, grey);
        }
        let (y_lo, y_hi) = range(s.points.iter().map(|p| p.1));
        let map = |(x, y): (f64, f64)| {
            (
                left + (x - x_lo) / (x_hi - x_lo) * (right - left),
                bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top),
            )
        };
        if y_lo < 0.0 && y_hi > 0.0 {
            line(&mut img, map((x_lo, 0.0)), map((x_hi, 0.0)), grey);
        }
        let color = Rgb(COLORS[k % COLORS.len()]);
        for w in s.points.windows(2) {
            if w[0].1.is_finite() && w[1].1.is_finite() {
                line(&mut img, map(w[0]), map(w[1]), color);
            }
        }
    }
    img
}

pub fn plot_csv(input: &Path, out: &Path, columns: &[String]) -> Result<()> {
    let series = read_series(input, columns)?;
    if series.is_empty() {
        bail!("{}: no numeric columns to plot", input.display());
    }
    for (k, s) in series.iter().enumerate() {
        let (lo, hi) = range(s.points.iter().map(|p| p.1));
        log::info!("panel {k}: {} in [{lo:.4e}, {hi:.4e}]", s.name);
    }
    render(&series)
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
