//! Minimal PNG charts: bars per category and a polyline over stages. No
//! text is drawn; values go to the table and TSV output.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;
const PALETTE: [Rgb<u8>; 4] = [Rgb([66, 133, 244]), Rgb([219, 68, 55]), Rgb([244, 180, 0]), Rgb([15, 157, 88])];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn y_of(v: f64, max: f64) -> u32 {
    let span = (H - MARGIN - MARGIN / 2) as f64;
    let frac = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    H - MARGIN - (frac * span).round() as u32
}

pub fn bar_chart(bars: &[(String, f64)], path: &Path) -> Result<()> {
    let mut img = canvas();
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let slot = (W - 2 * MARGIN) / bars.len().max(1) as u32;
    for (i, (_, v)) in bars.iter().enumerate() {
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 5;
        let x1 = x0 + slot * 3 / 5;
        let top = y_of(*v, max);
        for x in x0..x1.min(W) {
            for y in top..H - MARGIN {
                img.put_pixel(x, y, PALETTE[i % PALETTE.len()]);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn line_chart(values: &[f64], path: &Path) -> Result<()> {
    let mut img = canvas();
    let max = values.iter().copied().fold(0.0, f64::max);
    let n = values.len().max(2) - 1;
    let step = (W - 2 * MARGIN) as f64 / n as f64;
    let pts: Vec<(i64, i64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| ((MARGIN as f64 + 1.0 + i as f64 * step) as i64, y_of(v, max) as i64))
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1], PALETTE[0]);
    }
    for &(x, y) in &pts {
        for dx in -2..=2 {
            for dy in -2..=2 {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                    img.put_pixel(px as u32, py as u32, PALETTE[1]);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
