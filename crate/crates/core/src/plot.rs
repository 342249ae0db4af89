//! Minimal PNG line plots with numeric tick labels.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const LEFT: i64 = 64;
const RIGHT: i64 = 16;
const TOP: i64 = 16;
const BOTTOM: i64 = 36;
const SCALE: i64 = 2;

const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const LINE: Rgb<u8> = Rgb([31, 119, 180]);

/// 3x5 bitmaps, one row per entry, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

struct Canvas(RgbImage);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            self.0.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            for ox in 0..thick {
                for oy in 0..thick {
                    self.put(x + ox - thick / 2, y + oy - thick / 2, c);
                }
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

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 4 * SCALE - SCALE
    }

    fn text(&mut self, s: &str, x: i64, y: i64) {
        for (i, ch) in s.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            let ox = x + i as i64 * 4 * SCALE;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        for a in 0..SCALE {
                            for b in 0..SCALE {
                                self.put(ox + col * SCALE + a, y + r as i64 * SCALE + b, BLACK);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn label(v: f64, span: f64) -> String {
    let decimals = if span >= 10.0 { 1 } else if span >= 1.0 { 2 } else { 3 };
    format!("{v:.decimals$}")
}

/// Draws `ys` against `xs`; non-finite points are skipped.
pub fn line_plot(path: &Path, xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidArgument("plot needs equally sized, non-empty series".into()));
    }
    let finite: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(&x, &y)| (x, y)).collect();
    let (mut ylo, mut yhi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, y)| (a.min(y), b.max(y)));
    if !ylo.is_finite() {
        (ylo, yhi) = (0.0, 1.0);
    }
    let pad = if yhi > ylo { 0.08 * (yhi - ylo) } else { 0.05 * ylo.abs().max(1.0) };
    (ylo, yhi) = (ylo - pad, yhi + pad);
    let (xlo, xhi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (xlo, xhi) = if xhi > xlo { (xlo, xhi) } else { (xlo - 1.0, xhi + 1.0) };
    let (pw, ph) = (WIDTH as i64 - LEFT - RIGHT, HEIGHT as i64 - TOP - BOTTOM);
    let px = |x: f64| LEFT + ((x - xlo) / (xhi - xlo) * (pw - 20) as f64).round() as i64 + 10;
    let py = |y: f64| TOP + ph - ((y - ylo) / (yhi - ylo) * ph as f64).round() as i64;

    let mut c = Canvas(RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])));
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = py(v);
        c.line((LEFT, y), (LEFT + pw, y), GRID, 1);
        let s = label(v, yhi - ylo);
        c.text(&s, LEFT - 6 - Canvas::text_width(&s), y - 5);
    }
    for &x in xs {
        let s = label(x, xhi - xlo);
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        c.line((px(x), TOP + ph), (px(x), TOP + ph + 4), BLACK, 1);
        c.text(&s, px(x) - Canvas::text_width(&s) / 2, TOP + ph + 10);
    }
    c.line((LEFT, TOP), (LEFT, TOP + ph), BLACK, 1);
    c.line((LEFT, TOP + ph), (LEFT + pw, TOP + ph), BLACK, 1);
    for w in finite.windows(2) {
        c.line((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), LINE, 2);
    }
    for &(x, y) in &finite {
        for dx in -3..=3 {
            for dy in -3..=3 {
                c.put(px(x) + dx, py(y) + dy, LINE);
            }
        }
    }
    let mut bytes = Vec::new();
    c.0.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    crate::volume::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png_and_skips_missing_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        line_plot(&path, &[2.0, 4.0, 8.0], &[0.9, f64::NAN, 0.7]).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| *p == LINE));
        line_plot(&path, &[1.0], &[f64::NAN]).unwrap();
        assert!(line_plot(&path, &[], &[]).is_err());
    }

    #[test]
    fn every_label_character_has_a_glyph() {
        for s in [label(-12.345, 20.0), label(0.5, 0.1), label(3.0, 2.0)] {
            assert!(s.chars().all(|c| glyph(c).is_some()), "{s}");
        }
    }
}
