//! Minimal PNG line chart for the alpha sweep.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 48;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const SERIES: Rgb<u8> = Rgb([31, 119, 180]);
const REFERENCE: Rgb<u8> = Rgb([214, 39, 40]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if thick {
            put(img, x, y + 1, c);
            put(img, x + 1, y, c);
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

fn marker(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    for dy in -3..=3 {
        for dx in -3..=3 {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// Accuracy against fixed alpha on a log axis, with the adaptive result as
/// a dashed horizontal reference line. Horizontal grid lines sit at every
/// 5 accuracy points.
pub fn alpha_chart(fixed: &[(f64, f64)], adaptive: f64, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    let ys = fixed
        .iter()
        .map(|p| p.1)
        .chain(adaptive.is_finite().then_some(adaptive));
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
        (lo.min(y), hi.max(y))
    });
    let (lo, hi) = if lo.is_finite() {
        (
            (lo / 5.0).floor() * 5.0 - 5.0,
            (hi / 5.0).ceil() * 5.0 + 5.0,
        )
    } else {
        (0.0, 100.0)
    };
    let (x_lo, x_hi) = fixed
        .iter()
        .map(|p| p.0.log10())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    let span_x = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let (w, h) = (WIDTH as i64 - 2 * MARGIN, HEIGHT as i64 - 2 * MARGIN);
    let px = |a: f64| MARGIN + (((a.log10() - x_lo) / span_x) * w as f64).round() as i64;
    let py = |v: f64| HEIGHT as i64 - MARGIN - (((v - lo) / (hi - lo)) * h as f64).round() as i64;

    let mut g = lo;
    while g <= hi + 1e-9 {
        line(&mut img, (MARGIN, py(g)), (MARGIN + w, py(g)), GRID, false);
        g += 5.0;
    }
    let origin = (MARGIN, HEIGHT as i64 - MARGIN);
    line(&mut img, origin, (MARGIN + w, origin.1), AXIS, false);
    line(&mut img, origin, (MARGIN, MARGIN), AXIS, false);
    for &(a, _) in fixed {
        line(
            &mut img,
            (px(a), origin.1),
            (px(a), origin.1 + 6),
            AXIS,
            false,
        );
    }
    if adaptive.is_finite() {
        let y = py(adaptive);
        let mut x = MARGIN;
        while x < MARGIN + w {
            line(
                &mut img,
                (x, y),
                ((x + 8).min(MARGIN + w), y),
                REFERENCE,
                true,
            );
            x += 14;
        }
    }
    let pts: Vec<(i64, i64)> = fixed
        .iter()
        .filter(|p| p.1.is_finite())
        .map(|&(a, v)| (px(a), py(v)))
        .collect();
    for pair in pts.windows(2) {
        line(&mut img, pair[0], pair[1], SERIES, true);
    }
    for &p in &pts {
        marker(&mut img, p, SERIES);
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}
