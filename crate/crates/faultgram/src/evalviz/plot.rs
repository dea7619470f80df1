//! Minimal deterministic plot rendering: just enough raster drawing to emit
//! a confusion heatmap, embedding scatters, and training curves as PNGs.

use crate::macnn::EpochStats;
use image::{Rgb, RgbImage};
use ndarray::Array2;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([210, 210, 210]);

/// Class colors, cycled when there are more classes than entries.
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([214, 39, 40]),   // red
    Rgb([31, 119, 180]),  // blue
    Rgb([44, 160, 44]),   // green
    Rgb([255, 127, 14]),  // orange
    Rgb([148, 103, 189]), // purple
    Rgb([23, 190, 207]),  // cyan
    Rgb([227, 119, 194]), // pink
    Rgb([140, 86, 75]),   // brown
];

fn class_color(label: usize) -> Rgb<u8> {
    PALETTE[label % PALETTE.len()]
}

fn blank(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, WHITE)
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
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

fn draw_disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: Rgb<u8>) {
    for y in (cy - r)..=(cy + r) {
        for x in (cx - r)..=(cx + r) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r
                && x >= 0
                && y >= 0
                && (x as u32) < img.width()
                && (y as u32) < img.height()
            {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// White-to-deep-blue ramp for counts in `[0, 1]`.
fn heat_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
    Rgb([lerp(255, 8), lerp(255, 48), lerp(255, 107)])
}

/// Confusion-matrix heatmap; cell brightness scales with count / max.
pub fn heatmap(counts: &Array2<u64>) -> RgbImage {
    let k = counts.nrows() as u32;
    let cell = 56u32;
    let side = k * (cell + 1) + 1;
    let mut img = blank(side, side);
    fill_rect(&mut img, 0, 0, side, side, GRID);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    for i in 0..k {
        for j in 0..k {
            let t = counts[(i as usize, j as usize)] as f64 / max;
            let x0 = j * (cell + 1) + 1;
            let y0 = i * (cell + 1) + 1;
            fill_rect(&mut img, x0, y0, x0 + cell, y0 + cell, heat_color(t));
        }
    }
    img
}

/// Scatter plot of 2-D points colored by label.
pub fn scatter(points: &Array2<f64>, labels: &[usize]) -> RgbImage {
    let (side, margin) = (480u32, 24.0);
    let mut img = blank(side, side);
    let bounds = |d: usize| {
        points.column(d).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    };
    let (xmin, xmax) = bounds(0);
    let (ymin, ymax) = bounds(1);
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let scale = (side as f64 - 2.0 * margin) / xspan.max(yspan);
    for (i, row) in points.rows().into_iter().enumerate() {
        let x = margin + (row[0] - xmin) * scale;
        // Flip the vertical axis: plots grow upward.
        let y = side as f64 - margin - (row[1] - ymin) * scale;
        draw_disc(&mut img, x.round() as i64, y.round() as i64, 3, class_color(labels[i]));
    }
    img
}

/// Training curves: losses scaled together against their maximum, accuracy
/// on its natural [0, 1] scale. Train loss blue, val loss orange, accuracy
/// green.
pub fn curves(history: &[EpochStats]) -> RgbImage {
    let (width, height, margin) = (640u32, 360u32, 32i64);
    let mut img = blank(width, height);
    let (x0, y0) = (margin, margin);
    let (x1, y1) = (width as i64 - margin, height as i64 - margin);
    draw_line(&mut img, x0, y0, x0, y1, BLACK);
    draw_line(&mut img, x0, y1, x1, y1, BLACK);
    draw_line(&mut img, x1, y0, x1, y1, GRID);
    draw_line(&mut img, x0, y0, x1, y0, GRID);

    let loss_max = history
        .iter()
        .flat_map(|s| [s.train_loss, s.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9);
    let px = |i: usize| {
        if history.len() < 2 {
            (x0 + x1) / 2
        } else {
            x0 + ((x1 - x0) as f64 * i as f64 / (history.len() - 1) as f64).round() as i64
        }
    };
    let py = |frac: f64| y1 - ((y1 - y0) as f64 * frac.clamp(0.0, 1.0)).round() as i64;

    let series: [(&dyn Fn(&EpochStats) -> f64, Rgb<u8>); 3] = [
        (&|s| s.train_loss / loss_max, Rgb([31, 119, 180])),
        (&|s| s.val_loss / loss_max, Rgb([255, 127, 14])),
        (&|s| s.val_accuracy, Rgb([44, 160, 44])),
    ];
    for (value, color) in series {
        let mut prev: Option<(i64, i64)> = None;
        for (i, s) in history.iter().enumerate() {
            let pt = (px(i), py(value(s)));
            draw_disc(&mut img, pt.0, pt.1, 2, color);
            if let Some(p) = prev {
                draw_line(&mut img, p.0, p.1, pt.0, pt.1, color);
            }
            prev = Some(pt);
        }
    }
    img
}
