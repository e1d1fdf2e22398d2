//! Minimal raster charts: precision-recall curves and grouped bar charts.
//! Axes span [0, 1] on both dimensions, with light grid lines every 0.1.
//! Charts carry no text; series are told apart by colour.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const SERIES_COLORS: [[u8; 3]; 5] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];

const WIDTH: u32 = 480;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Canvas {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let grid = Rgb([225, 225, 225]);
        for k in 0..=10 {
            let f = k as f64 / 10.0;
            let (x, _) = to_px(f, 0.0);
            let (_, y) = to_px(0.0, f);
            for t in MARGIN..=HEIGHT - MARGIN {
                img.put_pixel(x, t, grid);
            }
            for t in MARGIN..=WIDTH - MARGIN {
                img.put_pixel(t, y, grid);
            }
        }
        let axis = Rgb([0, 0, 0]);
        for t in MARGIN..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, t, axis);
        }
        for t in MARGIN..=WIDTH - MARGIN {
            img.put_pixel(t, HEIGHT - MARGIN, axis);
        }
        Canvas { img }
    }

    fn line(&mut self, a: (u32, u32), b: (u32, u32), color: [u8; 3]) {
        let (mut x0, mut y0) = (a.0 as i64, a.1 as i64);
        let (x1, y1) = (b.0 as i64, b.1 as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
                let (px, py) = (x0 + ox, y0 + oy);
                if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                    self.img.put_pixel(px as u32, py as u32, Rgb(color));
                }
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect(&mut self, x0: u32, x1: u32, y0: u32, y1: u32, color: [u8; 3]) {
        for x in x0..x1.min(WIDTH) {
            for y in y0..y1.min(HEIGHT) {
                self.img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn to_px(x: f64, y: f64) -> (u32, u32) {
    let w = (WIDTH - 2 * MARGIN) as f64;
    let h = (HEIGHT - 2 * MARGIN) as f64;
    let px = MARGIN as f64 + x.clamp(0.0, 1.0) * w;
    let py = (HEIGHT - MARGIN) as f64 - y.clamp(0.0, 1.0) * h;
    (px.round() as u32, py.round() as u32)
}

/// One step-shaped PR curve per series.
pub fn pr_curves(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut c = Canvas::new();
    for (k, pts) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let mut prev = (0.0, pts.first().map(|p| p.1).unwrap_or(0.0));
        for &(r, p) in pts {
            c.line(to_px(prev.0, prev.1), to_px(r, prev.1), color);
            c.line(to_px(r, prev.1), to_px(r, p), color);
            prev = (r, p);
        }
    }
    c.img.save(path)?;
    Ok(())
}

/// Groups of bars; `None` values are drawn as a short grey stub.
pub fn bar_chart(path: &Path, groups: &[Vec<Option<f64>>]) -> Result<()> {
    let mut c = Canvas::new();
    let ng = groups.len().max(1) as u32;
    let slot = (WIDTH - 2 * MARGIN) / ng;
    for (g, bars) in groups.iter().enumerate() {
        let nb = bars.len().max(1) as u32;
        let bw = (slot * 3 / 4) / nb;
        let start = MARGIN + g as u32 * slot + slot / 8;
        for (b, v) in bars.iter().enumerate() {
            let x0 = start + b as u32 * bw + 1;
            let (color, value) = match v {
                Some(v) => (SERIES_COLORS[b % SERIES_COLORS.len()], *v),
                None => ([160, 160, 160], 0.01),
            };
            let (_, top) = to_px(0.0, value);
            c.rect(x0, x0 + bw.saturating_sub(2).max(1), top, HEIGHT - MARGIN, color);
        }
    }
    c.img.save(path)?;
    Ok(())
}
