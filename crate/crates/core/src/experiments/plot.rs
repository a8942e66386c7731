//! Minimal raster plots written as PNG: score fields, scatters, bar
//! histograms and line curves.

use std::path::Path;

use crate::error::Result;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const BLUE: Rgb = [40, 90, 220];
pub const RED: Rgb = [220, 40, 40];
pub const GREEN: Rgb = [30, 160, 60];
pub const GRAY: Rgb = [150, 150, 150];
pub const ORANGE: Rgb = [240, 140, 20];

/// Diverging blue-white-red map on `t` in [0, 1].
pub fn blue_white_red(t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.5 {
        let s = t * 2.0;
        [lerp(40.0, 255.0, s), lerp(90.0, 255.0, s), lerp(220.0, 255.0, s)]
    } else {
        let s = (t - 0.5) * 2.0;
        [lerp(255.0, 220.0, s), lerp(255.0, 40.0, s), lerp(255.0, 40.0, s)]
    }
}

/// Axis-aligned data window mapped onto a canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Frame {
    pub fn square(half: f64) -> Self {
        Self {
            xmin: -half,
            xmax: half,
            ymin: -half,
            ymax: half,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![background; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Paint a row-major `gh x gw` grid of values (row 0 = top) with a colour map.
    pub fn heatmap(&mut self, values: &[f64], gh: usize, gw: usize, vmin: f64, vmax: f64, cmap: fn(f64) -> Rgb) {
        let span = (vmax - vmin).max(f64::MIN_POSITIVE);
        for py in 0..self.height {
            for px in 0..self.width {
                let gy = py * gh / self.height;
                let gx = px * gw / self.width;
                let v = values[gy * gw + gx];
                self.pixels[py * self.width + px] = cmap((v - vmin) / span);
            }
        }
    }

    pub fn to_pixel(&self, frame: &Frame, x: f64, y: f64) -> (i64, i64) {
        let px = (x - frame.xmin) / (frame.xmax - frame.xmin) * self.width as f64;
        let py = (frame.ymax - y) / (frame.ymax - frame.ymin) * self.height as f64;
        (px.floor() as i64, py.floor() as i64)
    }

    pub fn point(&mut self, frame: &Frame, x: f64, y: f64, radius: i64, c: Rgb) {
        let (cx, cy) = self.to_pixel(frame, x, y);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.set(cx + dx, cy + dy, c);
                }
            }
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=n {
            let x = x0 + (x1 - x0) * i / n;
            let y = y0 + (y1 - y0) * i / n;
            self.set(x, y, c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        image::save_buffer(
            path,
            &raw,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}

/// Side-by-side bar histograms sharing one y scale (one colour per series).
pub fn bar_histograms(series: &[(&[u64], Rgb)], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, WHITE);
    let bins = series.iter().map(|s| s.0.len()).max().unwrap_or(1).max(1);
    let top = series
        .iter()
        .flat_map(|s| s.0.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let slot = width as f64 / bins as f64;
    let bar = slot / series.len().max(1) as f64;
    for (k, (counts, colour)) in series.iter().enumerate() {
        for (i, &v) in counts.iter().enumerate() {
            let x0 = (i as f64 * slot + k as f64 * bar) as i64;
            let x1 = (x0 as f64 + bar - 1.0).max(x0 as f64) as i64;
            // log scale keeps long tails visible
            let h = ((1.0 + v as f64).ln() / (1.0 + top).ln() * (height as f64 - 2.0)) as i64;
            if v > 0 {
                c.fill_rect(x0, height as i64 - 1 - h, x1, height as i64 - 1, *colour);
            }
        }
    }
    c
}

/// Polylines over a shared frame.
pub fn line_plot(curves: &[(&[(f64, f64)], Rgb)], frame: &Frame, width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, WHITE);
    let (ax0, ay0) = c.to_pixel(frame, frame.xmin, 0.0);
    let (ax1, _) = c.to_pixel(frame, frame.xmax, 0.0);
    c.line((ax0, ay0), (ax1, ay0), GRAY);
    for (pts, colour) in curves {
        for w in pts.windows(2) {
            let a = c.to_pixel(frame, w[0].0, w[0].1);
            let b = c.to_pixel(frame, w[1].0, w[1].1);
            c.line(a, b, *colour);
        }
    }
    c
}
