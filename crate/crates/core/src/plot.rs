//! Tiny binary PPM images: loss curves and confusion heatmaps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix4;

#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Pixmap {
            width,
            height,
            rgb: fill.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            self.set(x.round() as usize, y.round() as usize, c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

const WHITE: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [60, 60, 60];
const CURVE: [u8; 3] = [200, 40, 40];

/// Loss per epoch on a linear axis from 0 to the largest value.
pub fn loss_curve(losses: &[f64], width: usize, height: usize) -> Pixmap {
    let mut img = Pixmap::new(width, height, WHITE);
    let m = 10usize;
    if width <= 2 * m || height <= 2 * m {
        return img;
    }
    let (x0, y0, x1, y1) = (m, m, width - m, height - m);
    img.line((x0 as f64, y1 as f64), (x1 as f64, y1 as f64), AXIS);
    img.line((x0 as f64, y0 as f64), (x0 as f64, y1 as f64), AXIS);
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    let top = finite.iter().copied().fold(0.0, f64::max);
    if finite.is_empty() || top <= 0.0 {
        return img;
    }
    let px = |i: usize| {
        let span = (losses.len().max(2) - 1) as f64;
        x0 as f64 + (x1 - x0) as f64 * i as f64 / span
    };
    let py = |v: f64| y1 as f64 - (y1 - y0) as f64 * (v / top).clamp(0.0, 1.0);
    for i in 0..losses.len() {
        let p = (px(i), py(losses[i]));
        img.fill_rect(p.0 as usize - 1, p.1 as usize - 1, p.0 as usize + 2, p.1 as usize + 2, CURVE);
        if i > 0 {
            img.line((px(i - 1), py(losses[i - 1])), p, CURVE);
        }
    }
    img
}

/// Row-normalized 4x4 heatmap, rows are true classes; darker is larger.
pub fn confusion_heatmap(cm: &ConfusionMatrix4, cell: usize) -> Pixmap {
    let mut img = Pixmap::new(4 * cell, 4 * cell, WHITE);
    for (t, row) in cm.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (p, &n) in row.iter().enumerate() {
            let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            let v = (255.0 * (1.0 - share)).round() as u8;
            img.fill_rect(p * cell, t * cell, (p + 1) * cell, (t + 1) * cell, [v, v, 255]);
        }
    }
    img
}
