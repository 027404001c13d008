//! Minimal PNG line plots for metrics logs. No axes labels beyond ticks;
//! these are quick-look artifacts emitted by `eval`, not publication plots.

use crate::data::write_png;
use crate::error::Result;
use std::path::Path;

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
    pub color: [u8; 3],
}

pub const SERIES_COLORS: [[u8; 3]; 5] = [
    [220, 60, 60],   // red
    [60, 140, 220],  // blue
    [60, 170, 80],   // green
    [200, 140, 40],  // orange
    [120, 120, 120], // gray
];

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, rgb: vec![255; w * h * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            self.set(x.round() as i64, y.round() as i64, c);
            self.set(x.round() as i64 + 1, y.round() as i64, c);
        }
    }
}

/// Render the series onto a fixed-size canvas and write a PNG.
pub fn plot_series(path: &Path, series: &[Series]) -> Result<()> {
    let (w, h) = (640usize, 400usize);
    let (ml, mr, mt, mb) = (40.0, 10.0, 10.0, 25.0);
    let mut canvas = Canvas::new(w, h);
    let max_len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let mut max_v = f64::MIN;
    let mut min_v: f64 = 0.0;
    for s in series {
        for &v in s.values {
            if v.is_finite() {
                max_v = max_v.max(v);
                min_v = min_v.min(v);
            }
        }
    }
    if max_len < 2 || max_v <= min_v {
        // degenerate input still produces a blank plot file
        return write_png(path, &canvas.rgb, w, h);
    }
    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let xof = |i: usize| ml + plot_w * i as f64 / (max_len - 1) as f64;
    let yof = |v: f64| mt + plot_h * (1.0 - (v - min_v) / (max_v - min_v));

    // frame and horizontal ticks
    let axis = [0u8, 0, 0];
    canvas.line(ml, mt, ml, mt + plot_h, axis);
    canvas.line(ml, mt + plot_h, ml + plot_w, mt + plot_h, axis);
    for k in 1..=4 {
        let y = mt + plot_h * k as f64 / 4.0;
        for x in (ml as usize..(ml + plot_w) as usize).step_by(8) {
            canvas.set(x as i64, y as i64, [210, 210, 210]);
        }
    }

    for s in series {
        for pair in (0..s.values.len()).collect::<Vec<_>>().windows(2) {
            let (i, j) = (pair[0], pair[1]);
            if s.values[i].is_finite() && s.values[j].is_finite() {
                canvas.line(xof(i), yof(s.values[i]), xof(j), yof(s.values[j]), s.color);
            }
        }
    }
    // legend swatches along the bottom
    for (k, s) in series.iter().enumerate() {
        let x0 = ml + 90.0 * k as f64;
        for dx in 0..12 {
            canvas.set((x0 + dx as f64) as i64, (h as f64 - 12.0) as i64, s.color);
            canvas.set((x0 + dx as f64) as i64, (h as f64 - 11.0) as i64, s.color);
        }
        let _ = s.name; // names live in the caller's log output
    }
    write_png(path, &canvas.rgb, w, h)
}
