//! Low-level raster operations shared by localization and segmentation:
//! box smoothing, Otsu binarization, disk morphology and connected
//! component labeling.

use serde::{Deserialize, Serialize};

use crate::raster::{BBox, Raster};

/// Absolute difference of two equally sized gray planes.
pub fn abs_diff(a: &Raster<u8>, b: &Raster<u8>) -> Raster<f32> {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as i16 - q as i16).unsigned_abs() as f32)
        .collect();
    Raster::from_vec(a.width(), a.height(), data).expect("dims")
}

/// Summed-area table with one row/column of zero padding.
pub struct Integral {
    width: usize,
    table: Vec<f64>,
}

impl Integral {
    pub fn new(src: &Raster<f32>) -> Self {
        Self::from_fn(src.width(), src.height(), |x, y| src.get(x, y) as f64)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let w1 = width + 1;
        let mut table = vec![0.0; w1 * (height + 1)];
        for y in 0..height {
            let mut run = 0.0;
            for x in 0..width {
                run += f(x, y);
                table[(y + 1) * w1 + x + 1] = table[y * w1 + x + 1] + run;
            }
        }
        Integral { width, table }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    #[inline]
    pub fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w1 = self.width + 1;
        self.table[y1 * w1 + x1] - self.table[y0 * w1 + x1] - self.table[y1 * w1 + x0] + self.table[y0 * w1 + x0]
    }
}

/// Mean over a `(2r+1)^2` window; windows are truncated at the border.
pub fn box_blur(src: &Raster<f32>, radius: usize) -> Raster<f32> {
    if radius == 0 {
        return src.clone();
    }
    let (w, h) = (src.width(), src.height());
    let ii = Integral::new(src);
    Raster::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius + 1).min(w);
        let y1 = (y + radius + 1).min(h);
        (ii.sum(x0, y0, x1, y1) / ((x1 - x0) * (y1 - y0)) as f64) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Otsu's threshold, never below `floor` intensity units.
    Otsu { floor: f32 },
    Fixed { value: f32 },
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Otsu { floor: 10.0 }
    }
}

/// Otsu's threshold over a 256-bin histogram spanning `[0, max]`.
/// Returns `None` for a constant plane.
pub fn otsu_threshold(src: &Raster<f32>) -> Option<f32> {
    let (lo, hi) = src
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-6) {
        return None;
    }
    const BINS: usize = 256;
    let scale = (BINS - 1) as f32 / (hi - lo);
    let mut hist = [0u64; BINS];
    for &v in src.data() {
        hist[((v - lo) * scale).round() as usize] += 1;
    }
    let total = src.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_var) = (0usize, -1.0f64);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // Pixels strictly above the bin boundary are foreground.
    Some(lo + (best as f32 + 0.5) / scale)
}

pub fn binarize(src: &Raster<f32>, mode: ThresholdMode) -> Raster<bool> {
    let t = match mode {
        ThresholdMode::Fixed { value } => value,
        ThresholdMode::Otsu { floor } => match otsu_threshold(src) {
            Some(t) => t.max(floor),
            None => return src.map(|_| false),
        },
    };
    src.map(|v| v > t)
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn morph(src: &Raster<bool>, radius: usize, erode: bool) -> Raster<bool> {
    if radius == 0 {
        return src.clone();
    }
    let (w, h) = (src.width() as isize, src.height() as isize);
    let offs = disk_offsets(radius);
    Raster::from_fn(src.width(), src.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut inside = offs.iter().filter_map(|&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| src.get(nx as usize, ny as usize))
        });
        if erode {
            inside.all(|v| v)
        } else {
            inside.any(|v| v)
        }
    })
}

pub fn erode(src: &Raster<bool>, radius: usize) -> Raster<bool> {
    morph(src, radius, true)
}

pub fn dilate(src: &Raster<bool>, radius: usize) -> Raster<bool> {
    morph(src, radius, false)
}

/// Opening followed by closing with a disk of the given radius.
pub fn open_close(src: &Raster<bool>, radius: usize) -> Raster<bool> {
    let opened = dilate(&erode(src, radius), radius);
    erode(&dilate(&opened, radius), radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: u32,
    pub area: usize,
    pub bbox: BBox,
    pub centroid: (f64, f64),
}

/// Labels foreground pixels; label 0 is background, components are
/// numbered from 1 in raster-scan order of their first pixel.
pub fn label_components(src: &Raster<bool>, conn: Connectivity) -> (Raster<u32>, Vec<Component>) {
    let (w, h) = (src.width(), src.height());
    let mut labels = Raster::filled(w, h, 0u32);
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    let neigh: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if !src.get(x, y) || labels.get(x, y) != 0 {
                continue;
            }
            let label = comps.len() as u32 + 1;
            labels.set(x, y, label);
            stack.push((x, y));
            let (mut area, mut sx, mut sy) = (0usize, 0.0f64, 0.0f64);
            let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
            while let Some((cx, cy)) = stack.pop() {
                area += 1;
                sx += cx as f64;
                sy += cy as f64;
                x0 = x0.min(cx);
                x1 = x1.max(cx);
                y0 = y0.min(cy);
                y1 = y1.max(cy);
                for &(dx, dy) in neigh {
                    let nx = cx as isize + dx;
                    let ny = cy as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if src.get(nx, ny) && labels.get(nx, ny) == 0 {
                        labels.set(nx, ny, label);
                        stack.push((nx, ny));
                    }
                }
            }
            comps.push(Component {
                label,
                area,
                bbox: BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                centroid: (sx / area as f64, sy / area as f64),
            });
        }
    }
    (labels, comps)
}

pub fn count_components(src: &Raster<bool>, conn: Connectivity) -> usize {
    label_components(src, conn).1.len()
}

/// Bilinear resampling of an `f32` plane (pixel-center aligned).
pub fn resize_bilinear(src: &Raster<f32>, width: usize, height: usize) -> Raster<f32> {
    if src.width() == width && src.height() == height {
        return src.clone();
    }
    let sx = src.width() as f64 / width as f64;
    let sy = src.height() as f64 / height as f64;
    Raster::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width() - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height() - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(src.width() - 1), (y0 + 1).min(src.height() - 1));
        let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let top = src.get(x0, y0) * (1.0 - ax) + src.get(x1, y0) * ax;
        let bot = src.get(x0, y1) * (1.0 - ax) + src.get(x1, y1) * ax;
        top * (1.0 - ay) + bot * ay
    })
}
