//! Channel-augmented defect classification: 3/4/6-channel patch stacks, a
//! multinomial logistic-regression reference classifier, its binary
//! window-detector variant, model artifacts and evaluation tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::BinaryPatchClassifier;
use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::resize_bilinear;
use crate::periodicity::PeriodEstimate;
use crate::raster::{luma, BBox, InspectionImage, Raster};
use crate::reference::{DiffParams, PATCH};
use crate::selfref::{self, BackgroundMatch, BinaryMask, MatchParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelMode {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "RGB_G")]
    RgbG,
    #[serde(rename = "RGB_S")]
    RgbS,
    #[serde(rename = "RGB2")]
    Rgb2,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 4] = [ChannelMode::Rgb, ChannelMode::RgbG, ChannelMode::RgbS, ChannelMode::Rgb2];

    pub fn channels(self) -> usize {
        match self {
            ChannelMode::Rgb => 3,
            ChannelMode::RgbG | ChannelMode::RgbS => 4,
            ChannelMode::Rgb2 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Rgb => "RGB",
            ChannelMode::RgbG => "RGB_G",
            ChannelMode::RgbS => "RGB_S",
            ChannelMode::Rgb2 => "RGB2",
        }
    }

    pub fn needs_background(self) -> bool {
        matches!(self, ChannelMode::RgbG | ChannelMode::Rgb2)
    }

    pub fn needs_mask(self) -> bool {
        self == ChannelMode::RgbS
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ChannelMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::new(ErrorCode::InvalidConfig, format!("unknown channel mode {s:?}")))
    }
}

/// `K` planes of `size x size` floats in `[0, 1]`, plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub mode: ChannelMode,
    pub size: usize,
    pub data: Vec<f32>,
}

impl ChannelStack {
    pub fn channels(&self) -> usize {
        self.data.len() / (self.size * self.size)
    }

    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }
}

fn plane_of(rgb: &Raster<[u8; 3]>, c: usize) -> Raster<f32> {
    rgb.map(|p| p[c] as f32 / 255.0)
}

fn fit(plane: Raster<f32>) -> Raster<f32> {
    resize_bilinear(&plane, PATCH, PATCH)
}

/// Stacks a patch with its optional background patch and mask. Patches of
/// other sizes are resampled to 224 (bilinear; the mask by nearest pixel).
pub fn build_channel_stack(
    patch: &Raster<[u8; 3]>,
    background: Option<&Raster<[u8; 3]>>,
    mask: Option<&BinaryMask>,
    mode: ChannelMode,
) -> Result<ChannelStack> {
    let mut planes: Vec<Raster<f32>> = (0..3).map(|c| fit(plane_of(patch, c))).collect();
    let dims = (patch.width(), patch.height());
    match mode {
        ChannelMode::Rgb => {}
        ChannelMode::RgbG | ChannelMode::Rgb2 => {
            let bg = background.ok_or_else(|| {
                Error::new(ErrorCode::MissingBackground, format!("mode {mode} needs a matched background"))
            })?;
            if (bg.width(), bg.height()) != dims {
                return Err(Error::new(ErrorCode::MissingBackground, "background patch size differs from the patch"));
            }
            if mode == ChannelMode::RgbG {
                planes.push(fit(bg.map(|p| luma(p) as f32 / 255.0)));
            } else {
                planes.extend((0..3).map(|c| fit(plane_of(bg, c))));
            }
        }
        ChannelMode::RgbS => {
            let m = mask.ok_or_else(|| Error::new(ErrorCode::MissingMask, "mode RGB_S needs a segmentation mask"))?;
            let bits = &m.bits;
            if (bits.width(), bits.height()) != dims {
                return Err(Error::new(ErrorCode::MissingMask, "mask size differs from the patch"));
            }
            planes.push(Raster::from_fn(PATCH, PATCH, |x, y| {
                let sx = (x * bits.width()) / PATCH;
                let sy = (y * bits.height()) / PATCH;
                bits.get(sx, sy) as u8 as f32
            }));
        }
    }
    let data = planes.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(ChannelStack {
        mode,
        size: PATCH,
        data,
    })
}

/// Stack for a detected patch using its self-reference match and mask.
pub fn stack_from_match(
    image: &InspectionImage,
    defect_box: BBox,
    background: Option<&BackgroundMatch>,
    mask: Option<&BinaryMask>,
    mode: ChannelMode,
) -> Result<ChannelStack> {
    let rgb = image.to_rgb();
    let bg = background.map(|m| rgb.crop(m.bbox));
    build_channel_stack(&rgb.crop(defect_box), bg.as_ref(), mask, mode)
}

/// Ordered class names; `MISC` is mandatory, `FAS` is not a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalogue {
    pub names: Vec<String>,
}

impl ClassCatalogue {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        if names.len() < 2 {
            return Err(Error::new(ErrorCode::InvalidConfig, "catalogue needs at least two classes"));
        }
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::new(ErrorCode::InvalidConfig, format!("duplicate class {n:?}")));
            }
        }
        if !seen.contains("MISC") {
            return Err(Error::new(ErrorCode::InvalidConfig, "catalogue must include MISC"));
        }
        if seen.contains("FAS") {
            return Err(Error::new(ErrorCode::InvalidConfig, "FAS is the detector outcome, not a class"));
        }
        Ok(ClassCatalogue { names })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Mean-pool grid per side.
    pub grid: usize,
    pub bins: usize,
    /// Adds statistics of the patch minus its own copy shifted by one
    /// estimated period.
    pub shift_residual: bool,
    /// Adds statistics of the patch luma minus the background luma; only
    /// for modes carrying a background.
    #[serde(default)]
    pub background_residual: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            grid: 8,
            bins: 16,
            shift_residual: false,
            background_residual: false,
        }
    }
}

impl FeatureSpec {
    pub fn detector() -> Self {
        FeatureSpec {
            shift_residual: true,
            ..FeatureSpec::default()
        }
    }

    /// Classifier features for a mode.
    pub fn for_mode(mode: ChannelMode) -> Self {
        FeatureSpec {
            background_residual: mode.needs_background(),
            ..FeatureSpec::default()
        }
    }

    pub fn dim(&self, channels: usize) -> usize {
        channels * (self.grid * self.grid + self.bins)
            + if self.shift_residual { RESIDUAL_DIM } else { 0 }
            + if self.background_residual {
                self.grid * self.grid + BG_RESIDUAL_TAIL
            } else {
                0
            }
    }
}

const RESIDUAL_BINS: usize = 8;
const RESIDUAL_DIM: usize = RESIDUAL_BINS + 5;
const BG_RESIDUAL_TAIL: usize = RESIDUAL_DIM + 3;
/// Absolute luma difference counted as changed.
const BG_CHANGED: f32 = 20.0 / 255.0;
const MIN_LAG: usize = 16;

/// Column lag minimizing the mean absolute difference of the column
/// projection; flat tops go to the smallest lag.
pub fn patch_lag(gray: &[f32], size: usize) -> usize {
    let proj: Vec<f64> = (0..size)
        .map(|x| (0..size).map(|y| gray[y * size + x] as f64).sum::<f64>() / size as f64)
        .collect();
    let max_lag = size * 2 / 3;
    let amdf: Vec<f64> = (MIN_LAG..=max_lag)
        .map(|l| (0..size - l).map(|x| (proj[x + l] - proj[x]).abs()).sum::<f64>() / (size - l) as f64)
        .collect();
    let min = amdf.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = min * 1.05 + 1e-6;
    MIN_LAG + amdf.iter().position(|&d| d <= tol).expect("non-empty")
}

fn residual_features(gray: &[f32], size: usize) -> Vec<f64> {
    let lag = patch_lag(gray, size);
    let mut r: Vec<f32> = Vec::with_capacity(size * (size - lag));
    for y in 0..size {
        let row = &gray[y * size..(y + 1) * size];
        r.extend((0..size - lag).map(|x| (row[x + lag] - row[x]).abs()));
    }
    abs_residual_stats(r)
}

/// Log-binned histogram of absolute residuals plus mean and upper quantiles.
fn abs_residual_stats(mut r: Vec<f32>) -> Vec<f64> {
    let n = r.len() as f64;
    let mut hist = [0.0; RESIDUAL_BINS];
    // bins over [0, 0.5) in gray units, log-spaced from 1/255
    for &v in &r {
        let b = if v < 1.0 / 255.0 {
            0
        } else {
            (((v * 255.0).log2() as usize) + 1).min(RESIDUAL_BINS - 1)
        };
        hist[b] += 1.0 / n;
    }
    r.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let q = |f: f64| r[((n - 1.0) * f) as usize] as f64;
    let mean = r.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut out = hist.to_vec();
    out.extend([mean, q(0.9), q(0.99), q(0.999), r[r.len() - 1] as f64]);
    out
}

pub fn extract_features(stack: &ChannelStack, spec: &FeatureSpec) -> Vec<f64> {
    let size = stack.size;
    let cell = size / spec.grid;
    let mut out = Vec::with_capacity(spec.dim(stack.channels()));
    for k in 0..stack.channels() {
        let p = stack.plane(k);
        for gy in 0..spec.grid {
            for gx in 0..spec.grid {
                let mut s = 0.0f64;
                for y in gy * cell..(gy + 1) * cell {
                    s += p[y * size + gx * cell..y * size + (gx + 1) * cell].iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push(s / (cell * cell) as f64);
            }
        }
        let mut hist = vec![0.0; spec.bins];
        for &v in p {
            hist[((v.clamp(0.0, 1.0) * spec.bins as f32) as usize).min(spec.bins - 1)] += 1.0;
        }
        out.extend(hist.iter().map(|h| h / p.len() as f64));
    }
    let n = size * size;
    let luma_at = |base: usize| -> Vec<f32> {
        (0..n)
            .map(|i| 0.299 * stack.data[base + i] + 0.587 * stack.data[base + n + i] + 0.114 * stack.data[base + 2 * n + i])
            .collect()
    };
    if spec.shift_residual {
        out.extend(residual_features(&luma_at(0), size));
    }
    if spec.background_residual {
        let bg = match stack.mode {
            ChannelMode::RgbG => Some(stack.plane(3).to_vec()),
            ChannelMode::Rgb2 => Some(luma_at(3 * n)),
            _ => None,
        };
        match bg {
            Some(bg) => {
                let d: Vec<f32> = luma_at(0).iter().zip(&bg).map(|(a, b)| a - b).collect();
                out.extend(background_residual(&d, size, spec.grid));
            }
            None => out.extend(std::iter::repeat_n(0.0, spec.grid * spec.grid + BG_RESIDUAL_TAIL)),
        }
    }
    out
}

/// Pooled signed difference, absolute-difference statistics, and the
/// changed fraction with its mean signed value and spread.
fn background_residual(d: &[f32], size: usize, grid: usize) -> Vec<f64> {
    let cell = size / grid;
    let mut out = Vec::with_capacity(grid * grid + BG_RESIDUAL_TAIL);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut s = 0.0f64;
            for y in gy * cell..(gy + 1) * cell {
                s += d[y * size + gx * cell..y * size + (gx + 1) * cell].iter().map(|&v| v as f64).sum::<f64>();
            }
            out.push(s / (cell * cell) as f64);
        }
    }
    out.extend(abs_residual_stats(d.iter().map(|v| v.abs()).collect()));
    let changed: Vec<(usize, f32)> = d
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > BG_CHANGED)
        .map(|(i, &v)| (i, v))
        .collect();
    let frac = changed.len() as f64 / d.len() as f64;
    let mean = if changed.is_empty() {
        0.0
    } else {
        changed.iter().map(|c| c.1 as f64).sum::<f64>() / changed.len() as f64
    };
    // radius of gyration of the changed pixels, in patch widths
    let spread = if changed.is_empty() {
        0.0
    } else {
        let m = changed.len() as f64;
        let (sx, sy) = changed
            .iter()
            .fold((0.0, 0.0), |(sx, sy), c| (sx + (c.0 % size) as f64, sy + (c.0 / size) as f64));
        let (mx, my) = (sx / m, sy / m);
        let var = changed
            .iter()
            .map(|c| ((c.0 % size) as f64 - mx).powi(2) + ((c.0 / size) as f64 - my).powi(2))
            .sum::<f64>()
            / m;
        var.sqrt() / size as f64
    };
    out.extend([frac, mean, spread]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub version: String,
    pub mode: ChannelMode,
    pub class_list: Vec<String>,
    pub feature_spec: FeatureSpec,
}

/// Score distribution over the catalogue for one stack.
pub trait DefectClassifier: Send + Sync {
    fn predict(&self, stack: &ChannelStack) -> Result<Vec<f64>>;
    fn meta(&self) -> &ModelMeta;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub max_epochs: usize,
    pub grad_tol: f64,
    pub step: f64,
    pub l2: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_epochs: 100,
            grad_tol: 1e-5,
            step: 1.0,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before training and after every epoch.
    pub losses: Vec<f64>,
    pub epochs: usize,
    pub grad_norm: f64,
    pub train_accuracy: f64,
}

fn softmax_into(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Row-major `classes x (dim + 1)`; the last column is the bias.
fn logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let d1 = x.len() + 1;
    (0..classes)
        .map(|c| {
            let row = &w[c * d1..(c + 1) * d1];
            row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()]
        })
        .collect()
}

/// Mean cross-entropy plus `l2/2 * |W|^2` (bias excluded) and its gradient.
pub fn loss_and_grad(w: &[f64], x: &[Vec<f64>], y: &[usize], classes: usize, l2: f64) -> (f64, Vec<f64>) {
    let dim = x.first().map_or(0, |r| r.len());
    let d1 = dim + 1;
    let mut grad = vec![0.0; classes * d1];
    let mut loss = 0.0;
    let n = x.len() as f64;
    for (xi, &yi) in x.iter().zip(y) {
        let mut p = logits(w, xi, classes);
        softmax_into(&mut p);
        loss -= p[yi].max(1e-300).ln();
        for c in 0..classes {
            let g = (p[c] - if c == yi { 1.0 } else { 0.0 }) / n;
            let row = &mut grad[c * d1..(c + 1) * d1];
            for (r, v) in row[..dim].iter_mut().zip(xi) {
                *r += g * v;
            }
            row[dim] += g;
        }
    }
    loss /= n;
    for c in 0..classes {
        for j in 0..dim {
            let wv = w[c * d1 + j];
            loss += 0.5 * l2 * wv * wv;
            grad[c * d1 + j] += l2 * wv;
        }
    }
    (loss, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Full-batch gradient descent. A step that raises the loss is undone and
/// the step size halved, so the recorded losses never increase.
pub fn train_logistic(x: &[Vec<f64>], y: &[usize], classes: usize, params: &TrainParams, seed: u64) -> (Vec<f64>, TrainReport) {
    let dim = x.first().map_or(0, |r| r.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-3).expect("valid sigma");
    let mut w: Vec<f64> = (0..classes * (dim + 1)).map(|_| init.sample(&mut rng)).collect();
    let (mut loss, mut grad) = loss_and_grad(&w, x, y, classes, params.l2);
    let mut losses = vec![loss];
    let mut step = params.step;
    let mut epochs = 0;
    while epochs < params.max_epochs && norm(&grad) >= params.grad_tol {
        epochs += 1;
        loop {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let (l, g) = loss_and_grad(&cand, x, y, classes, params.l2);
            if l <= loss {
                w = cand;
                loss = l;
                grad = g;
                step *= 1.1;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        losses.push(loss);
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| argmax(&logits(&w, xi, classes)) == yi)
        .count();
    let report = TrainReport {
        losses,
        epochs,
        grad_norm: norm(&grad),
        train_accuracy: if x.is_empty() { 0.0 } else { correct as f64 / x.len() as f64 },
    };
    (w, report)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Max relative error between the analytic gradient and central
/// differences (`h = 1e-5`) at seeded random weights.
pub fn gradient_check(x: &[Vec<f64>], y: &[usize], classes: usize, seed: u64) -> f64 {
    let dim = x.first().map_or(0, |r| r.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.1).expect("valid sigma");
    let w: Vec<f64> = (0..classes * (dim + 1)).map(|_| init.sample(&mut rng)).collect();
    let l2 = 1e-3;
    let (_, analytic) = loss_and_grad(&w, x, y, classes, l2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp[i] += h;
        let mut wm = w.clone();
        wm[i] -= h;
        let numeric = (loss_and_grad(&wp, x, y, classes, l2).0 - loss_and_grad(&wm, x, y, classes, l2).0) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Standardized-feature multinomial logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub meta: ModelMeta,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"PIMODEL\0";
const FORMAT_VERSION: u32 = 1;

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict_features(&self, f: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let mut p = logits(&self.weights, &z, self.meta.class_list.len());
        softmax_into(&mut p);
        p
    }

    pub fn fit(meta: ModelMeta, x: &[Vec<f64>], y: &[usize], params: &TrainParams, seed: u64) -> (Self, TrainReport) {
        let dim = x.first().map_or(0, |r| r.len());
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let (weights, report) = train_logistic(&z, y, meta.class_list.len(), params, seed);
        (
            LogisticModel {
                meta,
                mean,
                scale,
                weights,
            },
            report,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for block in [&self.mean, &self.scale, &self.weights] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::new(ErrorCode::BadArtifact, m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated artifact"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a model artifact"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported artifact version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let meta: ModelMeta =
            serde_json::from_slice(take(meta_len)?).map_err(|e| bad(&format!("metadata: {e}")))?;
        let mut blocks = Vec::new();
        for _ in 0..3 {
            let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let raw = take(n.checked_mul(8).ok_or_else(|| bad("block size overflow"))?)?;
            blocks.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let weights = blocks.pop().expect("3 blocks");
        let scale = blocks.pop().expect("3 blocks");
        let mean = blocks.pop().expect("3 blocks");
        let dim = meta.feature_spec.dim(meta.mode.channels());
        if mean.len() != dim || scale.len() != dim || weights.len() != meta.class_list.len() * (dim + 1) {
            return Err(bad("weight shapes do not match the metadata"));
        }
        Ok(LogisticModel {
            meta,
            mean,
            scale,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
        Self::from_bytes(&bytes)
    }
}

impl DefectClassifier for LogisticModel {
    fn predict(&self, stack: &ChannelStack) -> Result<Vec<f64>> {
        if stack.mode != self.meta.mode {
            return Err(Error::new(
                ErrorCode::ClassifierFailure,
                format!("model expects {} stacks, got {}", self.meta.mode, stack.mode),
            ));
        }
        let p = self.predict_features(&extract_features(stack, &self.meta.feature_spec));
        debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Ok(p)
    }

    fn meta(&self) -> &ModelMeta {
        &self.meta
    }
}

/// Requires at least 10 samples of every catalogue class.
pub fn train_reference_classifier(
    samples: &[(ChannelStack, usize)],
    catalogue: &ClassCatalogue,
    mode: ChannelMode,
    params: &TrainParams,
    seed: u64,
    model_id: &str,
    version: &str,
) -> Result<(LogisticModel, TrainReport)> {
    let mut counts = vec![0usize; catalogue.len()];
    for (s, y) in samples {
        if s.mode != mode {
            return Err(Error::new(ErrorCode::InvalidConfig, format!("{} stack in a {mode} training set", s.mode)));
        }
        *counts.get_mut(*y).ok_or_else(|| Error::new(ErrorCode::InvalidConfig, format!("label {y} outside catalogue")))? += 1;
    }
    if let Some((i, c)) = counts.iter().enumerate().find(|(_, &c)| c < 10) {
        return Err(Error::new(
            ErrorCode::InsufficientData,
            format!("class {} has {c} training samples, need 10", catalogue.names[i]),
        ));
    }
    let spec = FeatureSpec::for_mode(mode);
    let x: Vec<Vec<f64>> = samples.iter().map(|(s, _)| extract_features(s, &spec)).collect();
    let y: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
    let meta = ModelMeta {
        model_id: model_id.to_string(),
        version: version.to_string(),
        mode,
        class_list: catalogue.names.clone(),
        feature_spec: spec,
    };
    Ok(LogisticModel::fit(meta, &x, &y, params, seed))
}

/// Binary window classifier built on the reference model with the
/// shift-residual features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePatchDetector {
    pub model: LogisticModel,
}

pub fn window_stack(image: &InspectionImage, window: BBox) -> Result<ChannelStack> {
    let patch = match &image.pixels {
        crate::raster::Pixels::Rgb(r) => r.crop(window),
        crate::raster::Pixels::Gray(g) => g.crop(window).map(|v| [v, v, v]),
    };
    build_channel_stack(&patch, None, None, ChannelMode::Rgb)
}

impl BinaryPatchClassifier for ReferencePatchDetector {
    fn score(&self, image: &InspectionImage, window: BBox) -> Result<f64> {
        let stack = window_stack(image, window)?;
        Ok(self.model.predict_features(&extract_features(&stack, &self.model.meta.feature_spec))[1])
    }
}

pub const DETECTOR_CLASSES: [&str; 2] = ["no_defect", "defect"];

/// Trains on labeled windows; needs at least 10 of each label.
pub fn train_patch_detector(
    windows: &[(&InspectionImage, BBox, bool)],
    params: &TrainParams,
    seed: u64,
    model_id: &str,
    version: &str,
) -> Result<(ReferencePatchDetector, TrainReport)> {
    let pos = windows.iter().filter(|w| w.2).count();
    for (name, c) in [("defect", pos), ("no_defect", windows.len() - pos)] {
        if c < 10 {
            return Err(Error::new(
                ErrorCode::InsufficientData,
                format!("class {name} has {c} training windows, need 10"),
            ));
        }
    }
    let spec = FeatureSpec::detector();
    let x: Vec<Vec<f64>> = windows
        .iter()
        .map(|(img, b, _)| window_stack(img, *b).map(|s| extract_features(&s, &spec)))
        .collect::<Result<_>>()?;
    let y: Vec<usize> = windows.iter().map(|w| w.2 as usize).collect();
    let meta = ModelMeta {
        model_id: model_id.to_string(),
        version: version.to_string(),
        mode: ChannelMode::Rgb,
        class_list: DETECTOR_CLASSES.iter().map(|s| s.to_string()).collect(),
        feature_spec: spec,
    };
    let (model, report) = LogisticModel::fit(meta, &x, &y, params, seed);
    Ok((ReferencePatchDetector { model }, report))
}

/// One labeled defect patch to classify.
pub struct EvalSample<'a> {
    pub image_id: String,
    pub image: &'a InspectionImage,
    pub defect_box: BBox,
    pub truth: usize,
    pub estimate: &'a PeriodEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrepareParams {
    pub matching: MatchParams,
    pub diff: DiffParams,
}

/// Builds the stack a mode needs, running the background match and the
/// segmentation only when the mode uses them.
pub fn prepare_stack(
    image: &InspectionImage,
    defect_box: BBox,
    estimate: &PeriodEstimate,
    mode: ChannelMode,
    params: &PrepareParams,
) -> Result<ChannelStack> {
    if mode == ChannelMode::Rgb {
        return stack_from_match(image, defect_box, None, None, mode);
    }
    if mode.needs_mask() {
        let seg = selfref::segment_region(image, defect_box, estimate, &params.matching, &params.diff)?;
        return stack_from_match(image, defect_box, None, Some(&seg.mask), mode);
    }
    let gray = image.to_gray();
    let found = match selfref::match_background_gray(&gray, defect_box, estimate.period, &params.matching) {
        Ok(m) => Some(m),
        Err(e) if e.code == ErrorCode::NoMatch => None,
        Err(e) => return Err(e),
    };
    let m = background_or_fallback(&gray, defect_box, estimate.period, found)?;
    stack_from_match(image, defect_box, Some(&m), None, mode)
}

/// The found match, else the best period-shifted placement regardless of
/// its score.
pub fn background_or_fallback(
    gray: &Raster<u8>,
    defect_box: BBox,
    period: usize,
    found: Option<BackgroundMatch>,
) -> Result<BackgroundMatch> {
    if let Some(m) = found {
        return Ok(m);
    }
    let loose = MatchParams {
        theta_ncc: f64::NEG_INFINITY,
        exhaustive: false,
    };
    selfref::match_background_gray(gray, defect_box, period, &loose)
        .map_err(|e| Error::new(ErrorCode::MissingBackground, e.message))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub modes: Vec<ChannelMode>,
    pub classes: Vec<String>,
    /// `per_class[c][m]`: accuracy in percent, `None` without test samples.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub class_counts: Vec<usize>,
    pub overall: Vec<f64>,
    pub time_ms: Vec<f64>,
}

impl EvaluationTable {
    pub fn overall_for(&self, mode: ChannelMode) -> Option<f64> {
        self.modes.iter().position(|&m| m == mode).map(|i| self.overall[i])
    }

    pub fn time_for(&self, mode: ChannelMode) -> Option<f64> {
        self.modes.iter().position(|&m| m == mode).map(|i| self.time_ms[i])
    }

    /// Rows are classes, then `overall` and `time_ms`; one column per mode.
    pub fn to_delimited(&self, sep: char) -> String {
        let mut out = String::from("class");
        for m in &self.modes {
            out.push(sep);
            out.push_str(m.name());
        }
        out.push('\n');
        for (c, name) in self.classes.iter().enumerate() {
            out.push_str(name);
            for v in &self.per_class[c] {
                out.push(sep);
                match v {
                    Some(a) => out.push_str(&format!("{a:.2}")),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        for (label, vals) in [("overall", &self.overall), ("time_ms", &self.time_ms)] {
            out.push_str(label);
            for v in vals.iter() {
                out.push(sep);
                out.push_str(&format!("{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn check_disjoint(train_ids: &[String], test_ids: &[String]) -> Result<()> {
    let train: HashSet<&String> = train_ids.iter().collect();
    if let Some(id) = test_ids.iter().find(|id| train.contains(id)) {
        return Err(Error::new(
            ErrorCode::OverlappingSplits,
            format!("image {id} is in both train and test"),
        ));
    }
    Ok(())
}

/// Per-class and overall accuracy plus mean per-sample time (stack
/// preparation and prediction) for each classifier's mode.
pub fn evaluate_classifier(
    classifiers: &[&dyn DefectClassifier],
    samples: &[EvalSample<'_>],
    catalogue: &ClassCatalogue,
    params: &PrepareParams,
) -> Result<EvaluationTable> {
    if samples.is_empty() {
        return Err(Error::new(ErrorCode::EmptySplit, "no test samples"));
    }
    let k = catalogue.len();
    let mut class_counts = vec![0usize; k];
    for s in samples {
        class_counts[s.truth] += 1;
    }
    let mut per_class = vec![Vec::new(); k];
    let mut overall = Vec::new();
    let mut time_ms = Vec::new();
    let mut modes = Vec::new();
    for clf in classifiers {
        let mode = clf.meta().mode;
        if clf.meta().class_list != catalogue.names {
            return Err(Error::new(ErrorCode::InvalidConfig, "classifier classes differ from the catalogue"));
        }
        let mut correct = vec![0usize; k];
        let start = Instant::now();
        for s in samples {
            let stack = prepare_stack(s.image, s.defect_box, s.estimate, mode, params)?;
            let p = clf.predict(&stack)?;
            if argmax(&p) == s.truth {
                correct[s.truth] += 1;
            }
        }
        let elapsed = start.elapsed().as_secs_f64() * 1000.0 / samples.len() as f64;
        for c in 0..k {
            per_class[c].push((class_counts[c] > 0).then(|| 100.0 * correct[c] as f64 / class_counts[c] as f64));
        }
        overall.push(100.0 * correct.iter().sum::<usize>() as f64 / samples.len() as f64);
        time_ms.push(elapsed);
        modes.push(mode);
    }
    Ok(EvaluationTable {
        modes,
        classes: catalogue.names.clone(),
        per_class,
        class_counts,
        overall,
        time_ms,
    })
}

/// Counts of `(true, predicted)` pairs, useful in reports.
pub fn confusion(truth: &[usize], pred: &[usize]) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *m.entry((t, p)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rgb(seed: u64, size: usize) -> Raster<[u8; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn channel_counts() {
        let p = rgb(1, 224);
        let bg = rgb(2, 224);
        let mask = BinaryMask::empty(224, 224);
        for mode in ChannelMode::ALL {
            let s = build_channel_stack(&p, Some(&bg), Some(&mask), mode).unwrap();
            assert_eq!(s.channels(), mode.channels());
            assert_eq!(s.data.len(), 224 * 224 * mode.channels());
        }
        assert_eq!(ChannelMode::Rgb2.channels(), 6);
    }

    #[test]
    fn rgb_stack_is_normalized_patch() {
        let p = rgb(3, 224);
        let s = build_channel_stack(&p, None, None, ChannelMode::Rgb).unwrap();
        for (i, px) in p.data().iter().enumerate() {
            for c in 0..3 {
                assert_eq!(s.plane(c)[i], px[c] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn mask_channel_is_binary_and_empty_mask_is_zero() {
        let p = rgb(4, 224);
        let s = build_channel_stack(&p, None, Some(&BinaryMask::empty(224, 224)), ChannelMode::RgbS).unwrap();
        assert!(s.plane(3).iter().all(|&v| v == 0.0));
        let big = rgb(5, 448);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = BinaryMask::new(Raster::from_fn(448, 448, |_, _| rng.random_bool(0.5)));
        let s = build_channel_stack(&big, None, Some(&m), ChannelMode::RgbS).unwrap();
        assert_eq!(s.size, 224);
        assert!(s.plane(3).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn missing_inputs_are_errors() {
        let p = rgb(7, 224);
        assert_eq!(
            build_channel_stack(&p, None, None, ChannelMode::RgbG).unwrap_err().code,
            ErrorCode::MissingBackground
        );
        assert_eq!(
            build_channel_stack(&p, None, None, ChannelMode::Rgb2).unwrap_err().code,
            ErrorCode::MissingBackground
        );
        assert_eq!(
            build_channel_stack(&p, None, None, ChannelMode::RgbS).unwrap_err().code,
            ErrorCode::MissingMask
        );
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ChannelMode::ALL {
            assert_eq!(m.name().parse::<ChannelMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("RGBX".parse::<ChannelMode>().is_err());
    }

    #[test]
    fn catalogue_rules() {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(ClassCatalogue::new(names(&["blob", "MISC"])).is_ok());
        assert!(ClassCatalogue::new(names(&["blob", "scratch"])).is_err());
        assert!(ClassCatalogue::new(names(&["blob", "blob", "MISC"])).is_err());
        assert!(ClassCatalogue::new(names(&["MISC"])).is_err());
        assert!(ClassCatalogue::new(names(&["blob", "MISC", "FAS"])).is_err());
    }

    fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_batch(3, 32, 6, 4);
        let err = gradient_check(&x, &y, 4, 3);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_weight_gradient_closed_form() {
        let x = vec![vec![0.0, 1.0, 0.0]];
        let y = vec![2usize];
        let classes = 3;
        let w = vec![0.0; classes * 4];
        let (_, g) = loss_and_grad(&w, &x, &y, classes, 0.5);
        for c in 0..classes {
            let coeff = 1.0 / 3.0 - if c == 2 { 1.0 } else { 0.0 };
            for j in 0..3 {
                assert_eq!(g[c * 4 + j], coeff * x[0][j]);
            }
            assert_eq!(g[c * 4 + 3], coeff);
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let (x, y) = random_batch(8, 10, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (l1, g1) = loss_and_grad(&w, &x, &y, 3, 1e-3);
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let (l2, g2) = loss_and_grad(&w, &x2, &y2, 3, 1e-3);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn separable(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let off = if c == 0 { -2.0 } else { 2.0 };
            x.push(vec![off + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
        (x, y)
    }

    fn meta2() -> ModelMeta {
        ModelMeta {
            model_id: "m".into(),
            version: "1".into(),
            mode: ChannelMode::Rgb,
            class_list: vec!["a".into(), "MISC".into()],
            feature_spec: FeatureSpec::default(),
        }
    }

    #[test]
    fn separable_set_is_learned_and_loss_never_rises() {
        let (x, y) = separable(40);
        let (w, rep) = train_logistic(&x, &y, 2, &TrainParams::default(), 5);
        assert_eq!(rep.train_accuracy, 1.0);
        assert!(rep.losses.windows(2).all(|p| p[1] <= p[0]));
        assert!(rep.epochs <= 100);
        assert_eq!(w.len(), 2 * 3);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (x, y) = separable(30);
        let (a, _) = LogisticModel::fit(meta2(), &x, &y, &TrainParams::default(), 9);
        let (b, _) = LogisticModel::fit(meta2(), &x, &y, &TrainParams::default(), 9);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn feature_length_matches_dim_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patch = Raster::from_fn(224, 224, |_, _| [rng.random(), rng.random(), rng.random()]);
        let mask = BinaryMask::new(Raster::from_fn(224, 224, |x, _| x < 20));
        for mode in ChannelMode::ALL {
            let stack = build_channel_stack(&patch, Some(&patch), Some(&mask), mode).unwrap();
            let spec = FeatureSpec::for_mode(mode);
            let f = extract_features(&stack, &spec);
            assert_eq!(f.len(), spec.dim(mode.channels()), "{mode}");
            if mode.needs_background() {
                let tail = &f[f.len() - spec.grid * spec.grid - BG_RESIDUAL_TAIL..];
                // background identical to the patch: luma rounding only
                assert!(tail[..64].iter().all(|v| v.abs() < 0.01), "{mode}");
                assert_eq!(tail[tail.len() - 3], 0.0);
            }
        }
    }

    fn small_model() -> LogisticModel {
        let spec = FeatureSpec::default();
        let dim = spec.dim(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        LogisticModel {
            meta: ModelMeta {
                class_list: vec!["blob".into(), "scratch".into(), "MISC".into()],
                ..meta2()
            },
            mean: vec![0.1; dim],
            scale: vec![1.0; dim],
            weights: (0..3 * (dim + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn artifact_round_trip_and_corruption() {
        let m = small_model();
        let bytes = m.to_bytes();
        assert_eq!(LogisticModel::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(LogisticModel::from_bytes(&bad).unwrap_err().code, ErrorCode::BadArtifact);
        assert_eq!(
            LogisticModel::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().code,
            ErrorCode::BadArtifact
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        m.save(&p).unwrap();
        assert_eq!(LogisticModel::load(&p).unwrap(), m);
    }

    #[test]
    fn scores_sum_to_one() {
        let m = small_model();
        for seed in 0..20 {
            let s = build_channel_stack(&rgb(seed, 224), None, None, ChannelMode::Rgb).unwrap();
            let p = m.predict(&s).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn insufficient_data_names_the_class() {
        let cat = ClassCatalogue::new(vec!["blob".into(), "MISC".into()]).unwrap();
        let stack = build_channel_stack(&rgb(1, 224), None, None, ChannelMode::Rgb).unwrap();
        let samples: Vec<(ChannelStack, usize)> = (0..15).map(|i| (stack.clone(), (i < 12) as usize)).collect();
        let e = train_reference_classifier(&samples, &cat, ChannelMode::Rgb, &TrainParams::default(), 1, "m", "1")
            .unwrap_err();
        assert_eq!(e.code, ErrorCode::InsufficientData);
        assert!(e.message.contains("blob"));
    }

    #[test]
    fn lag_of_striped_patch() {
        let size = 224;
        let g: Vec<f32> = (0..size * size).map(|i| if (i % size) % 40 < 10 { 0.8 } else { 0.2 }).collect();
        assert_eq!(patch_lag(&g, size), 40);
        let f = residual_features(&g, size);
        assert_eq!(f.len(), RESIDUAL_DIM);
        assert!(f[RESIDUAL_DIM - 1] < 1e-6);
    }

    #[test]
    fn table_layout() {
        let t = EvaluationTable {
            modes: vec![ChannelMode::Rgb, ChannelMode::RgbG],
            classes: vec!["blob".into(), "MISC".into()],
            per_class: vec![vec![Some(50.0), Some(100.0)], vec![None, None]],
            class_counts: vec![2, 0],
            overall: vec![50.0, 100.0],
            time_ms: vec![1.0, 2.0],
        };
        let text = t.to_delimited('\t');
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class\tRGB\tRGB_G");
        assert_eq!(lines[1], "blob\t50.00\t100.00");
        assert_eq!(lines[2], "MISC\t-\t-");
        assert_eq!(lines[3], "overall\t50.00\t100.00");
        assert!(lines[4].starts_with("time_ms"));
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn overlapping_splits_detected() {
        let a = vec!["x".to_string(), "y".to_string()];
        assert!(check_disjoint(&a, &["z".to_string()]).is_ok());
        assert_eq!(
            check_disjoint(&a, &["y".to_string()]).unwrap_err().code,
            ErrorCode::OverlappingSplits
        );
    }
}
