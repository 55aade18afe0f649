//! Synthetic periodic panel images with pixel-exact defect ground truth.
//!
//! A panel is a small RGB cell (`period` x `row_period`) tiled over the
//! image, then scaled by a global brightness factor and per-channel hue
//! factors, then perturbed by clamped Gaussian noise. Defects are
//! rasterized geometries whose pixels receive a fixed intensity delta.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::raster::{BBox, ImageMeta, InspectionImage, Pixels, Raster};
use crate::reference::{assign_splits, write_manifest, ManifestRecord, PatchLabel, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub start: usize,
    pub width: usize,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [u8; 3],
}

/// Contents of one repeat cell; later layers paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecipe {
    pub base: [u8; 3],
    pub stripes: Vec<Stripe>,
    pub rects: Vec<CellRect>,
    pub row_period: usize,
}

fn tinted(rng: &mut impl Rng, lo: u8, hi: u8) -> [u8; 3] {
    let level = rng.random_range(lo..=hi) as i32;
    let tint = |rng: &mut dyn rand::RngCore| (level + rng.random_range(-8..=8)).clamp(0, 255) as u8;
    [tint(rng), tint(rng), tint(rng)]
}

impl PatternRecipe {
    /// Random TFT-like cell: data lines, a gate line, a pixel electrode and
    /// a small switching element, with levels kept inside `[60, 170]`.
    pub fn random(period: usize, rng: &mut impl Rng) -> Self {
        let row_period = rng.random_range(48..=96);
        let base = tinted(rng, 62, 85);
        let mut stripes = Vec::new();
        let n_stripes = 1;
        let mut start = rng.random_range(0..period / 8 + 1);
        for _ in 0..n_stripes {
            let width = rng.random_range((period / 8).max(2)..=(period / 4).max(3));
            stripes.push(Stripe {
                start: start % period,
                width,
                color: tinted(rng, 130, 170),
            });
            start += width + rng.random_range(period / 8..=period / 3);
        }
        let gate_h = rng.random_range(4..=8);
        let gate_y = rng.random_range(0..row_period - gate_h);
        let mut rects = vec![CellRect {
            x: 0,
            y: gate_y,
            w: period,
            h: gate_h,
            color: tinted(rng, 60, 75),
        }];
        let ew = (period as f64 * rng.random_range(0.35..0.55)) as usize;
        let eh = (row_period as f64 * rng.random_range(0.6..0.85)) as usize;
        let ex = rng.random_range(0..period - ew);
        let ey = (gate_y + gate_h + 2) % row_period;
        rects.push(CellRect {
            x: ex,
            y: ey,
            w: ew,
            h: eh.min(row_period - ey),
            color: tinted(rng, 125, 150),
        });
        let tw = (period / 10).max(3);
        let tx = rng.random_range(0..period - tw);
        let th = rng.random_range(5..=10).min(row_period);
        rects.push(CellRect {
            x: tx,
            y: rng.random_range(0..=row_period - th),
            w: tw,
            h: th,
            color: tinted(rng, 140, 170),
        });
        PatternRecipe {
            base,
            stripes,
            rects,
            row_period,
        }
    }

    pub fn sample(&self, period: usize, x: usize, y: usize) -> [u8; 3] {
        let cx = x % period;
        let cy = y % self.row_period;
        let mut c = self.base;
        for s in &self.stripes {
            let rel = (cx + period - s.start) % period;
            if rel < s.width {
                c = s.color;
            }
        }
        for r in &self.rects {
            if cx >= r.x && cx < r.x + r.w && cy >= r.y && cy < r.y + r.h {
                c = r.color;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub period: usize,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub recipe: PatternRecipe,
    /// Global brightness factor is drawn from `[1 - j, 1 + j]`.
    pub brightness_jitter: f64,
    /// Each channel factor is drawn from `[1 - j, 1 + j]`.
    pub hue_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PanelSpec {
    /// 1024x768 panel with a random recipe for the given period.
    pub fn standard(period: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7e);
        let width = 1024;
        PanelSpec {
            period,
            count: width / period,
            width,
            height: 768,
            recipe: PatternRecipe::random(period, &mut rng),
            brightness_jitter: 0.2,
            hue_jitter: 0.1,
            noise_sigma: 2.0,
            seed,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::new(ErrorCode::SpecInvalid, m));
        if self.period < 2 || self.count < 1 || self.period * self.count > self.width {
            return bad(format!(
                "period {} x count {} does not fit width {}",
                self.period, self.count, self.width
            ));
        }
        if self.width < 2 || self.height < 2 {
            return bad(format!("dims {}x{}", self.width, self.height));
        }
        if !(0.0..=0.5).contains(&self.brightness_jitter) || !(0.0..=0.5).contains(&self.hue_jitter) {
            return bad("jitter outside [0, 0.5]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.recipe.row_period == 0 {
            return bad("row period 0".into());
        }
        Ok(())
    }

    /// Brightness and per-channel factors derived from the seed.
    pub fn jitter_factors(&self) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let b = 1.0 + rng.random_range(-1.0..=1.0) * self.brightness_jitter;
        let mut f = [b; 3];
        for c in &mut f {
            *c *= 1.0 + rng.random_range(-1.0..=1.0) * self.hue_jitter;
        }
        f
    }
}

/// Renders the periodic background; noise is applied last.
pub fn gen_background(spec: &PanelSpec) -> Result<InspectionImage> {
    spec.validate()?;
    let factors = spec.jitter_factors();
    // Noise stream is independent of the jitter draw.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let normal = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma"));
    let cell: Vec<[f64; 3]> = (0..spec.recipe.row_period)
        .flat_map(|y| (0..spec.period).map(move |x| (x, y)))
        .map(|(x, y)| {
            let c = spec.recipe.sample(spec.period, x, y);
            [c[0] as f64 * factors[0], c[1] as f64 * factors[1], c[2] as f64 * factors[2]]
        })
        .collect();
    let mut data = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        let cy = y % spec.recipe.row_period;
        for x in 0..spec.width {
            let c = cell[cy * spec.period + x % spec.period];
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let mut v = c[ch];
                if let Some(n) = &normal {
                    v += n.sample(&mut rng);
                }
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            data.push(px);
        }
    }
    InspectionImage::new(
        Pixels::Rgb(Raster::from_vec(spec.width, spec.height, data)?),
        ImageMeta::default(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefectClass {
    #[serde(rename = "blob")]
    Blob,
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "particle")]
    Particle,
    #[serde(rename = "stain")]
    Stain,
    #[serde(rename = "MISC")]
    Misc,
}

impl DefectClass {
    pub const ALL: [DefectClass; 5] = [
        DefectClass::Blob,
        DefectClass::Scratch,
        DefectClass::Particle,
        DefectClass::Stain,
        DefectClass::Misc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Blob => "blob",
            DefectClass::Scratch => "scratch",
            DefectClass::Particle => "particle",
            DefectClass::Stain => "stain",
            DefectClass::Misc => "MISC",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn catalogue() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Geometry {
    Disk { cx: i64, cy: i64, r: i64 },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, width: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Multi { parts: Vec<Geometry> },
}

impl Geometry {
    fn contains(&self, x: i64, y: i64) -> bool {
        match self {
            Geometry::Disk { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
            Geometry::Line { x0, y0, x1, y1, width } => {
                let (px, py) = (x as f64, y as f64);
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                };
                let (qx, qy) = (x0 + t * dx, y0 + t * dy);
                (px - qx).powi(2) + (py - qy).powi(2) <= (width / 2.0).powi(2)
            }
            Geometry::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Geometry::Multi { parts } => parts.iter().any(|p| p.contains(x, y)),
        }
    }

    /// Conservative integer bounds `(x0, y0, x1, y1)`, inclusive.
    fn bounds(&self) -> (i64, i64, i64, i64) {
        match self {
            Geometry::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Geometry::Line { x0, y0, x1, y1, width } => {
                let h = width / 2.0 + 1.0;
                (
                    (x0.min(*x1) - h).floor() as i64,
                    (y0.min(*y1) - h).floor() as i64,
                    (x0.max(*x1) + h).ceil() as i64,
                    (y0.max(*y1) + h).ceil() as i64,
                )
            }
            Geometry::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(*ry) + 1.0;
                (
                    (cx - r).floor() as i64,
                    (cy - r).floor() as i64,
                    (cx + r).ceil() as i64,
                    (cy + r).ceil() as i64,
                )
            }
            Geometry::Multi { parts } => parts.iter().map(|p| p.bounds()).fold(
                (i64::MAX, i64::MAX, i64::MIN, i64::MIN),
                |a, b| (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3)),
            ),
        }
    }

    /// Rasterizes at pixel centers; fails if any covered pixel leaves the frame.
    pub fn rasterize(&self, width: usize, height: usize) -> Result<Raster<bool>> {
        let (bx0, by0, bx1, by1) = self.bounds();
        let mut mask = Raster::filled(width, height, false);
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                if !self.contains(x, y) {
                    continue;
                }
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    return Err(Error::new(
                        ErrorCode::OutOfBounds,
                        format!("defect pixel ({x}, {y}) outside {width}x{height}"),
                    ));
                }
                mask.set(x as usize, y as usize, true);
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub class: DefectClass,
    pub geometry: Geometry,
    /// Added to every channel of every covered pixel.
    pub delta: i32,
}

impl DefectSpec {
    /// Random defect of the given class centred at `(cx, cy)`.
    pub fn random(class: DefectClass, cx: f64, cy: f64, rng: &mut impl Rng) -> Self {
        let (geometry, delta) = match class {
            DefectClass::Blob => (
                Geometry::Disk {
                    cx: cx as i64,
                    cy: cy as i64,
                    r: rng.random_range(14..=24),
                },
                -rng.random_range(45..=70),
            ),
            DefectClass::Particle => (
                Geometry::Disk {
                    cx: cx as i64,
                    cy: cy as i64,
                    r: rng.random_range(6..=10),
                },
                rng.random_range(55..=80),
            ),
            DefectClass::Scratch => {
                let len: f64 = rng.random_range(80.0..150.0);
                let a: f64 = rng.random_range(0.0..PI);
                let (dx, dy) = (a.cos() * len / 2.0, a.sin() * len / 2.0);
                (
                    Geometry::Line {
                        x0: cx - dx,
                        y0: cy - dy,
                        x1: cx + dx,
                        y1: cy + dy,
                        width: rng.random_range(3.0..5.0),
                    },
                    rng.random_range(50..=75),
                )
            }
            DefectClass::Stain => (
                Geometry::Ellipse {
                    cx,
                    cy,
                    rx: rng.random_range(28.0..45.0),
                    ry: rng.random_range(14.0..26.0),
                    angle: rng.random_range(0.0..PI),
                },
                -rng.random_range(28..=38),
            ),
            DefectClass::Misc => {
                let n = rng.random_range(3..=5);
                let parts = (0..n)
                    .map(|_| {
                        let a: f64 = rng.random_range(0.0..2.0 * PI);
                        let d: f64 = rng.random_range(8.0..35.0);
                        Geometry::Disk {
                            cx: (cx + a.cos() * d) as i64,
                            cy: (cy + a.sin() * d) as i64,
                            r: rng.random_range(4..=7),
                        }
                    })
                    .collect();
                (Geometry::Multi { parts }, -rng.random_range(50..=70))
            }
        };
        DefectSpec {
            class,
            geometry,
            delta,
        }
    }
}

/// Applies a defect; returns the new image, its image-frame mask and class.
pub fn inject_defect(
    image: &InspectionImage,
    dspec: &DefectSpec,
) -> Result<(InspectionImage, Raster<bool>, DefectClass)> {
    let mask = dspec.geometry.rasterize(image.width(), image.height())?;
    let bump = |v: u8| (v as i32 + dspec.delta).clamp(0, 255) as u8;
    let pixels = match &image.pixels {
        Pixels::Gray(r) => {
            let mut out = r.clone();
            for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
                if m {
                    *v = bump(*v);
                }
            }
            Pixels::Gray(out)
        }
        Pixels::Rgb(r) => {
            let mut out = r.clone();
            for (p, &m) in out.data_mut().iter_mut().zip(mask.data()) {
                if m {
                    *p = [bump(p[0]), bump(p[1]), bump(p[2])];
                }
            }
            Pixels::Rgb(out)
        }
    };
    let out = InspectionImage {
        pixels,
        meta: image.meta.clone(),
    };
    debug_assert!(modified_within(image, &out, &mask));
    Ok((out, mask, dspec.class))
}

fn modified_within(before: &InspectionImage, after: &InspectionImage, mask: &Raster<bool>) -> bool {
    let (a, b) = (before.to_rgb(), after.to_rgb());
    a.data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .all(|((p, q), &m)| m || p == q)
}

/// Injects several defects; the returned mask is the union.
pub fn inject_all(
    image: &InspectionImage,
    specs: &[DefectSpec],
) -> Result<(InspectionImage, Raster<bool>)> {
    let mut img = image.clone();
    let mut union = Raster::filled(image.width(), image.height(), false);
    for s in specs {
        let (next, mask, _) = inject_defect(&img, s)?;
        for (u, &m) in union.data_mut().iter_mut().zip(mask.data()) {
            *u |= m;
        }
        img = next;
    }
    Ok((img, union))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ConfoundPolicy {
    None,
    /// In the train split each class is rendered on "its" recipe with
    /// probability `strength`; validate/test draw recipes uniformly.
    BackgroundBias { strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub class_mix: Vec<(DefectClass, f64)>,
    pub defect_free_fraction: f64,
    pub periods: Vec<usize>,
    pub n_recipes: usize,
    pub confound: ConfoundPolicy,
    pub width: usize,
    pub height: usize,
    pub brightness_jitter: f64,
    pub hue_jitter: f64,
    pub noise_sigma: f64,
}

impl CorpusSpec {
    /// The reference 500-image evaluation corpus: one defect per image,
    /// classes mixed uniformly, periods 64/96/128.
    pub fn standard() -> Self {
        CorpusSpec {
            n_images: 500,
            class_mix: DefectClass::ALL.iter().map(|&c| (c, 1.0)).collect(),
            defect_free_fraction: 0.0,
            periods: vec![64, 96, 128],
            n_recipes: 12,
            confound: ConfoundPolicy::None,
            width: 1024,
            height: 768,
            brightness_jitter: 0.2,
            hue_jitter: 0.1,
            noise_sigma: 2.0,
        }
    }

    /// Class/background confounded corpus for channel-mode comparisons.
    pub fn background_bias(n_images: usize) -> Self {
        CorpusSpec {
            n_images,
            n_recipes: DefectClass::ALL.len(),
            confound: ConfoundPolicy::BackgroundBias { strength: 0.85 },
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::new(ErrorCode::SpecInvalid, m.to_string()));
        if self.n_images < 10 {
            return bad("corpus needs at least 10 images");
        }
        if self.class_mix.is_empty() || self.class_mix.iter().any(|(_, w)| !(*w >= 0.0)) {
            return bad("class mix must be non-empty with non-negative weights");
        }
        if self.periods.is_empty() || self.n_recipes == 0 {
            return bad("need at least one period and recipe");
        }
        if !(0.0..=1.0).contains(&self.defect_free_fraction) {
            return bad("defect-free fraction outside [0, 1]");
        }
        if let ConfoundPolicy::BackgroundBias { strength } = self.confound {
            if !(0.0..=1.0).contains(&strength) || self.n_recipes < self.class_mix.len() {
                return bad("background bias needs strength in [0,1] and one recipe per class");
            }
        }
        Ok(())
    }
}

/// One generated corpus image with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: InspectionImage,
    pub mask: Option<Raster<bool>>,
    pub defect: Option<DefectSpec>,
    pub recipe: usize,
    pub period: usize,
    pub split: Split,
}

impl Sample {
    pub fn class(&self) -> Option<DefectClass> {
        self.defect.as_ref().map(|d| d.class)
    }

    /// Centroid of the ground-truth mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let m = self.mask.as_ref()?;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (n > 0.0).then(|| (sx / n, sy / n))
    }
}

fn pick_weighted<T: Copy>(items: &[(T, f64)], rng: &mut impl Rng) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    for &(item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

pub fn image_id(index: usize) -> String {
    format!("img-{index:05}")
}

/// Generates the corpus in memory. Every output is a pure function of
/// `(spec, seed)`; images are produced in parallel.
pub fn gen_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipes: Vec<(usize, PatternRecipe)> = (0..spec.n_recipes)
        .map(|r| {
            let period = spec.periods[r % spec.periods.len()];
            (period, PatternRecipe::random(period, &mut rng))
        })
        .collect();
    let ids: Vec<String> = (0..spec.n_images).map(image_id).collect();
    let splits = assign_splits(&ids, seed);
    let classes: Vec<DefectClass> = spec.class_mix.iter().map(|(c, _)| *c).collect();

    // Per-image decisions are drawn sequentially so they do not depend on
    // thread scheduling; rendering happens in parallel afterwards.
    struct Plan {
        recipe: usize,
        class: Option<DefectClass>,
        seed: u64,
        center: (f64, f64),
    }
    let plans: Vec<Plan> = ids
        .iter()
        .map(|id| {
            let class = (rng.random_range(0.0..1.0) >= spec.defect_free_fraction)
                .then(|| pick_weighted(&spec.class_mix, &mut rng));
            let recipe = match (spec.confound, class, splits[id]) {
                (ConfoundPolicy::BackgroundBias { strength }, Some(c), Split::Train) => {
                    let own = classes.iter().position(|&k| k == c).unwrap_or(0);
                    if rng.random_range(0.0..1.0) < strength {
                        own
                    } else {
                        rng.random_range(0..spec.n_recipes)
                    }
                }
                _ => rng.random_range(0..spec.n_recipes),
            };
            let period = recipes[recipe].0;
            let usable = (spec.width / period) * period;
            let margin = 90.0;
            let center = (
                rng.random_range(margin..(usable as f64 - margin)),
                rng.random_range(margin..(spec.height as f64 - margin)),
            );
            Plan {
                recipe,
                class,
                seed: rng.random(),
                center,
            }
        })
        .collect();

    plans
        .into_par_iter()
        .zip(ids.par_iter())
        .map(|(plan, id)| {
            let (period, recipe) = &recipes[plan.recipe];
            let panel = PanelSpec {
                period: *period,
                count: spec.width / period,
                width: spec.width,
                height: spec.height,
                recipe: recipe.clone(),
                brightness_jitter: spec.brightness_jitter,
                hue_jitter: spec.hue_jitter,
                noise_sigma: spec.noise_sigma,
                seed: plan.seed,
            };
            let bg = gen_background(&panel)?.with_meta(ImageMeta {
                image_id: id.clone(),
                product_id: format!("recipe-{}", plan.recipe),
                layer_id: "L0".into(),
                captured_at: None,
            });
            let mut drng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xdef3c7);
            let (image, mask, defect) = match plan.class {
                Some(c) => {
                    let d = DefectSpec::random(c, plan.center.0, plan.center.1, &mut drng);
                    let (img, mask, _) = inject_defect(&bg, &d)?;
                    (img, Some(mask), Some(d))
                }
                None => (bg, None, None),
            };
            Ok(Sample {
                image,
                mask,
                defect,
                recipe: plan.recipe,
                period: *period,
                split: splits[id],
            })
        })
        .collect()
}

/// Writes images, masks and `manifest.jsonl` under `out_dir`; manifest
/// paths are relative to `out_dir`.
pub fn gen_dataset(spec: &CorpusSpec, seed: u64, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let samples = gen_corpus(spec, seed)?;
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.display(), e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.image.meta.image_id;
        let image_path = img_dir.join(format!("{id}.png"));
        s.image.save(&image_path)?;
        let mut mask_path: Option<PathBuf> = None;
        if let Some(m) = &s.mask {
            let p = mask_dir.join(format!("{id}.png"));
            crate::raster::save_mask_png(m, &p)?;
            mask_path = Some(p);
        }
        let patch = s.centroid().map(|(cx, cy)| {
            crate::reference::centered_patch(cx, cy, s.image.width(), s.image.height())
        });
        records.push(ManifestRecord {
            image_id: id.clone(),
            image_path: format!("images/{id}.png"),
            mask_path: mask_path.map(|_| format!("masks/{id}.png")),
            patch,
            label: if s.class().is_some() {
                PatchLabel::Defect
            } else {
                PatchLabel::NoDefect
            },
            class: s.class().map(|c| c.name().to_string()),
            status: crate::reference::CandidateStatus::Accepted,
            sources: Vec::new(),
            split: s.split,
            recipe: Some(s.recipe),
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Class counts per recipe, useful for checking the confound.
pub fn class_recipe_table(samples: &[Sample], split: Split) -> BTreeMap<(DefectClass, usize), usize> {
    let mut t = BTreeMap::new();
    for s in samples.iter().filter(|s| s.split == split) {
        if let Some(c) = s.class() {
            *t.entry((c, s.recipe)).or_insert(0) += 1;
        }
    }
    t
}

/// Standard gray-level test corpus helper: a BBox around the truth mask.
pub fn mask_bbox(mask: &Raster<bool>) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn isqrt(n: i64) -> i64 {
        let mut r = (n as f64).sqrt() as i64;
        while r * r > n {
            r -= 1;
        }
        while (r + 1) * (r + 1) <= n {
            r += 1;
        }
        r
    }

    #[test]
    fn noiseless_background_is_exactly_periodic() {
        let spec = PanelSpec::standard(128, 3).noiseless();
        let img = gen_background(&spec).unwrap().to_rgb();
        for y in 0..img.height() {
            for x in 0..128 * 7 {
                assert_eq!(img.get(x, y), img.get(x + 128, y));
            }
        }
    }

    #[test]
    fn background_is_deterministic_per_seed() {
        let spec = PanelSpec::standard(96, 11);
        assert_eq!(gen_background(&spec).unwrap(), gen_background(&spec).unwrap());
        let other = PanelSpec { seed: 12, ..spec.clone() };
        assert_ne!(gen_background(&spec).unwrap(), gen_background(&other).unwrap());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = PanelSpec::standard(128, 1);
        spec.count = 9;
        assert_eq!(gen_background(&spec).unwrap_err().code, ErrorCode::SpecInvalid);
        let mut spec = PanelSpec::standard(128, 1);
        spec.brightness_jitter = 0.6;
        assert_eq!(gen_background(&spec).unwrap_err().code, ErrorCode::SpecInvalid);
    }

    #[test]
    fn disk_area_matches_scanline_count() {
        let img = gen_background(&PanelSpec::standard(128, 5)).unwrap();
        let d = DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Disk { cx: 500, cy: 300, r: 20 },
            delta: -50,
        };
        let (_, mask, class) = inject_defect(&img, &d).unwrap();
        assert_eq!(class, DefectClass::Blob);
        // independent scanline fill: each row spans 2*floor(sqrt(r^2 - dy^2)) + 1 pixels
        let oracle: i64 = (-20..=20i64).map(|dy| 2 * isqrt(400 - dy * dy) + 1).sum();
        assert_eq!(mask.count() as i64, oracle);
        assert!((oracle as f64 - PI * 400.0).abs() < 2.0 * PI * 20.0);
    }

    #[test]
    fn injection_modifies_exactly_the_mask() {
        let img = gen_background(&PanelSpec::standard(96, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for class in DefectClass::ALL {
            let d = DefectSpec::random(class, 400.0, 300.0, &mut rng);
            let (out, mask, _) = inject_defect(&img, &d).unwrap();
            let (a, b) = (img.to_rgb(), out.to_rgb());
            for i in 0..mask.data().len() {
                assert_eq!(mask.data()[i], a.data()[i] != b.data()[i], "{class:?} pixel {i}");
            }
        }
    }

    #[test]
    fn zero_delta_keeps_image_and_records_mask() {
        let img = gen_background(&PanelSpec::standard(128, 5)).unwrap();
        let d = DefectSpec {
            class: DefectClass::Particle,
            geometry: Geometry::Disk { cx: 100, cy: 100, r: 8 },
            delta: 0,
        };
        let (out, mask, _) = inject_defect(&img, &d).unwrap();
        assert_eq!(out, img);
        assert!(mask.count() > 0);
    }

    #[test]
    fn out_of_bounds_defect_rejected() {
        let img = gen_background(&PanelSpec::standard(128, 5)).unwrap();
        let d = DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Disk { cx: 5, cy: 100, r: 10 },
            delta: -50,
        };
        assert_eq!(inject_defect(&img, &d).unwrap_err().code, ErrorCode::OutOfBounds);
    }

    #[test]
    fn sequential_defects_union_masks() {
        let img = gen_background(&PanelSpec::standard(128, 5)).unwrap();
        let a = DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Disk { cx: 300, cy: 300, r: 15 },
            delta: -50,
        };
        let b = DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Disk { cx: 310, cy: 300, r: 15 },
            delta: -50,
        };
        let (_, union) = inject_all(&img, &[a.clone(), b.clone()]).unwrap();
        let ma = a.geometry.rasterize(1024, 768).unwrap();
        let mb = b.geometry.rasterize(1024, 768).unwrap();
        for i in 0..union.data().len() {
            assert_eq!(union.data()[i], ma.data()[i] || mb.data()[i]);
        }
    }

    #[test]
    fn corpus_split_sizes_follow_8_1_1() {
        let mut spec = CorpusSpec::standard();
        spec.n_images = 100;
        spec.width = 256;
        spec.height = 256;
        let samples = gen_corpus(&spec, 9).unwrap();
        let count = |s: Split| samples.iter().filter(|x| x.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Validate), count(Split::Test)), (80, 10, 10));
    }

    #[test]
    fn corpus_rejects_tiny_n() {
        let mut spec = CorpusSpec::standard();
        spec.n_images = 5;
        assert_eq!(gen_corpus(&spec, 1).unwrap_err().code, ErrorCode::SpecInvalid);
    }
}
