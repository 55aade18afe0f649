//! Self-reference segmentation: the defect patch is matched against a
//! defect-free placement in the same image and the two are subtracted.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::{self, Connectivity, Integral};
use crate::periodicity::PeriodEstimate;
use crate::raster::{BBox, InspectionImage, Raster};
use crate::reference::{self, DiffParams, ReferentialImage, PATCH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMatch {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub ncc_score: f64,
    pub displacement: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub bits: Raster<bool>,
    pub defect_pixel_count: usize,
}

impl BinaryMask {
    pub fn new(bits: Raster<bool>) -> Self {
        let defect_pixel_count = bits.count();
        BinaryMask { bits, defect_pixel_count }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask::new(Raster::filled(width, height, false))
    }
}

/// Zero-normalized cross-correlation of `tpl` (a box of `gray`) with the
/// same-sized box at `(x, y)`. Zero when either side is constant.
pub fn ncc_at(gray: &Raster<u8>, tpl: BBox, x: usize, y: usize) -> f64 {
    let n = tpl.area() as f64;
    let (mut st, mut sw, mut stt, mut sww, mut stw) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for v in 0..tpl.height {
        let tr = &gray.row(tpl.y + v)[tpl.x..tpl.right()];
        let wr = &gray.row(y + v)[x..x + tpl.width];
        for (&a, &b) in tr.iter().zip(wr) {
            let (a, b) = (a as f64, b as f64);
            st += a;
            sw += b;
            stt += a * a;
            sww += b * b;
            stw += a * b;
        }
    }
    let cov = stw - st * sw / n;
    let vt = stt - st * st / n;
    let vw = sww - sw * sw / n;
    if vt <= 1e-9 || vw <= 1e-9 {
        0.0
    } else {
        cov / (vt * vw).sqrt()
    }
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (rows, cols) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    rows.process(data);
    let mut t = vec![Complex::new(0.0, 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = data[y * w + x];
        }
    }
    cols.process(&mut t);
    for x in 0..w {
        for y in 0..h {
            data[y * w + x] = t[x * h + y];
        }
    }
}

/// NCC of the template box against every in-bounds placement, computed
/// with one FFT cross-correlation plus integral images. Entry `(x, y)` of
/// the result is the score of the placement with top-left `(x, y)`.
pub fn ncc_map(gray: &Raster<u8>, tpl: BBox) -> Raster<f64> {
    let (w, h) = (gray.width(), gray.height());
    let n = tpl.area() as f64;
    let t_mean = (tpl.y..tpl.bottom())
        .map(|y| gray.row(y)[tpl.x..tpl.right()].iter().map(|&v| v as f64).sum::<f64>())
        .sum::<f64>()
        / n;
    let mut tz = vec![Complex::new(0.0, 0.0); w * h];
    let mut t_norm2 = 0.0;
    for v in 0..tpl.height {
        for u in 0..tpl.width {
            let d = gray.get(tpl.x + u, tpl.y + v) as f64 - t_mean;
            t_norm2 += d * d;
            tz[v * w + u] = Complex::new(d, 0.0);
        }
    }
    let mut img: Vec<Complex<f64>> = gray.data().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut img, w, h, &mut planner, false);
    fft2(&mut tz, w, h, &mut planner, false);
    for (a, b) in img.iter_mut().zip(&tz) {
        *a *= b.conj();
    }
    fft2(&mut img, w, h, &mut planner, true);
    let scale = 1.0 / (w * h) as f64;
    let s1 = Integral::from_fn(w, h, |x, y| gray.get(x, y) as f64);
    let s2 = Integral::from_fn(w, h, |x, y| {
        let v = gray.get(x, y) as f64;
        v * v
    });
    let (mw, mh) = (w - tpl.width + 1, h - tpl.height + 1);
    Raster::from_fn(mw, mh, |x, y| {
        let (x1, y1) = (x + tpl.width, y + tpl.height);
        let sum = s1.sum(x, y, x1, y1);
        let var = s2.sum(x, y, x1, y1) - sum * sum / n;
        if t_norm2 <= 1e-9 || var <= 1e-6 * n {
            0.0
        } else {
            img[y * w + x].re * scale / (t_norm2 * var).sqrt()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub theta_ncc: f64,
    /// Skip the stride-1 scan when the period-seeded candidates fail.
    pub exhaustive: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            theta_ncc: 0.8,
            exhaustive: true,
        }
    }
}

const TIE: f64 = 1e-9;

#[derive(Clone, Copy)]
struct Cand {
    score: f64,
    dy: i64,
    dx: i64,
}

impl Cand {
    fn beats(&self, o: &Cand) -> bool {
        self.score > o.score + TIE || (self.score >= o.score - TIE && (self.dy, self.dx) < (o.dy, o.dx))
    }
}

fn keep(best: &mut Option<Cand>, c: Cand) {
    if best.map_or(true, |b| c.beats(&b)) {
        *best = Some(c);
    }
}

fn finish(gray: &Raster<u8>, tpl: BBox, c: Cand) -> BackgroundMatch {
    let x = (tpl.x as i64 + c.dx) as usize;
    let y = (tpl.y as i64 + c.dy) as usize;
    BackgroundMatch {
        bbox: BBox::new(x, y, tpl.width, tpl.height),
        ncc_score: ncc_at(gray, tpl, x, y),
        displacement: (c.dx, c.dy),
    }
}

/// Best non-overlapping placement of the defect patch: horizontal shifts by
/// multiples of the period first, then every placement when those fall
/// short of `theta_ncc`. Ties go to the smallest `(dy, dx)`.
pub fn match_background(
    image: &InspectionImage,
    defect_box: BBox,
    estimate: &PeriodEstimate,
    params: &MatchParams,
) -> Result<BackgroundMatch> {
    match_background_gray(&image.to_gray(), defect_box, estimate.period, params)
}

pub fn match_background_gray(gray: &Raster<u8>, tpl: BBox, period: usize, params: &MatchParams) -> Result<BackgroundMatch> {
    let (w, h) = (gray.width(), gray.height());
    if !tpl.fits_in(w, h) || tpl.width == 0 || tpl.height == 0 {
        return Err(Error::new(ErrorCode::OutOfBounds, format!("defect box {tpl:?} outside {w}x{h}")));
    }
    let mut best: Option<Cand> = None;
    if period > 0 {
        let max_k = w / period + 1;
        for k in 1..=max_k as i64 {
            for dx in [-k * period as i64, k * period as i64] {
                let x = tpl.x as i64 + dx;
                if x < 0 || x as usize + tpl.width > w {
                    continue;
                }
                let b = BBox::new(x as usize, tpl.y, tpl.width, tpl.height);
                if b.intersects(&tpl) {
                    continue;
                }
                keep(
                    &mut best,
                    Cand {
                        score: ncc_at(gray, tpl, b.x, b.y),
                        dy: 0,
                        dx,
                    },
                );
            }
        }
    }
    if best.map_or(true, |b| b.score < params.theta_ncc) && params.exhaustive {
        let map = ncc_map(gray, tpl);
        for y in 0..map.height() {
            for x in 0..map.width() {
                let b = BBox::new(x, y, tpl.width, tpl.height);
                if b.intersects(&tpl) {
                    continue;
                }
                keep(
                    &mut best,
                    Cand {
                        score: map.get(x, y),
                        dy: y as i64 - tpl.y as i64,
                        dx: x as i64 - tpl.x as i64,
                    },
                );
            }
        }
    }
    let Some(c) = best else {
        return Err(Error::new(
            ErrorCode::NoMatch,
            format!("no in-bounds placement of {}x{} avoids the defect box", tpl.width, tpl.height),
        ));
    };
    let m = finish(gray, tpl, c);
    if m.ncc_score < params.theta_ncc {
        return Err(Error::new(
            ErrorCode::NoMatch,
            format!("best background score {:.3} below {}", m.ncc_score, params.theta_ncc),
        ));
    }
    Ok(m)
}

/// Binarized difference of two equally sized gray patches, components
/// smaller than `min_area` removed.
pub fn segment_patches(a: &Raster<u8>, b: &Raster<u8>, params: &DiffParams) -> BinaryMask {
    let m = reference::diff_mask(a, b, params);
    if params.min_area <= 1 {
        return BinaryMask::new(m);
    }
    let (labels, comps) = imgproc::label_components(&m, Connectivity::Eight);
    let small: Vec<bool> = std::iter::once(false)
        .chain(comps.iter().map(|c| c.area < params.min_area))
        .collect();
    BinaryMask::new(Raster::from_fn(m.width(), m.height(), |x, y| {
        m.get(x, y) && !small[labels.get(x, y) as usize]
    }))
}

pub fn segment_defect(image: &InspectionImage, defect_box: BBox, m: &BackgroundMatch, params: &DiffParams) -> BinaryMask {
    let gray = image.to_gray();
    segment_patches(&gray.crop(defect_box), &gray.crop(m.bbox), params)
}

/// Embeds a patch-local mask at the box position of a full-size canvas.
pub fn mask_to_image_frame(mask: &BinaryMask, defect_box: BBox, width: usize, height: usize) -> Raster<bool> {
    let mut out = Raster::filled(width, height, false);
    paste(&mut out, &mask.bits, defect_box.x, defect_box.y);
    out
}

fn paste(dst: &mut Raster<bool>, src: &Raster<bool>, x0: usize, y0: usize) {
    for y in 0..src.height() {
        for x in 0..src.width() {
            if src.get(x, y) {
                dst.set(x0 + x, y0 + y, true);
            }
        }
    }
}

/// How a patch mask was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    SelfReference,
    Tiled,
    ReferenceDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub defect_box: BBox,
    /// The whole-patch match, when one was found.
    pub background: Option<BackgroundMatch>,
    pub mask: BinaryMask,
    pub source: SegmentSource,
}

/// Patch difference against the referential image; columns past `T*C`
/// have no reference and stay unset.
pub fn segment_with_reference(gray: &Raster<u8>, defect_box: BBox, reference: &ReferentialImage, params: &DiffParams) -> BinaryMask {
    let rw = reference.pixels.width();
    let patch = gray.crop(defect_box);
    let refp = Raster::from_fn(defect_box.width, defect_box.height, |x, y| {
        let gx = defect_box.x + x;
        if gx < rw {
            reference.pixels.get(gx, defect_box.y + y)
        } else {
            patch.get(x, y)
        }
    });
    segment_patches(&patch, &refp, params)
}

/// Full segmentation of one detected patch with the documented fallbacks:
/// large patches without a placement are matched per 224 tile, and a
/// failed match falls back to the referential-image difference.
pub fn segment_region(
    image: &InspectionImage,
    defect_box: BBox,
    estimate: &PeriodEstimate,
    match_params: &MatchParams,
    params: &DiffParams,
) -> Result<Segmentation> {
    let gray = image.to_gray();
    let whole = match_background_gray(&gray, defect_box, estimate.period, match_params);
    segment_after_match(&gray, defect_box, estimate, whole, match_params, params)
}

/// Second half of [`segment_region`] for callers that ran the whole-patch
/// match themselves.
pub fn segment_after_match(
    gray: &Raster<u8>,
    defect_box: BBox,
    estimate: &PeriodEstimate,
    whole: Result<BackgroundMatch>,
    match_params: &MatchParams,
    params: &DiffParams,
) -> Result<Segmentation> {
    match whole {
        Ok(m) => Ok(Segmentation {
            defect_box,
            background: Some(m),
            mask: segment_patches(&gray.crop(defect_box), &gray.crop(m.bbox), params),
            source: SegmentSource::SelfReference,
        }),
        Err(e) if e.code != ErrorCode::NoMatch => Err(e),
        Err(_) => {
            if defect_box.width > PATCH || defect_box.height > PATCH {
                if let Some(mask) = tiled(gray, defect_box, estimate.period, match_params, params) {
                    return Ok(Segmentation {
                        defect_box,
                        background: None,
                        mask,
                        source: SegmentSource::Tiled,
                    });
                }
            }
            let reference = reference::build_reference_gray(gray, estimate)?;
            Ok(Segmentation {
                defect_box,
                background: None,
                mask: segment_with_reference(gray, defect_box, &reference, params),
                source: SegmentSource::ReferenceDiff,
            })
        }
    }
}

fn tiled(gray: &Raster<u8>, region: BBox, period: usize, mp: &MatchParams, params: &DiffParams) -> Option<BinaryMask> {
    let mut bits = Raster::filled(region.width, region.height, false);
    for ty in (0..region.height).step_by(PATCH) {
        for tx in (0..region.width).step_by(PATCH) {
            let tile = BBox::new(
                region.x + tx,
                region.y + ty,
                PATCH.min(region.width - tx),
                PATCH.min(region.height - ty),
            );
            let m = match_avoiding(gray, tile, region, period, mp)?;
            let mask = segment_patches(&gray.crop(tile), &gray.crop(m.bbox), params);
            paste(&mut bits, &mask.bits, tx, ty);
        }
    }
    Some(BinaryMask::new(bits))
}

/// Period-seeded match of `tile` whose placement also avoids `region`.
fn match_avoiding(gray: &Raster<u8>, tile: BBox, region: BBox, period: usize, mp: &MatchParams) -> Option<BackgroundMatch> {
    let w = gray.width();
    let mut best: Option<Cand> = None;
    if period == 0 {
        return None;
    }
    for k in 1..=(w / period + 1) as i64 {
        for dx in [-k * period as i64, k * period as i64] {
            let x = tile.x as i64 + dx;
            if x < 0 || x as usize + tile.width > w {
                continue;
            }
            let b = BBox::new(x as usize, tile.y, tile.width, tile.height);
            if b.intersects(&region) {
                continue;
            }
            keep(
                &mut best,
                Cand {
                    score: ncc_at(gray, tile, b.x, b.y),
                    dy: 0,
                    dx,
                },
            );
        }
    }
    let m = finish(gray, tile, best?);
    (m.ncc_score >= mp.theta_ncc).then_some(m)
}

/// Baseline that differences the patch against the same box of a stored
/// clean template image instead of the image itself.
pub fn segment_against_template(image: &InspectionImage, template: &InspectionImage, defect_box: BBox, params: &DiffParams) -> Result<BinaryMask> {
    if (template.width(), template.height()) != (image.width(), image.height()) {
        return Err(Error::new(ErrorCode::FrameMismatch, "template and image differ in size"));
    }
    Ok(segment_patches(
        &image.to_gray().crop(defect_box),
        &template.to_gray().crop(defect_box),
        params,
    ))
}

/// Intersection over union of two equally sized masks; 1 when both are empty.
pub fn mask_iou(a: &Raster<bool>, b: &Raster<bool>) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += (p && q) as usize;
        uni += (p || q) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Fraction of ground-truth negatives predicted positive.
pub fn false_positive_rate(pred: &Raster<bool>, truth: &Raster<bool>) -> f64 {
    let (mut fp, mut neg) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if !t {
            neg += 1;
            fp += p as usize;
        }
    }
    if neg == 0 {
        0.0
    } else {
        fp as f64 / neg as f64
    }
}
