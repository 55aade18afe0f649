//! Referential image reconstruction, coarse defect localization by
//! differencing, patch framing and automatic patch labeling.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::{self, Connectivity, ThresholdMode};
use crate::periodicity::{self, BandPolicy, PeriodEstimate, PeriodSearch, ProjectionConfig};
use crate::raster::{BBox, InspectionImage, Raster};

/// Side of the constant-size defect patch.
pub const PATCH: usize = 224;

/// Defect-free image built by tiling one clean period `count` times.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferentialImage {
    pub pixels: Raster<u8>,
    pub source_clean_offset: usize,
    pub period: usize,
    pub count: usize,
}

pub fn build_reference(image: &InspectionImage, estimate: &PeriodEstimate) -> Result<ReferentialImage> {
    build_reference_gray(&image.to_gray(), estimate)
}

pub fn build_reference_gray(gray: &Raster<u8>, estimate: &PeriodEstimate) -> Result<ReferentialImage> {
    let offset = estimate
        .clean_offset
        .ok_or_else(|| Error::new(ErrorCode::NoCleanPeriod, "estimate has no clean period"))?;
    let (t, c) = (estimate.period, estimate.count);
    if offset + t > gray.width() || t * c > gray.width() {
        return Err(Error::new(
            ErrorCode::NoCleanPeriod,
            format!("clean period at {offset} (T={t}, C={c}) exceeds width {}", gray.width()),
        ));
    }
    let pixels = Raster::from_fn(t * c, gray.height(), |x, y| gray.get(offset + x % t, y));
    Ok(ReferentialImage {
        pixels,
        source_clean_offset: offset,
        period: t,
        count: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffParams {
    pub blur_radius: usize,
    pub threshold: ThresholdMode,
    pub morph_radius: usize,
    pub min_area: usize,
}

impl Default for DiffParams {
    fn default() -> Self {
        DiffParams {
            blur_radius: 2,
            threshold: ThresholdMode::default(),
            morph_radius: 2,
            min_area: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseRegion {
    pub bbox: BBox,
    pub area: usize,
    pub centroid: (f64, f64),
}

/// `|a - b|` -> blur -> binarize -> open/close.
pub fn diff_mask(a: &Raster<u8>, b: &Raster<u8>, params: &DiffParams) -> Raster<bool> {
    let diff = imgproc::abs_diff(a, b);
    let smooth = imgproc::box_blur(&diff, params.blur_radius);
    let bin = imgproc::binarize(&smooth, params.threshold);
    imgproc::open_close(&bin, params.morph_radius)
}

/// Coarse defect regions from the difference against the referential
/// image; only the first `T*C` columns are compared. Largest first.
pub fn diff_localize(image: &InspectionImage, reference: &ReferentialImage, params: &DiffParams) -> Vec<CoarseRegion> {
    let gray = image.to_gray();
    let width = reference.pixels.width().min(gray.width());
    let left = gray.left_columns(width);
    let refl = reference.pixels.left_columns(width);
    let mask = diff_mask(&left, &refl, params);
    let (_, comps) = imgproc::label_components(&mask, Connectivity::Eight);
    let mut regions: Vec<CoarseRegion> = comps
        .into_iter()
        .filter(|c| c.area >= params.min_area)
        .map(|c| CoarseRegion {
            bbox: c.bbox,
            area: c.area,
            centroid: c.centroid,
        })
        .collect();
    regions.sort_by(|a, b| b.area.cmp(&a.area).then(a.bbox.cmp(&b.bbox)));
    regions
}

/// 224x224 box centred on `(cx, cy)`, clamped into the image.
pub fn centered_patch(cx: f64, cy: f64, width: usize, height: usize) -> BBox {
    let place = |c: f64, extent: usize| -> usize {
        let start = c.round() as i64 - (PATCH / 2) as i64;
        start.clamp(0, extent.saturating_sub(PATCH) as i64) as usize
    };
    BBox::new(place(cx, width), place(cy, height), PATCH, PATCH)
}

/// One box per region; boxes overlapping an earlier (larger) region's box
/// with IoU above 0.9 are dropped.
pub fn frame_patches(regions: &[CoarseRegion], width: usize, height: usize) -> Result<Vec<BBox>> {
    if width < PATCH || height < PATCH {
        return Err(Error::new(
            ErrorCode::ImageTooSmall,
            format!("{width}x{height} is smaller than {PATCH}x{PATCH}"),
        ));
    }
    let mut ordered: Vec<&CoarseRegion> = regions.iter().collect();
    ordered.sort_by(|a, b| b.area.cmp(&a.area));
    let mut boxes: Vec<BBox> = Vec::new();
    for r in ordered {
        let b = centered_patch(r.centroid.0, r.centroid.1, width, height);
        if boxes.iter().all(|k| k.iou(&b) <= 0.9) {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLabel {
    Defect,
    NoDefect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Periodic,
    Heatmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelCandidate {
    pub id: String,
    pub image_id: String,
    pub patch: BBox,
    pub proposed_label: PatchLabel,
    pub sources: BTreeSet<Source>,
    pub status: CandidateStatus,
    pub decided_by: Option<String>,
    #[serde(default)]
    pub decided_at: Option<String>,
}

/// Produces a non-negative saliency map with the image's dimensions.
pub trait HeatmapProvider: Send + Sync {
    fn heatmap(&self, image: &InspectionImage) -> Result<Raster<f32>>;
}

/// Stand-in for a learned activation map: the smoothed reference
/// difference with its noise floor removed, normalized to unit mass.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateHeatmap {
    pub projection: ProjectionConfig,
    pub search: PeriodSearch,
    pub bands: BandPolicy,
}

impl Default for SurrogateHeatmap {
    fn default() -> Self {
        SurrogateHeatmap {
            projection: ProjectionConfig::default(),
            search: PeriodSearch::default(),
            bands: BandPolicy::default(),
        }
    }
}

impl HeatmapProvider for SurrogateHeatmap {
    fn heatmap(&self, image: &InspectionImage) -> Result<Raster<f32>> {
        let est = periodicity::analyze(image, self.projection, &self.search, &self.bands)?;
        surrogate_heatmap(image, &est)
    }
}

const HEATMAP_BLUR: usize = 4;
const HEATMAP_FLOOR_SIGMAS: f64 = 5.0;

pub fn surrogate_heatmap(image: &InspectionImage, estimate: &PeriodEstimate) -> Result<Raster<f32>> {
    let gray = image.to_gray();
    let reference = build_reference_gray(&gray, estimate)?;
    let width = reference.pixels.width();
    let diff = imgproc::abs_diff(&gray.left_columns(width), &reference.pixels);
    let smooth = imgproc::box_blur(&diff, HEATMAP_BLUR);
    let mut sorted: Vec<f32> = smooth.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let med = sorted[sorted.len() / 2] as f64;
    let mut dev: Vec<f64> = sorted.iter().map(|&v| (v as f64 - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mad = dev[dev.len() / 2];
    let floor = med + HEATMAP_FLOOR_SIGMAS * 1.4826 * mad;
    let mut heat = Raster::from_fn(gray.width(), gray.height(), |x, y| {
        if x < width {
            (smooth.get(x, y) as f64 - floor).max(0.0) as f32
        } else {
            0.0
        }
    });
    let total: f64 = heat.data().iter().map(|&v| v as f64).sum();
    let n = heat.data().len() as f64;
    for v in heat.data_mut() {
        *v = if total > 0.0 {
            (*v as f64 / total) as f32
        } else {
            (1.0 / n) as f32
        };
    }
    Ok(heat)
}

/// Fraction of the heatmap's mass inside `b`.
pub fn heat_mass(heat: &Raster<f32>, b: BBox) -> f64 {
    let total: f64 = heat.data().iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = (b.y..b.bottom())
        .map(|y| heat.row(y)[b.x..b.right()].iter().map(|&v| v as f64).sum::<f64>())
        .sum();
    inside / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutolabelPolicy {
    /// Heatmap mass fraction that confirms a candidate.
    pub theta_hm: f64,
    /// Candidates confirmed by both sources skip human screening.
    pub auto_accept_both: bool,
    pub diff: DiffParams,
    pub projection: ProjectionConfig,
    pub search: PeriodSearch,
    pub bands: BandPolicy,
}

impl Default for AutolabelPolicy {
    fn default() -> Self {
        AutolabelPolicy {
            theta_hm: 0.3,
            auto_accept_both: true,
            diff: DiffParams::default(),
            projection: ProjectionConfig::default(),
            search: PeriodSearch::default(),
            bands: BandPolicy::default(),
        }
    }
}

pub struct LabeledImage<'a> {
    pub image: &'a InspectionImage,
    pub label: Option<PatchLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipRecord {
    pub image_id: String,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct AutolabelOutput {
    pub candidates: Vec<PatchLabelCandidate>,
    pub skipped: Vec<SkipRecord>,
}

pub const AUTO_DECIDER: &str = "auto:double-confirm";

/// Candidate defect patches for one defect-labeled image.
pub fn autolabel_image(
    image: &InspectionImage,
    provider: &dyn HeatmapProvider,
    policy: &AutolabelPolicy,
) -> Result<Vec<PatchLabelCandidate>> {
    let est = periodicity::analyze(image, policy.projection, &policy.search, &policy.bands)?;
    let reference = build_reference(image, &est)?;
    let regions = diff_localize(image, &reference, &policy.diff);
    let boxes = frame_patches(&regions, image.width(), image.height())?;
    let heat = provider.heatmap(image)?;
    let id = &image.meta.image_id;
    let mut out = Vec::new();
    for b in &boxes {
        let mut sources = BTreeSet::from([Source::Periodic]);
        if heat_mass(&heat, *b) >= policy.theta_hm {
            sources.insert(Source::Heatmap);
        }
        out.push((*b, sources));
    }
    // A heatmap peak no periodic box covers becomes its own candidate.
    if let Some((px, py)) = argmax(&heat) {
        let hb = centered_patch(px as f64, py as f64, image.width(), image.height());
        let covered = boxes.iter().any(|b| b.contains_point(px as f64, py as f64));
        if !covered && heat_mass(&heat, hb) >= policy.theta_hm {
            out.push((hb, BTreeSet::from([Source::Heatmap])));
        }
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (patch, sources))| {
            let confirmed = sources.len() == 2 && est.touches_dirty(patch.x, patch.right());
            let accept = policy.auto_accept_both && confirmed;
            PatchLabelCandidate {
                id: format!("{id}#{i}"),
                image_id: id.clone(),
                patch,
                proposed_label: PatchLabel::Defect,
                sources,
                status: if accept {
                    CandidateStatus::Accepted
                } else {
                    CandidateStatus::Pending
                },
                decided_by: accept.then(|| AUTO_DECIDER.to_string()),
                decided_at: None,
            }
        })
        .collect())
}

fn argmax(heat: &Raster<f32>) -> Option<(usize, usize)> {
    let (i, &v) = heat
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite").then(b.0.cmp(&a.0)))?;
    let uniform = heat.data().iter().all(|&u| u == v);
    (!uniform).then(|| (i % heat.width(), i / heat.width()))
}

/// Labels every defect image; images without a label or whose analysis
/// fails are reported in `skipped`. Defect-free images add nothing.
pub fn autolabel_dataset(
    images: &[LabeledImage<'_>],
    provider: &dyn HeatmapProvider,
    policy: &AutolabelPolicy,
) -> AutolabelOutput {
    use rayon::prelude::*;
    let results: Vec<std::result::Result<Vec<PatchLabelCandidate>, SkipRecord>> = images
        .par_iter()
        .map(|li| {
            let id = li.image.meta.image_id.clone();
            match li.label {
                None => Err(SkipRecord {
                    image_id: id,
                    code: ErrorCode::LabelMissing,
                    message: "image has no image-level label".into(),
                }),
                Some(PatchLabel::NoDefect) => Ok(Vec::new()),
                Some(PatchLabel::Defect) => autolabel_image(li.image, provider, policy).map_err(|e| SkipRecord {
                    image_id: id,
                    code: e.code,
                    message: e.message,
                }),
            }
        })
        .collect();
    let mut out = AutolabelOutput::default();
    for r in results {
        match r {
            Ok(c) => out.candidates.extend(c),
            Err(s) => {
                log::warn!("autolabel skipped {}: {}", s.image_id, s.code);
                out.skipped.push(s);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSource {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

/// Uniformly random in-bounds 224x224 patches from defect-free images.
pub fn sample_negative_patches(sources: &[NegativeSource], count: usize, seed: u64) -> Result<Vec<PatchLabelCandidate>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<&NegativeSource> = sources
        .iter()
        .filter(|s| s.width >= PATCH && s.height >= PATCH)
        .collect();
    if usable.is_empty() {
        return Err(Error::new(ErrorCode::NoNegativeSources, "no defect-free image of at least 224x224"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let s = usable[rng.random_range(0..usable.len())];
            let x = rng.random_range(0..=s.width - PATCH);
            let y = rng.random_range(0..=s.height - PATCH);
            PatchLabelCandidate {
                id: format!("{}#neg{i}", s.image_id),
                image_id: s.image_id.clone(),
                patch: BBox::new(x, y, PATCH, PATCH),
                proposed_label: PatchLabel::NoDefect,
                sources: BTreeSet::new(),
                status: CandidateStatus::Accepted,
                decided_by: Some("auto:negative-sampling".into()),
                decided_at: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validate,
    Test,
}

fn split_rank(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// 8/1/1 split: ids are ordered by a seeded hash and cut at
/// `n - 2*floor(n/10)` and `n - floor(n/10)`.
pub fn assign_splits(ids: &[String], seed: u64) -> HashMap<String, Split> {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort_by_cached_key(|id| (split_rank(seed, id), (*id).clone()));
    let n = order.len();
    let tenth = n / 10;
    order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n - 2 * tenth {
                Split::Train
            } else if i < n - tenth {
                Split::Validate
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect()
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<BBox>,
    pub label: PatchLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub status: CandidateStatus,
    #[serde(default)]
    pub sources: Vec<Source>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<usize>,
}

impl ManifestRecord {
    pub fn from_candidate(c: &PatchLabelCandidate, image_path: &str, split: Split) -> Self {
        ManifestRecord {
            image_id: c.image_id.clone(),
            image_path: image_path.to_string(),
            mask_path: None,
            patch: Some(c.patch),
            label: c.proposed_label,
            class: None,
            status: c.status,
            sources: c.sources.iter().copied().collect(),
            split,
            recipe: None,
        }
    }
}

/// Accepted candidates as manifest records; pending and rejected ones are left out.
pub fn training_manifest(
    candidates: &[PatchLabelCandidate],
    paths: &HashMap<String, String>,
    splits: &HashMap<String, Split>,
) -> Vec<ManifestRecord> {
    candidates
        .iter()
        .filter(|c| c.status == CandidateStatus::Accepted)
        .map(|c| {
            let path = paths.get(&c.image_id).cloned().unwrap_or_default();
            let split = splits.get(&c.image_id).copied().unwrap_or(Split::Train);
            ManifestRecord::from_candidate(c, &path, split)
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path.display(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path.display(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display(), e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path.display(), e))?;
            serde_json::from_str(&line).map_err(|e| Error::io(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periodicity::analyze_default;
    use crate::synth::{gen_background, inject_all, inject_defect, DefectClass, DefectSpec, Geometry, PanelSpec};

    fn blob_spec(cx: i64, cy: i64, r: i64) -> DefectSpec {
        DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Disk { cx, cy, r },
            delta: -60,
        }
    }

    fn square_spec(x: i64, y: i64) -> DefectSpec {
        // 40x40 square as a thick line segment
        DefectSpec {
            class: DefectClass::Blob,
            geometry: Geometry::Multi {
                parts: (0..40)
                    .map(|i| Geometry::Line {
                        x0: x as f64,
                        y0: (y + i) as f64,
                        x1: (x + 39) as f64,
                        y1: (y + i) as f64,
                        width: 0.5,
                    })
                    .collect(),
            },
            delta: -60,
        }
    }

    #[test]
    fn tiling_reproduces_periodic_image() {
        let img = gen_background(&PanelSpec::standard(96, 3).noiseless()).unwrap();
        let est = analyze_default(&img).unwrap();
        assert_eq!(est.clean_offset, Some(0));
        let r = build_reference(&img, &est).unwrap();
        let gray = img.to_gray();
        assert_eq!(r.pixels.width(), 96 * 10);
        assert_eq!(r.pixels, gray.left_columns(960));
    }

    #[test]
    fn reference_excludes_defect() {
        let spec = PanelSpec::standard(128, 6).noiseless();
        let clean = gen_background(&spec).unwrap();
        let (img, _, _) = inject_defect(&clean, &blob_spec(3 * 128 + 64, 400, 20)).unwrap();
        let est = analyze_default(&img).unwrap();
        let r = build_reference(&img, &est).unwrap();
        assert_eq!(r.pixels, clean.to_gray().left_columns(1024));
    }

    #[test]
    fn missing_clean_period_is_error() {
        let img = gen_background(&PanelSpec::standard(128, 6)).unwrap();
        let mut est = analyze_default(&img).unwrap();
        est.clean_offset = None;
        assert_eq!(build_reference(&img, &est).unwrap_err().code, ErrorCode::NoCleanPeriod);
    }

    #[test]
    fn clean_noiseless_image_localizes_nothing() {
        let img = gen_background(&PanelSpec::standard(128, 7).noiseless()).unwrap();
        let est = analyze_default(&img).unwrap();
        let r = build_reference(&img, &est).unwrap();
        assert!(diff_localize(&img, &r, &DiffParams::default()).is_empty());
    }

    #[test]
    fn image_against_itself_is_empty() {
        let img = gen_background(&PanelSpec::standard(128, 8)).unwrap();
        let (img, _, _) = inject_defect(&img, &blob_spec(500, 300, 20)).unwrap();
        let own = ReferentialImage {
            pixels: img.to_gray(),
            source_clean_offset: 0,
            period: 128,
            count: 8,
        };
        assert!(diff_localize(&img, &own, &DiffParams::default()).is_empty());
    }

    #[test]
    fn single_square_localized_at_its_center() {
        let img = gen_background(&PanelSpec::standard(128, 9)).unwrap();
        let (img, _, _) = inject_defect(&img, &square_spec(500, 300)).unwrap();
        let est = analyze_default(&img).unwrap();
        let r = build_reference(&img, &est).unwrap();
        let regions = diff_localize(&img, &r, &DiffParams::default());
        assert_eq!(regions.len(), 1, "{regions:?}");
        let (cx, cy) = regions[0].centroid;
        // the square spans 500..=539, centre 519.5
        assert!((cx - 519.5).abs() <= 5.0 && (cy - 319.5).abs() <= 5.0, "{cx} {cy}");
    }

    #[test]
    fn two_separate_blobs_give_two_regions() {
        let img = gen_background(&PanelSpec::standard(128, 10)).unwrap();
        let (img, _) = inject_all(&img, &[blob_spec(300, 300, 18), blob_spec(500, 300, 18)]).unwrap();
        let est = analyze_default(&img).unwrap();
        let r = build_reference(&img, &est).unwrap();
        assert_eq!(diff_localize(&img, &r, &DiffParams::default()).len(), 2);
    }

    fn region_at(cx: f64, cy: f64, area: usize) -> CoarseRegion {
        CoarseRegion {
            bbox: BBox::new(cx as usize, cy as usize, 1, 1),
            area,
            centroid: (cx, cy),
        }
    }

    #[test]
    fn framing_centres_and_clamps() {
        let b = frame_patches(&[region_at(100.0, 100.0, 50)], 1024, 768).unwrap();
        assert_eq!(b, vec![BBox::new(0, 0, 224, 224)]);
        let b = frame_patches(&[region_at(512.0, 384.0, 50)], 1024, 768).unwrap();
        assert_eq!(b, vec![BBox::new(400, 272, 224, 224)]);
        let b = frame_patches(&[region_at(1020.0, 760.0, 50)], 1024, 768).unwrap();
        assert_eq!(b, vec![BBox::new(800, 544, 224, 224)]);
    }

    #[test]
    fn framing_deduplicates_identical_centroids() {
        let b = frame_patches(&[region_at(400.0, 300.0, 30), region_at(400.0, 300.0, 90)], 1024, 768).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn framing_small_image_rejected() {
        let e = frame_patches(&[], 200, 768).unwrap_err();
        assert_eq!(e.code, ErrorCode::ImageTooSmall);
    }

    #[test]
    fn heatmap_of_clean_noiseless_image_is_uniform() {
        let img = gen_background(&PanelSpec::standard(128, 12).noiseless()).unwrap();
        let est = analyze_default(&img).unwrap();
        let h = surrogate_heatmap(&img, &est).unwrap();
        let u = 1.0 / (1024.0 * 768.0) as f32;
        assert!(h.data().iter().all(|&v| (v - u).abs() < 1e-12));
    }

    #[test]
    fn heatmap_mass_concentrates_on_blob() {
        let img = gen_background(&PanelSpec::standard(128, 13)).unwrap();
        let (img, _, _) = inject_defect(&img, &blob_spec(500, 300, 20)).unwrap();
        let est = analyze_default(&img).unwrap();
        let h = surrogate_heatmap(&img, &est).unwrap();
        let total: f64 = h.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-3);
        assert!(heat_mass(&h, centered_patch(500.0, 300.0, 1024, 768)) >= 0.5);
    }

    #[test]
    fn heatmap_mass_splits_between_equal_blobs() {
        let img = gen_background(&PanelSpec::standard(128, 14)).unwrap();
        let (img, _) = inject_all(&img, &[blob_spec(300, 250, 20), blob_spec(700, 500, 20)]).unwrap();
        let est = analyze_default(&img).unwrap();
        let h = surrogate_heatmap(&img, &est).unwrap();
        assert!(heat_mass(&h, centered_patch(300.0, 250.0, 1024, 768)) >= 0.3);
        assert!(heat_mass(&h, centered_patch(700.0, 500.0, 1024, 768)) >= 0.3);
    }

    struct FixedHeat(Raster<f32>);
    impl HeatmapProvider for FixedHeat {
        fn heatmap(&self, _: &InspectionImage) -> Result<Raster<f32>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn agreeing_sources_auto_accept_and_single_source_stays_pending() {
        let img = gen_background(&PanelSpec::standard(128, 15)).unwrap();
        let (img, _, _) = inject_defect(&img, &blob_spec(500, 300, 20)).unwrap();
        let both = autolabel_image(&img, &SurrogateHeatmap::default(), &AutolabelPolicy::default()).unwrap();
        assert_eq!(both.len(), 1);
        assert_eq!(both[0].status, CandidateStatus::Accepted);
        assert_eq!(both[0].sources, BTreeSet::from([Source::Periodic, Source::Heatmap]));
        assert_eq!(both[0].decided_by.as_deref(), Some(AUTO_DECIDER));

        let uniform = FixedHeat(Raster::filled(1024, 768, 1.0));
        let single = autolabel_image(&img, &uniform, &AutolabelPolicy::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].status, CandidateStatus::Pending);
        assert_eq!(single[0].sources, BTreeSet::from([Source::Periodic]));
        assert!(single[0].decided_by.is_none());
    }

    #[test]
    fn unlabeled_images_are_skipped_and_clean_images_add_nothing() {
        let img = gen_background(&PanelSpec::standard(128, 16)).unwrap();
        let out = autolabel_dataset(
            &[
                LabeledImage { image: &img, label: None },
                LabeledImage {
                    image: &img,
                    label: Some(PatchLabel::NoDefect),
                },
            ],
            &SurrogateHeatmap::default(),
            &AutolabelPolicy::default(),
        );
        assert!(out.candidates.is_empty());
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].code, ErrorCode::LabelMissing);
    }

    fn sources(n: usize) -> Vec<NegativeSource> {
        (0..n)
            .map(|i| NegativeSource {
                image_id: format!("clean-{i}"),
                width: 1024,
                height: 768,
            })
            .collect()
    }

    #[test]
    fn negatives_are_seeded_and_in_bounds() {
        let a = sample_negative_patches(&sources(5), 1000, 7).unwrap();
        let b = sample_negative_patches(&sources(5), 1000, 7).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a.iter().all(|c| c.patch.fits_in(1024, 768) && c.status == CandidateStatus::Accepted));
        assert!(a.iter().all(|c| c.proposed_label == PatchLabel::NoDefect));
    }

    #[test]
    fn negatives_edge_cases() {
        assert_eq!(
            sample_negative_patches(&[], 3, 1).unwrap_err().code,
            ErrorCode::NoNegativeSources
        );
        assert!(sample_negative_patches(&sources(1), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn splits_are_seeded_8_1_1() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let s = assign_splits(&ids, 3);
        let n = |k: Split| s.values().filter(|&&v| v == k).count();
        assert_eq!((n(Split::Train), n(Split::Validate), n(Split::Test)), (80, 10, 10));
        assert_eq!(s, assign_splits(&ids, 3));
        assert_ne!(s, assign_splits(&ids, 4));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ManifestRecord {
            image_id: "a".into(),
            image_path: "a.png".into(),
            mask_path: None,
            patch: Some(BBox::new(1, 2, 224, 224)),
            label: PatchLabel::Defect,
            class: Some("blob".into()),
            status: CandidateStatus::Accepted,
            sources: vec![Source::Periodic, Source::Heatmap],
            split: Split::Test,
            recipe: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        for key in ["\"image_path\"", "\"x\":1", "\"w", "\"label\":\"defect\"", "\"split\":\"test\""] {
            assert!(line.contains(key.trim_end_matches('w')), "{line}");
        }
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &[rec.clone()]).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), vec![rec]);
    }
}
