//! End-to-end inspection of one image with per-stage timings and
//! stage-tagged failures.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classify::{background_or_fallback, build_channel_stack, DefectClassifier};
use crate::detect::{self, BinaryPatchClassifier, DetectParams};
use crate::error::{Error, ErrorCode, Result};
use crate::impact::{evaluate_impact, ImpactVerdict, Layout};
use crate::periodicity::{self, BandPolicy, PeriodEstimate, PeriodSearch, ProjectionConfig};
use crate::raster::{BBox, ImageMeta, InspectionImage, Raster};
use crate::reference::{centered_patch, DiffParams, PATCH};
use crate::selfref::{self, mask_to_image_frame, MatchParams, SegmentSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decode,
    Period,
    Windows,
    Score,
    Select,
    Match,
    Segment,
    Stack,
    Classify,
    Impact,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Decode => "decode",
            Stage::Period => "period",
            Stage::Windows => "windows",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Match => "match",
            Stage::Segment => "segment",
            Stage::Stack => "stack",
            Stage::Classify => "classify",
            Stage::Impact => "impact",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {error}")]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub projection: ProjectionConfig,
    pub search: PeriodSearch,
    pub bands: BandPolicy,
    pub detect: DetectParams,
    pub matching: MatchParams,
    pub diff: DiffParams,
}

/// Models one inspection runs with.
#[derive(Clone)]
pub struct Models {
    pub detector: Arc<dyn BinaryPatchClassifier>,
    pub classifier: Option<Arc<dyn DefectClassifier>>,
    pub layout: Option<Arc<Layout>>,
}

/// Run-length mask in patch coordinates: alternating run lengths in row
/// order, starting with an unset run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRef {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl MaskRef {
    pub fn encode(m: &Raster<bool>) -> Self {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0u32;
        for &b in m.data() {
            if b != cur {
                runs.push(len);
                cur = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        MaskRef {
            width: m.width(),
            height: m.height(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<Raster<bool>> {
        let mut data = Vec::with_capacity(self.width * self.height);
        for (i, &r) in self.runs.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Raster::from_vec(self.width, self.height, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub patch_box: BBox,
    pub detection_score: f64,
    pub background_box: Option<BBox>,
    pub ncc: Option<f64>,
    pub segmentation: SegmentSource,
    pub defect_pixel_count: usize,
    pub mask: MaskRef,
    /// Window the classifier saw, centred on the segmented defect.
    #[serde(default)]
    pub class_box: Option<BBox>,
    pub class_scores: Vec<ClassScore>,
    pub top_class: Option<String>,
    pub impact: Vec<ImpactVerdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Defect,
    NoDefect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub image_id: String,
    pub verdict: Verdict,
    pub defects: Vec<DefectRecord>,
    pub period: usize,
    /// Milliseconds per stage name.
    pub timing_ms: BTreeMap<String, f64>,
}

struct Timer {
    timing: BTreeMap<String, f64>,
}

impl Timer {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T, StageError> {
        let start = Instant::now();
        let out = f();
        *self.timing.entry(stage.name().to_string()).or_insert(0.0) += start.elapsed().as_secs_f64() * 1000.0;
        out.map_err(|error| StageError { stage, error })
    }
}

/// Period estimate; an all-dirty band classification keeps the raw estimate.
pub fn estimate_period(image: &InspectionImage, cfg: &PipelineConfig) -> Result<PeriodEstimate> {
    let projections = periodicity::project_horizontal(image, cfg.projection)?;
    let estimate = periodicity::estimate_image_period(&projections, &cfg.search)?;
    match periodicity::classify_projection_bands(&projections, &estimate, &cfg.bands) {
        Ok(e) => Ok(e),
        Err(e) if e.code == ErrorCode::AllDirty => {
            log::debug!("{}: {e}", image.meta.image_id);
            Ok(estimate)
        }
        Err(e) => Err(e),
    }
}

pub fn inspect_png(bytes: &[u8], meta: ImageMeta, models: &Models, cfg: &PipelineConfig) -> Result<Inspection, StageError> {
    let mut timer = Timer {
        timing: BTreeMap::new(),
    };
    let image = timer.run(Stage::Decode, || InspectionImage::decode_png(bytes).map(|i| i.with_meta(meta)))?;
    run(&image, models, cfg, timer)
}

/// Period estimate, window scoring, selection and merging, then per region
/// the background match, segmentation, channel stack, classification and
/// impact rules.
fn mask_centroid(m: &Raster<bool>) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

pub fn inspect(image: &InspectionImage, models: &Models, cfg: &PipelineConfig) -> Result<Inspection, StageError> {
    run(
        image,
        models,
        cfg,
        Timer {
            timing: BTreeMap::new(),
        },
    )
}

fn run(image: &InspectionImage, models: &Models, cfg: &PipelineConfig, mut t: Timer) -> Result<Inspection, StageError> {
    let (w, h) = (image.width(), image.height());
    let estimate = t.run(Stage::Period, || estimate_period(image, cfg))?;
    let grid = t.run(Stage::Windows, || detect::slide_windows(w, h))?;
    let scores = t.run(Stage::Score, || detect::score_windows(models.detector.as_ref(), image, &grid))?;
    let regions = t.run(Stage::Select, || {
        let above: Vec<_> = scores
            .iter()
            .filter(|s| s.defect_probability >= cfg.detect.theta_det)
            .copied()
            .collect();
        let mut r = detect::merge_regions(&above, w, h);
        if !cfg.detect.multi_defect {
            r.truncate(1);
        }
        Ok(r)
    })?;
    let mut defects = Vec::with_capacity(regions.len());
    if !regions.is_empty() {
        let gray = image.to_gray();
        let rgb = image.to_rgb();
        for region in &regions {
            let b = region.bbox;
            let found = t.run(Stage::Match, || {
                Ok(selfref::match_background_gray(&gray, b, estimate.period, &cfg.matching))
            })?;
            let seg = t.run(Stage::Segment, || {
                selfref::segment_after_match(&gray, b, &estimate, found, &cfg.matching, &cfg.diff)
            })?;
            let (class_box, class_scores, top_class) = match &models.classifier {
                None => (None, Vec::new(), None),
                Some(clf) => {
                    let mode = clf.meta().mode;
                    let (cb, stack) = t.run(Stage::Stack, || {
                        let (cb, cseg) = match mask_centroid(&seg.mask.bits) {
                            Some((cx, cy)) if b.width != PATCH || b.height != PATCH => {
                                let cb = centered_patch(b.x as f64 + cx, b.y as f64 + cy, w, h);
                                let found = selfref::match_background_gray(&gray, cb, estimate.period, &cfg.matching);
                                let s = selfref::segment_after_match(&gray, cb, &estimate, found, &cfg.matching, &cfg.diff)?;
                                (cb, s)
                            }
                            _ => (b, seg.clone()),
                        };
                        let bg = if mode.needs_background() {
                            let m = background_or_fallback(&gray, cb, estimate.period, cseg.background)?;
                            Some(rgb.crop(m.bbox))
                        } else {
                            None
                        };
                        Ok((cb, build_channel_stack(&rgb.crop(cb), bg.as_ref(), Some(&cseg.mask), mode)?))
                    })?;
                    t.run(Stage::Classify, || {
                        let p = clf.predict(&stack)?;
                        let names = &clf.meta().class_list;
                        let top = names[crate::classify::argmax(&p)].clone();
                        let scores = names
                            .iter()
                            .zip(&p)
                            .map(|(c, &s)| ClassScore {
                                class: c.clone(),
                                score: s,
                            })
                            .collect();
                        Ok((Some(cb), scores, Some(top)))
                    })?
                }
            };
            let impact = match &models.layout {
                None => Vec::new(),
                Some(layout) => t.run(Stage::Impact, || {
                    evaluate_impact(&mask_to_image_frame(&seg.mask, b, w, h), layout)
                })?,
            };
            defects.push(DefectRecord {
                patch_box: b,
                detection_score: region.score,
                background_box: seg.background.map(|m| m.bbox),
                ncc: seg.background.map(|m| m.ncc_score),
                segmentation: seg.source,
                class_box,
                defect_pixel_count: seg.mask.defect_pixel_count,
                mask: MaskRef::encode(&seg.mask.bits),
                class_scores,
                top_class,
                impact,
            });
        }
    }
    Ok(Inspection {
        image_id: image.meta.image_id.clone(),
        verdict: if defects.is_empty() {
            Verdict::NoDefect
        } else {
            Verdict::Defect
        },
        defects,
        period: estimate.period,
        timing_ms: t.timing,
    })
}

/// Image-frame union of every defect mask of an inspection.
pub fn inspection_mask(ins: &Inspection, width: usize, height: usize) -> Result<Raster<bool>> {
    let mut out = Raster::filled(width, height, false);
    for d in &ins.defects {
        let m = d.mask.decode()?;
        let b = d.patch_box;
        if !b.fits_in(width, height) || (m.width(), m.height()) != (b.width, b.height) {
            return Err(Error::new(ErrorCode::InvalidImage, "defect mask does not fit the frame"));
        }
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    out.set(b.x + x, b.y + y, true);
                }
            }
        }
    }
    Ok(out)
}
