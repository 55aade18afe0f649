//! Dataset loading and the training sets built from labeled patches.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::{
    prepare_stack, train_patch_detector, train_reference_classifier, ChannelMode, ChannelStack, ClassCatalogue,
    LogisticModel, PrepareParams, ReferencePatchDetector, TrainParams, TrainReport,
};
use crate::detect::slide_windows;
use crate::error::{Error, ErrorCode, Result};
use crate::pipeline::{estimate_period, PipelineConfig};
use crate::raster::{load_mask_png, BBox, InspectionImage, Raster};
use crate::reference::{read_manifest, ManifestRecord, PatchLabel, Split, PATCH};

/// Largest shift applied to a positive patch when augmenting.
pub const JITTER: i64 = 40;
/// Shifted copies per positive patch.
pub const JITTER_COPIES: usize = 4;

pub struct DatasetItem {
    pub record: ManifestRecord,
    pub image: InspectionImage,
    pub mask: Option<Raster<bool>>,
}

/// Relative paths are tried against the manifest's directory, then as given.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    let joined = base.join(&path);
    if path.is_absolute() || !joined.exists() {
        path
    } else {
        joined
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<DatasetItem>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    records
        .into_par_iter()
        .map(|record| {
            let image = InspectionImage::load(&resolve(base, &record.image_path))?.with_meta(crate::raster::ImageMeta {
                image_id: record.image_id.clone(),
                ..Default::default()
            });
            let mask = record
                .mask_path
                .as_ref()
                .map(|p| load_mask_png(&resolve(base, p)))
                .transpose()?;
            Ok(DatasetItem { record, image, mask })
        })
        .collect()
}

fn shifted(b: BBox, dx: i64, dy: i64, w: usize, h: usize) -> BBox {
    let x = (b.x as i64 + dx).clamp(0, (w - b.width) as i64) as usize;
    let y = (b.y as i64 + dy).clamp(0, (h - b.height) as i64) as usize;
    BBox::new(x, y, b.width, b.height)
}

/// Labeled windows for the binary detector. Each defect patch yields
/// itself plus shifted copies; negatives are sliding windows disjoint from
/// the patch in defect images and random windows of defect-free images,
/// as many as there are positives in total.
pub fn detector_windows<'a>(
    defects: &[(&'a InspectionImage, BBox)],
    clean: &[&'a InspectionImage],
    seed: u64,
) -> Result<Vec<(&'a InspectionImage, BBox, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut hard = Vec::new();
    for &(img, b) in defects {
        let (w, h) = (img.width(), img.height());
        out.push((img, b, true));
        for _ in 0..JITTER_COPIES {
            let s = shifted(b, rng.random_range(-JITTER..=JITTER), rng.random_range(-JITTER..=JITTER), w, h);
            out.push((img, s, true));
        }
        for win in slide_windows(w, h)?.boxes() {
            if !win.intersects(&b) {
                hard.push((img, win, false));
            }
        }
    }
    let pos = out.len();
    let from_clean = if clean.is_empty() { 0 } else { pos / 2 };
    let from_hard = (pos - from_clean).min(hard.len());
    for _ in 0..from_hard {
        let i = rng.random_range(0..hard.len());
        out.push(hard.swap_remove(i));
    }
    for _ in 0..from_clean {
        let img = clean[rng.random_range(0..clean.len())];
        let x = rng.random_range(0..=img.width() - PATCH);
        let y = rng.random_range(0..=img.height() - PATCH);
        out.push((img, BBox::new(x, y, PATCH, PATCH), false));
    }
    Ok(out)
}

pub fn train_detector(
    defects: &[(&InspectionImage, BBox)],
    clean: &[&InspectionImage],
    params: &TrainParams,
    seed: u64,
    version: &str,
) -> Result<(ReferencePatchDetector, TrainReport)> {
    let windows = detector_windows(defects, clean, seed)?;
    train_patch_detector(&windows, params, seed, "detector", version)
}

/// Channel stacks for labeled defect patches; patches whose stack cannot
/// be built are returned as errors alongside.
pub fn class_stacks(
    patches: &[(&InspectionImage, BBox, usize)],
    mode: ChannelMode,
    cfg: &PipelineConfig,
) -> (Vec<(ChannelStack, usize)>, Vec<(String, Error)>) {
    let params = PrepareParams {
        matching: cfg.matching,
        diff: cfg.diff,
    };
    let results: Vec<_> = patches
        .par_iter()
        .map(|&(img, b, y)| {
            estimate_period(img, cfg)
                .and_then(|est| prepare_stack(img, b, &est, mode, &params))
                .map(|s| (s, y))
                .map_err(|e| (img.meta.image_id.clone(), e))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => failed.push(e),
        }
    }
    (ok, failed)
}

#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    patches: &[(&InspectionImage, BBox, usize)],
    catalogue: &ClassCatalogue,
    mode: ChannelMode,
    cfg: &PipelineConfig,
    params: &TrainParams,
    seed: u64,
    model_id: &str,
    version: &str,
) -> Result<(LogisticModel, TrainReport)> {
    let (stacks, failed) = class_stacks(patches, mode, cfg);
    for (id, e) in &failed {
        log::warn!("{id}: {e}");
    }
    train_reference_classifier(&stacks, catalogue, mode, params, seed, model_id, version)
}

/// Defect patches with their class index from manifest records of `split`.
pub fn class_patches<'a>(
    items: &'a [DatasetItem],
    split: Split,
    catalogue: &ClassCatalogue,
) -> Result<Vec<(&'a InspectionImage, BBox, usize)>> {
    let mut out = Vec::new();
    for it in items.iter().filter(|it| it.record.split == split) {
        let (Some(b), Some(c)) = (it.record.patch, it.record.class.as_deref()) else {
            continue;
        };
        if it.record.label != PatchLabel::Defect {
            continue;
        }
        let y = catalogue
            .index(c)
            .ok_or_else(|| Error::new(ErrorCode::InvalidConfig, format!("{}: class {c} not in catalogue", it.record.image_id)))?;
        out.push((&it.image, b, y));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_background, PanelSpec};

    #[test]
    fn windows_are_balanced_and_in_bounds() {
        let a = gen_background(&PanelSpec::standard(96, 1)).unwrap();
        let b = gen_background(&PanelSpec::standard(96, 3)).unwrap();
        let c = gen_background(&PanelSpec::standard(96, 2)).unwrap();
        let defects = [(&a, BBox::new(400, 300, 224, 224)), (&b, BBox::new(0, 0, 224, 224))];
        let w = detector_windows(&defects, &[&c], 3).unwrap();
        let pos = w.iter().filter(|x| x.2).count();
        assert_eq!(pos, 2 * (1 + JITTER_COPIES));
        assert_eq!(w.len(), 2 * pos);
        assert!(w.iter().any(|x| !x.2 && std::ptr::eq(x.0, &c)));
        for (img, win, label) in &w {
            assert!(win.fits_in(img.width(), img.height()));
            if let Some(d) = defects.iter().find(|d| std::ptr::eq(d.0, *img)) {
                if *label {
                    assert!((win.x as i64 - d.1.x as i64).abs() <= JITTER);
                    assert!((win.y as i64 - d.1.y as i64).abs() <= JITTER);
                } else {
                    assert!(!win.intersects(&d.1));
                }
            } else {
                assert!(!label);
            }
        }
    }
}
