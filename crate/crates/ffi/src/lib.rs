//! C ABI over `panel_inspect`.
//!
//! Every function returns a [`PiStatus`]; on failure the thread's last
//! error holds the `module/CODE` string and a message. Handles are opaque
//! and freed by their `pi_*_free` function; freeing NULL is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use panel_inspect::classify::{DefectClassifier, LogisticModel, ReferencePatchDetector};
use panel_inspect::config::RunConfig;
use panel_inspect::detect::{BinaryPatchClassifier, OracleClassifier};
use panel_inspect::periodicity::analyze;
use panel_inspect::pipeline::{estimate_period, inspect, Inspection, Models, PipelineConfig, Verdict};
use panel_inspect::raster::{load_mask_png, Raster};
use panel_inspect::selfref::{mask_to_image_frame, segment_region};
use panel_inspect::{BBox, Error, ErrorCode, InspectionImage};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiStatus {
    Ok = 0,
    /// A required pointer was NULL.
    NullArgument = 1,
    /// A string was not UTF-8 or a size did not fit.
    InvalidArgument = 2,
    /// Input data or configuration rejected; see the last error code.
    InvalidInput = 3,
    /// No usable period in the image.
    NotPeriodic = 4,
    /// A file could not be read or written.
    Io = 5,
    /// A model artifact is malformed or incompatible.
    BadArtifact = 6,
    /// Any other library error.
    Failed = 7,
    /// A panic was caught at the boundary.
    Panic = 8,
}

pub struct PiImage(InspectionImage);
pub struct PiConfig(RunConfig);
pub struct PiDetector(Arc<dyn BinaryPatchClassifier>);
pub struct PiClassifier {
    model: Arc<LogisticModel>,
    names: Vec<CString>,
}
pub struct PiInspection {
    inner: Inspection,
    json: CString,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PiPeriod {
    pub period: u32,
    pub count: u32,
    pub confidence: f64,
    /// Start column of a defect-free period, or -1.
    pub clean_offset: i64,
    pub dirty_intervals: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PiBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PiDefect {
    pub patch: PiBox,
    pub detection_score: f64,
    pub defect_pixels: u64,
    /// Index into the classifier's class list, or -1 without a classifier.
    pub top_class: i32,
    pub top_score: f64,
}

struct LastError {
    code: CString,
    message: CString,
}

thread_local! {
    static LAST: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_last(code: &str, message: &str) {
    let clean = |s: &str| CString::new(s.replace('\0', " ")).expect("no interior NUL");
    LAST.with(|l| {
        *l.borrow_mut() = Some(LastError {
            code: clean(code),
            message: clean(message),
        })
    });
}

struct Fail(PiStatus, String, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.code {
            ErrorCode::NotPeriodic | ErrorCode::NoPeak | ErrorCode::AllDirty | ErrorCode::NoCleanPeriod => {
                PiStatus::NotPeriodic
            }
            ErrorCode::Io => PiStatus::Io,
            ErrorCode::BadArtifact => PiStatus::BadArtifact,
            ErrorCode::InvalidImage | ErrorCode::InvalidConfig => PiStatus::InvalidInput,
            _ => PiStatus::Failed,
        };
        Fail(status, e.code.to_string(), e.message)
    }
}

fn fail(status: PiStatus, msg: &str) -> Fail {
    let code = match status {
        PiStatus::NullArgument => "ffi/NULL_ARGUMENT",
        PiStatus::InvalidArgument => "ffi/INVALID_ARGUMENT",
        _ => "ffi/FAILED",
    };
    Fail(status, code.into(), msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PiStatus::Ok,
        Ok(Err(Fail(s, code, msg))) => {
            set_last(&code, &msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last("ffi/PANIC", &msg);
            PiStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(PiStatus::NullArgument, "path is NULL"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(PiStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(PiStatus::NullArgument, &format!("{what} is NULL")))
}

unsafe fn write_out<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(PiStatus::NullArgument, "out pointer is NULL"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

fn pipeline(cfg: *const PiConfig) -> PipelineConfig {
    unsafe { cfg.as_ref() }.map_or_else(|| RunConfig::default().pipeline(), |c| c.0.pipeline())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn pi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `module/CODE` of this thread's last failure, or NULL. Valid until the
/// next failing call on the thread.
#[no_mangle]
pub extern "C" fn pi_last_error_code() -> *const c_char {
    LAST.with(|l| l.borrow().as_ref().map_or(ptr::null(), |e| e.code.as_ptr()))
}

/// Message of this thread's last failure, or NULL.
#[no_mangle]
pub extern "C" fn pi_last_error_message() -> *const c_char {
    LAST.with(|l| l.borrow().as_ref().map_or(ptr::null(), |e| e.message.as_ptr()))
}

/// Loads a run configuration from TOML.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_config_load(path: *const c_char, out: *mut *mut PiConfig) -> PiStatus {
    guard(|| {
        let p = path_arg(path)?;
        write_out(out, PiConfig(RunConfig::load(&p)?))
    })
}

/// # Safety
/// `cfg` is NULL or came from `pi_config_load`.
#[no_mangle]
pub unsafe extern "C" fn pi_config_free(cfg: *mut PiConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Decodes a PNG or other supported image file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_image_load(path: *const c_char, out: *mut *mut PiImage) -> PiStatus {
    guard(|| {
        let p = path_arg(path)?;
        write_out(out, PiImage(InspectionImage::load(&p)?))
    })
}

/// Copies an 8-bit image. `channels` is 1 (gray) or 3 (RGB, interleaved);
/// rows are `stride` bytes apart.
///
/// # Safety
/// `data` points to `stride * height` readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_image_from_pixels(
    data: *const u8,
    width: u32,
    height: u32,
    stride: usize,
    channels: u32,
    out: *mut *mut PiImage,
) -> PiStatus {
    guard(|| {
        if data.is_null() {
            return Err(fail(PiStatus::NullArgument, "data is NULL"));
        }
        let (w, h, c) = (width as usize, height as usize, channels as usize);
        if !(c == 1 || c == 3) || stride < w * c {
            return Err(fail(PiStatus::InvalidArgument, "channels must be 1 or 3 and stride >= width * channels"));
        }
        let bytes = std::slice::from_raw_parts(data, stride * h);
        let img = if c == 1 {
            InspectionImage::gray(Raster::from_fn(w, h, |x, y| bytes[y * stride + x]))?
        } else {
            InspectionImage::rgb(Raster::from_fn(w, h, |x, y| {
                let i = y * stride + 3 * x;
                [bytes[i], bytes[i + 1], bytes[i + 2]]
            }))?
        };
        write_out(out, PiImage(img))
    })
}

/// # Safety
/// `img` is a valid image handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pi_image_size(img: *const PiImage, width: *mut u32, height: *mut u32) -> PiStatus {
    guard(|| {
        let img = handle(img, "image")?;
        if width.is_null() || height.is_null() {
            return Err(fail(PiStatus::NullArgument, "out pointer is NULL"));
        }
        *width = img.0.width() as u32;
        *height = img.0.height() as u32;
        Ok(())
    })
}

/// # Safety
/// `img` is NULL or came from a `pi_image_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn pi_image_free(img: *mut PiImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Horizontal period and band classification. `cfg` may be NULL.
///
/// # Safety
/// `img` is a valid image handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_estimate_period(img: *const PiImage, cfg: *const PiConfig, out: *mut PiPeriod) -> PiStatus {
    guard(|| {
        let img = handle(img, "image")?;
        if out.is_null() {
            return Err(fail(PiStatus::NullArgument, "out pointer is NULL"));
        }
        let p = pipeline(cfg);
        let est = analyze(&img.0, p.projection, &p.search, &p.bands)?;
        *out = PiPeriod {
            period: est.period as u32,
            count: est.count as u32,
            confidence: est.confidence,
            clean_offset: est.clean_offset.map_or(-1, |o| o as i64),
            dirty_intervals: est.dirty_intervals.len() as u32,
        };
        Ok(())
    })
}

/// Loads a binary window classifier artifact.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_detector_load(path: *const c_char, out: *mut *mut PiDetector) -> PiStatus {
    guard(|| {
        let p = path_arg(path)?;
        let det = ReferencePatchDetector {
            model: LogisticModel::load(&p)?,
        };
        write_out(out, PiDetector(Arc::new(det)))
    })
}

/// A detector that scores windows by overlap with a ground-truth mask PNG.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_detector_from_mask(path: *const c_char, out: *mut *mut PiDetector) -> PiStatus {
    guard(|| {
        let p = path_arg(path)?;
        write_out(out, PiDetector(Arc::new(OracleClassifier::new(&load_mask_png(&p)?))))
    })
}

/// # Safety
/// `det` is NULL or came from a `pi_detector_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn pi_detector_free(det: *mut PiDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Loads a defect classifier artifact.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_classifier_load(path: *const c_char, out: *mut *mut PiClassifier) -> PiStatus {
    guard(|| {
        let p = path_arg(path)?;
        let model = LogisticModel::load(&p)?;
        let names = model
            .meta
            .class_list
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| fail(PiStatus::BadArtifact, "class name contains NUL")))
            .collect::<Result<_, _>>()?;
        write_out(
            out,
            PiClassifier {
                model: Arc::new(model),
                names,
            },
        )
    })
}

/// Number of classes the classifier scores.
///
/// # Safety
/// `clf` is a valid classifier handle.
#[no_mangle]
pub unsafe extern "C" fn pi_classifier_class_count(clf: *const PiClassifier, out: *mut u32) -> PiStatus {
    guard(|| {
        let clf = handle(clf, "classifier")?;
        if out.is_null() {
            return Err(fail(PiStatus::NullArgument, "out pointer is NULL"));
        }
        *out = clf.names.len() as u32;
        Ok(())
    })
}

/// Class name at `index`, owned by the handle; NULL when out of range.
///
/// # Safety
/// `clf` is a valid classifier handle.
#[no_mangle]
pub unsafe extern "C" fn pi_classifier_class_name(clf: *const PiClassifier, index: u32) -> *const c_char {
    clf.as_ref()
        .and_then(|c| c.names.get(index as usize))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// # Safety
/// `clf` is NULL or came from `pi_classifier_load`.
#[no_mangle]
pub unsafe extern "C" fn pi_classifier_free(clf: *mut PiClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Self-reference segmentation of one patch. `mask_out` receives
/// `width * height` bytes of the image frame, 255 for defect pixels; it may
/// be NULL. `pixels_out` receives the defect pixel count.
///
/// # Safety
/// `img` is a valid image handle; `mask_out` is NULL or holds
/// `width * height` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pi_segment(
    img: *const PiImage,
    cfg: *const PiConfig,
    patch: PiBox,
    mask_out: *mut u8,
    pixels_out: *mut u64,
) -> PiStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let b = BBox::new(patch.x as usize, patch.y as usize, patch.width as usize, patch.height as usize);
        let (w, h) = (img.0.width(), img.0.height());
        if b.width == 0 || b.height == 0 || !b.fits_in(w, h) {
            return Err(fail(PiStatus::InvalidArgument, "patch is empty or leaves the image"));
        }
        let p = pipeline(cfg);
        let est = estimate_period(&img.0, &p)?;
        let seg = segment_region(&img.0, b, &est, &p.matching, &p.diff)?;
        if !mask_out.is_null() {
            let full = mask_to_image_frame(&seg.mask, b, w, h);
            let dst = std::slice::from_raw_parts_mut(mask_out, w * h);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if full.get(x, y) { 255 } else { 0 };
                }
            }
        }
        if !pixels_out.is_null() {
            *pixels_out = seg.mask.defect_pixel_count as u64;
        }
        Ok(())
    })
}

/// Full pipeline. `clf` and `cfg` may be NULL.
///
/// # Safety
/// `img` and `det` are valid handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_inspect(
    img: *const PiImage,
    det: *const PiDetector,
    clf: *const PiClassifier,
    cfg: *const PiConfig,
    out: *mut *mut PiInspection,
) -> PiStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let det = handle(det, "detector")?;
        let models = Models {
            detector: det.0.clone(),
            classifier: clf.as_ref().map(|c| c.model.clone() as Arc<dyn DefectClassifier>),
            layout: None,
        };
        let ins = inspect(&img.0, &models, &pipeline(cfg)).map_err(|e| e.error)?;
        let json = serde_json::to_string(&ins).map_err(|e| fail(PiStatus::Failed, &e.to_string()))?;
        let json = CString::new(json).map_err(|e| fail(PiStatus::Failed, &e.to_string()))?;
        write_out(out, PiInspection { inner: ins, json })
    })
}

/// Whether any defect was found.
///
/// # Safety
/// `ins` is a valid inspection handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pi_inspection_is_defect(ins: *const PiInspection) -> bool {
    ins.as_ref().is_some_and(|i| i.inner.verdict == Verdict::Defect)
}

/// # Safety
/// `ins` is a valid inspection handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pi_inspection_defect_count(ins: *const PiInspection) -> u32 {
    ins.as_ref().map_or(0, |i| i.inner.defects.len() as u32)
}

/// # Safety
/// `ins` is a valid inspection handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pi_inspection_defect(ins: *const PiInspection, index: u32, out: *mut PiDefect) -> PiStatus {
    guard(|| {
        let ins = handle(ins, "inspection")?;
        if out.is_null() {
            return Err(fail(PiStatus::NullArgument, "out pointer is NULL"));
        }
        let d = ins
            .inner
            .defects
            .get(index as usize)
            .ok_or_else(|| fail(PiStatus::InvalidArgument, "defect index out of range"))?;
        let top = d
            .class_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.score.total_cmp(&b.1.score));
        *out = PiDefect {
            patch: PiBox {
                x: d.patch_box.x as u32,
                y: d.patch_box.y as u32,
                width: d.patch_box.width as u32,
                height: d.patch_box.height as u32,
            },
            detection_score: d.detection_score,
            defect_pixels: d.defect_pixel_count as u64,
            top_class: top.map_or(-1, |(i, _)| i as i32),
            top_score: top.map_or(0.0, |(_, s)| s.score),
        };
        Ok(())
    })
}

/// The inspection as JSON, owned by the handle.
///
/// # Safety
/// `ins` is a valid inspection handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pi_inspection_json(ins: *const PiInspection) -> *const c_char {
    ins.as_ref().map_or(ptr::null(), |i| i.json.as_ptr())
}

/// # Safety
/// `ins` is NULL or came from `pi_inspect`.
#[no_mangle]
pub unsafe extern "C" fn pi_inspection_free(ins: *mut PiInspection) {
    if !ins.is_null() {
        drop(Box::from_raw(ins));
    }
}
