//! Sliding-window patch identification, unique-max selection and merging
//! of adjacent defect windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::Integral;
use crate::raster::{BBox, InspectionImage, Raster};
use crate::reference::PATCH;

pub const STRIDE: usize = PATCH / 2;
/// Largest merged patch side.
pub const MAX_MERGED: usize = 2 * PATCH;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    /// Top-left corners in row-major order.
    pub anchors: Vec<(usize, usize)>,
    pub window: usize,
    pub stride: usize,
}

impl WindowGrid {
    pub fn boxes(&self) -> impl Iterator<Item = BBox> + '_ {
        self.anchors.iter().map(|&(x, y)| BBox::new(x, y, self.window, self.window))
    }
}

fn axis_anchors(extent: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * STRIDE).take_while(|a| a + PATCH <= extent).collect();
    let last = *out.last().expect("extent >= PATCH");
    if last + PATCH < extent {
        out.push(extent - PATCH);
    }
    out
}

pub fn slide_windows(width: usize, height: usize) -> Result<WindowGrid> {
    if width < PATCH || height < PATCH {
        return Err(Error::new(
            ErrorCode::ImageTooSmall,
            format!("{width}x{height} is smaller than {PATCH}x{PATCH}"),
        ));
    }
    let xs = axis_anchors(width);
    let ys = axis_anchors(height);
    let anchors = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(WindowGrid {
        anchors,
        window: PATCH,
        stride: STRIDE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub defect_probability: f64,
}

/// Scores one window of an image. Implementations must be deterministic.
pub trait BinaryPatchClassifier: Send + Sync {
    fn score(&self, image: &InspectionImage, window: BBox) -> Result<f64>;
}

/// Scores 1.0 for windows touching a known defect mask, 0.0 otherwise.
pub struct OracleClassifier {
    table: Integral,
}

impl OracleClassifier {
    pub fn new(mask: &Raster<bool>) -> Self {
        OracleClassifier {
            table: Integral::from_fn(mask.width(), mask.height(), |x, y| mask.get(x, y) as u8 as f64),
        }
    }
}

impl BinaryPatchClassifier for OracleClassifier {
    fn score(&self, _image: &InspectionImage, w: BBox) -> Result<f64> {
        Ok(if self.table.sum(w.x, w.y, w.right(), w.bottom()) > 0.0 { 1.0 } else { 0.0 })
    }
}

pub fn score_windows(
    classifier: &dyn BinaryPatchClassifier,
    image: &InspectionImage,
    grid: &WindowGrid,
) -> Result<Vec<PatchScore>> {
    grid.boxes()
        .enumerate()
        .map(|(i, b)| {
            let p = classifier.score(image, b).map_err(|e| {
                Error::new(ErrorCode::ClassifierFailure, format!("anchor {i} at ({}, {}): {e}", b.x, b.y))
            })?;
            if !p.is_finite() {
                return Err(Error::new(
                    ErrorCode::ClassifierFailure,
                    format!("anchor {i} at ({}, {}): non-finite score {p}", b.x, b.y),
                ));
            }
            Ok(PatchScore {
                bbox: b,
                defect_probability: p,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub patch: Option<BBox>,
    pub top_score: f64,
}

fn better(a: &PatchScore, b: &PatchScore) -> bool {
    a.defect_probability > b.defect_probability
        || (a.defect_probability == b.defect_probability && (a.bbox.y, a.bbox.x) < (b.bbox.y, b.bbox.x))
}

/// Highest-scoring window, ties to the smallest `(y, x)`; none below `theta`.
pub fn select_defect_patch(scores: &[PatchScore], theta: f64) -> Selection {
    let best = scores.iter().fold(None::<&PatchScore>, |acc, s| match acc {
        Some(a) if !better(s, a) => Some(a),
        _ => Some(s),
    });
    match best {
        None => Selection {
            patch: None,
            top_score: 0.0,
        },
        Some(b) => Selection {
            patch: (b.defect_probability >= theta).then_some(b.bbox),
            top_score: b.defect_probability,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRegion {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Best member window.
    pub peak: BBox,
    pub members: Vec<BBox>,
}

fn merged_side(span: usize) -> Option<usize> {
    [PATCH, MAX_MERGED].into_iter().find(|&s| s >= span)
}

fn place(center: f64, side: usize, extent: usize) -> usize {
    let start = (center - side as f64 / 2.0).round() as i64;
    start.clamp(0, extent.saturating_sub(side) as i64) as usize
}

/// Clusters windows whose centres are within one stride on both axes and
/// replaces each cluster by the smallest 224/448 box holding its union.
/// Clusters are returned best-scoring first.
pub fn merge_regions(boxes: &[PatchScore], width: usize, height: usize) -> Vec<MergedRegion> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let (ax, ay) = boxes[i].bbox.center();
            let (bx, by) = boxes[j].bbox.center();
            if (ax - bx).abs() <= STRIDE as f64 && (ay - by).abs() <= STRIDE as f64 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[r]].push(i);
    }
    let mut out: Vec<MergedRegion> = clusters
        .into_iter()
        .map(|idx| {
            let union = idx[1..]
                .iter()
                .fold(boxes[idx[0]].bbox, |u, &i| u.union(&boxes[i].bbox));
            let k = idx.len() as f64;
            let cx = idx.iter().map(|&i| boxes[i].bbox.center().0).sum::<f64>() / k;
            let cy = idx.iter().map(|&i| boxes[i].bbox.center().1).sum::<f64>() / k;
            let (ux, uy) = union.center();
            let (w, x) = match merged_side(union.width) {
                Some(s) => (s, place(ux, s, width)),
                None => (MAX_MERGED, place(cx, MAX_MERGED, width)),
            };
            let (h, y) = match merged_side(union.height) {
                Some(s) => (s, place(uy, s, height)),
                None => (MAX_MERGED, place(cy, MAX_MERGED, height)),
            };
            let best = idx
                .iter()
                .map(|&i| &boxes[i])
                .fold(&boxes[idx[0]], |a, s| if better(s, a) { s } else { a });
            MergedRegion {
                bbox: BBox::new(x, y, w.min(width), h.min(height)),
                score: best.defect_probability,
                peak: best.bbox,
                members: idx.iter().map(|&i| boxes[i].bbox).collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite")
            .then((a.peak.y, a.peak.x).cmp(&(b.peak.y, b.peak.x)))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub theta_det: f64,
    /// Keep every merged region instead of only the best one.
    pub multi_defect: bool,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            theta_det: 0.5,
            multi_defect: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub selection: Selection,
    /// Empty exactly when no window reaches the threshold (FAS).
    pub regions: Vec<MergedRegion>,
    pub scores: Vec<PatchScore>,
}

impl Detection {
    pub fn is_defect(&self) -> bool {
        !self.regions.is_empty()
    }
}

pub fn detect(classifier: &dyn BinaryPatchClassifier, image: &InspectionImage, params: &DetectParams) -> Result<Detection> {
    let grid = slide_windows(image.width(), image.height())?;
    let scores = score_windows(classifier, image, &grid)?;
    let selection = select_defect_patch(&scores, params.theta_det);
    let above: Vec<PatchScore> = scores
        .iter()
        .filter(|s| s.defect_probability >= params.theta_det)
        .copied()
        .collect();
    let mut regions = merge_regions(&above, image.width(), image.height());
    if !params.multi_defect {
        regions.truncate(1);
    }
    Ok(Detection {
        selection,
        regions,
        scores,
    })
}
