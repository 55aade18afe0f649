//! Horizontal period estimation for periodic-texture images.
//!
//! The image is cut into overlapping horizontal strips; each strip is
//! summed down its rows into a projection curve, and the curve's
//! symmetric average magnitude sum function (a lag-domain score whose
//! peaks sit at multiples of the repeat length) yields one period
//! estimate per strip. The median over strips is the image period.
//! A second pass compares every period band against the median band
//! profile to find clean and dirty (periodicity-interrupted) bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::raster::{InspectionImage, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub window_height: usize,
    pub step: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            window_height: 64,
            step: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    /// `curves[k][n]` sums rows `k*step ..= k*step + window_height` of column `n`.
    pub curves: Vec<Vec<f64>>,
    pub config: ProjectionConfig,
}

/// Strip projections of an image (gray via fixed luma weights).
pub fn project_horizontal(image: &InspectionImage, cfg: ProjectionConfig) -> Result<ProjectionSet> {
    project_gray(&image.to_gray(), cfg)
}

pub fn project_gray(gray: &Raster<u8>, cfg: ProjectionConfig) -> Result<ProjectionSet> {
    let (n, m) = (gray.width(), gray.height());
    if cfg.step < 1 || cfg.step > cfg.window_height {
        return Err(Error::new(
            ErrorCode::BadStep,
            format!("step {} with window {}", cfg.step, cfg.window_height),
        ));
    }
    if cfg.window_height >= m {
        return Err(Error::new(
            ErrorCode::WindowTooTall,
            format!("window {} for image height {m}", cfg.window_height),
        ));
    }
    // Each strip covers window_height + 1 rows; only strips that fit are kept.
    let count = (m - 1 - cfg.window_height) / cfg.step + 1;
    let curves = (0..count)
        .map(|k| {
            let mut curve = vec![0.0f64; n];
            for row in k * cfg.step..=k * cfg.step + cfg.window_height {
                for (acc, &v) in curve.iter_mut().zip(gray.row(row)) {
                    *acc += v as f64;
                }
            }
            curve
        })
        .collect();
    Ok(ProjectionSet { curves, config: cfg })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamsfCurve {
    /// Lag-indexed values, `values.len() == N`.
    pub values: Vec<f64>,
    pub source_k: usize,
}

/// Symmetric average magnitude sum of a zero-meaned curve:
/// `xi(p) = sum_n |P((n + p) mod N) + P(n)|`.
pub fn samsf(curve: &[f64]) -> Result<SamsfCurve> {
    samsf_indexed(curve, 0)
}

pub fn samsf_indexed(curve: &[f64], source_k: usize) -> Result<SamsfCurve> {
    let n = curve.len();
    if n < 4 {
        return Err(Error::new(ErrorCode::CurveTooShort, format!("curve of {n} samples")));
    }
    let mean = curve.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = curve.iter().map(|v| v - mean).collect();
    // Doubled copy avoids the modulo in the inner loop.
    let doubled: Vec<f64> = centered.iter().chain(centered.iter()).copied().collect();
    let values = (0..n)
        .map(|p| {
            doubled[p..p + n]
                .iter()
                .zip(&centered)
                .map(|(a, b)| (a + b).abs())
                .sum()
        })
        .collect();
    Ok(SamsfCurve { values, source_k })
}

/// Normalized SAMSF where lag `p` wraps on the prefix of length
/// `floor(N/p)*p`, so a period that does not divide `N` is not penalized
/// by the seam. `values[p] = xi_L(p) / xi_L(0)`, mirrored above `N/2`.
pub fn aligned_samsf(curve: &[f64], source_k: usize) -> Result<SamsfCurve> {
    let n = curve.len();
    if n < 4 {
        return Err(Error::new(ErrorCode::CurveTooShort, format!("curve of {n} samples")));
    }
    let mut values = vec![0.0; n];
    let mut centered = vec![0.0; n];
    for p in 0..=n / 2 {
        let len = if p == 0 { n } else { (n / p) * p };
        let c = &curve[..len];
        let mean = c.iter().sum::<f64>() / len as f64;
        for (d, v) in centered.iter_mut().zip(c) {
            *d = v - mean;
        }
        let c = &centered[..len];
        let zero: f64 = c.iter().map(|v| 2.0 * v.abs()).sum();
        values[p] = if zero <= 0.0 {
            0.0
        } else {
            let head: f64 = c[p..].iter().zip(c).map(|(a, b)| (a + b).abs()).sum();
            let tail: f64 = c[..p].iter().zip(&c[len - p..]).map(|(a, b)| (a + b).abs()).sum();
            (head + tail) / zero
        };
    }
    if values[0] > 0.0 {
        values[0] = 1.0;
    }
    for p in n / 2 + 1..n {
        values[p] = values[n - p];
    }
    Ok(SamsfCurve { values, source_k })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodSearch {
    pub min_period: usize,
    /// `None` means `N / 2`.
    pub max_period: Option<usize>,
    /// A peak qualifies when it reaches this fraction of the bounded maximum.
    pub prominence: f64,
    /// The bounded maximum must reach this fraction of `xi(0)`; white noise
    /// sits near `1/sqrt(2)`.
    pub min_peak_ratio: f64,
    /// Evaluate each lag on the longest curve prefix holding whole lag
    /// periods (see [`aligned_samsf`]) instead of the full modular sum.
    pub aligned: bool,
}

impl Default for PeriodSearch {
    fn default() -> Self {
        PeriodSearch {
            min_period: 32,
            max_period: None,
            prominence: 0.99,
            min_peak_ratio: 0.85,
            aligned: true,
        }
    }
}

impl PeriodSearch {
    pub fn with_bounds(min_period: usize, max_period: usize) -> Self {
        PeriodSearch {
            min_period,
            max_period: Some(max_period),
            ..Self::default()
        }
    }

    fn bounds(&self, n: usize) -> Result<(usize, usize)> {
        let hi = self.max_period.unwrap_or(n / 2);
        if self.min_period < 2 || self.min_period >= hi || hi > n / 2 {
            return Err(Error::new(
                ErrorCode::BadBounds,
                format!("bounds [{}, {hi}] for width {n}", self.min_period),
            ));
        }
        Ok((self.min_period, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubPeriod {
    pub period: usize,
    pub prominence: f64,
}

/// Smallest local maximum of `xi` inside the bounds that reaches
/// `prominence * max`; harmonics at multiples therefore lose to the
/// fundamental.
pub fn estimate_subimage_period(curve: &SamsfCurve, search: &PeriodSearch) -> Result<SubPeriod> {
    let xi = &curve.values;
    let n = xi.len();
    let (lo, hi) = search.bounds(n)?;
    let window = &xi[lo..=hi];
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let zero_lag = xi[0];
    if !(zero_lag > 1e-9) || max < search.min_peak_ratio * zero_lag {
        return Err(Error::new(
            ErrorCode::NoPeak,
            format!("strip {} has no prominent lag peak", curve.source_k),
        ));
    }
    let floor = search.prominence * max;
    let at = |p: usize| xi[p % n];
    // First run of lags above the floor; its highest point is the peak.
    let start = (lo..=hi).find(|&p| at(p) >= floor).expect("max is above the floor");
    let mut end = start;
    while end < hi && at(end + 1) >= floor {
        end += 1;
    }
    let top = (start..=end).map(at).fold(f64::NEG_INFINITY, f64::max);
    // Sampling can leave a flat top; take its middle.
    let plateau: Vec<usize> = (start..=end).filter(|&p| at(p) >= top * (1.0 - 1e-9)).collect();
    let period = plateau[(plateau.len() - 1) / 2];
    Ok(SubPeriod {
        period,
        prominence: at(period) / max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    pub period: usize,
    pub count: usize,
    /// Per-strip estimates; `None` where the strip had no peak.
    pub per_subimage: Vec<Option<usize>>,
    pub confidence: f64,
    /// Column where a defect-free period starts; set by [`classify_periods`].
    pub clean_offset: Option<usize>,
    pub dirty_intervals: Vec<ColumnRange>,
    /// Max deviation per band from the median period profile.
    pub band_deviation: Vec<f64>,
    pub projection: ProjectionConfig,
}

impl PeriodEstimate {
    pub fn usable_width(&self) -> usize {
        self.period * self.count
    }

    pub fn is_dirty_column(&self, x: usize) -> bool {
        self.dirty_intervals.iter().any(|r| x >= r.start && x < r.end)
    }

    /// Whether a column range `[x0, x1)` overlaps any dirty interval.
    pub fn touches_dirty(&self, x0: usize, x1: usize) -> bool {
        self.dirty_intervals.iter().any(|r| x0 < r.end && r.start < x1)
    }
}

/// Median of the per-strip periods (strips without a peak are skipped).
pub fn estimate_image_period(projections: &ProjectionSet, search: &PeriodSearch) -> Result<PeriodEstimate> {
    use rayon::prelude::*;
    let n = projections.curves.first().map_or(0, |c| c.len());
    search.bounds(n)?;
    let per_subimage: Vec<Option<usize>> = projections
        .curves
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let xi = if search.aligned { aligned_samsf(c, k)? } else { samsf_indexed(c, k)? };
            match estimate_subimage_period(&xi, search) {
                Ok(sp) => Ok(Some(sp.period)),
                Err(e) if e.code == ErrorCode::NoPeak => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut found: Vec<usize> = per_subimage.iter().flatten().copied().collect();
    if found.len() < 3 {
        return Err(Error::new(
            ErrorCode::NotPeriodic,
            format!("{} of {} strips produced a period", found.len(), per_subimage.len()),
        ));
    }
    found.sort_unstable();
    let period = found[(found.len() - 1) / 2];
    let agreeing = found.iter().filter(|&&t| t.abs_diff(period) <= 2).count();
    let count = n / period;
    if agreeing < 3 || count < 2 {
        return Err(Error::new(
            ErrorCode::NotPeriodic,
            format!("median period {period}: {agreeing} strips agree, {count} periods fit"),
        ));
    }
    Ok(PeriodEstimate {
        period,
        count,
        confidence: agreeing as f64 / per_subimage.len() as f64,
        per_subimage,
        clean_offset: None,
        dirty_intervals: Vec::new(),
        band_deviation: Vec::new(),
        projection: projections.config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPolicy {
    /// A band is dirty when its deviation exceeds this multiple of the
    /// median strip-band deviation.
    pub dirty_factor: f64,
}

impl Default for BandPolicy {
    fn default() -> Self {
        BandPolicy { dirty_factor: 3.0 }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Splits the first `T*C` columns into `C` bands and flags the bands whose
/// strip projections deviate from the per-strip median band profile.
pub fn classify_periods(image: &InspectionImage, estimate: &PeriodEstimate, policy: &BandPolicy) -> Result<PeriodEstimate> {
    let projections = project_horizontal(image, estimate.projection)?;
    classify_projection_bands(&projections, estimate, policy)
}

pub fn classify_projection_bands(
    projections: &ProjectionSet,
    estimate: &PeriodEstimate,
    policy: &BandPolicy,
) -> Result<PeriodEstimate> {
    let (t, c) = (estimate.period, estimate.count);
    let mut cells = vec![vec![0.0f64; c]; projections.curves.len()];
    let mut column = vec![0.0f64; c];
    for (k, curve) in projections.curves.iter().enumerate() {
        for j in 0..t {
            for (b, v) in column.iter_mut().enumerate() {
                *v = curve[b * t + j];
            }
            let mut sorted = column.clone();
            let profile = median(&mut sorted);
            for (b, v) in column.iter().enumerate() {
                cells[k][b] += (v - profile).abs();
            }
        }
        for v in &mut cells[k] {
            *v /= t as f64;
        }
    }
    let mut all: Vec<f64> = cells.iter().flatten().copied().collect();
    let tau = policy.dirty_factor * median(&mut all);
    let band_deviation: Vec<f64> = (0..c)
        .map(|b| cells.iter().map(|row| row[b]).fold(0.0, f64::max))
        .collect();
    let dirty: Vec<bool> = band_deviation.iter().map(|&d| d > tau).collect();
    let clean_band = (0..c)
        .filter(|&b| !dirty[b])
        .min_by(|&a, &b| band_deviation[a].partial_cmp(&band_deviation[b]).expect("finite"));
    let Some(clean_band) = clean_band else {
        return Err(Error::new(ErrorCode::AllDirty, format!("all {c} bands are dirty")));
    };
    let mut out = estimate.clone();
    out.clean_offset = Some(clean_band * t);
    out.dirty_intervals = (0..c)
        .filter(|&b| dirty[b])
        .map(|b| ColumnRange {
            start: b * t,
            end: (b + 1) * t,
        })
        .collect();
    out.band_deviation = band_deviation;
    Ok(out)
}

/// Full analysis: projections, period estimate and band classification.
pub fn analyze(
    image: &InspectionImage,
    cfg: ProjectionConfig,
    search: &PeriodSearch,
    policy: &BandPolicy,
) -> Result<PeriodEstimate> {
    let projections = project_horizontal(image, cfg)?;
    let estimate = estimate_image_period(&projections, search)?;
    classify_projection_bands(&projections, &estimate, policy)
}

pub fn analyze_default(image: &InspectionImage) -> Result<PeriodEstimate> {
    analyze(
        image,
        ProjectionConfig::default(),
        &PeriodSearch::default(),
        &BandPolicy::default(),
    )
}
