//! Run configuration file: paths, thresholds, channel mode and seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::ChannelMode;
use crate::error::{Error, ErrorCode, Result};
use crate::imgproc::ThresholdMode;
use crate::pipeline::PipelineConfig;
use crate::reference::AutolabelPolicy;
use crate::service::http::ServiceSettings;
use crate::service::HEARTBEAT_TIMEOUT_S;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub layout: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub theta_det: f64,
    pub theta_ncc: f64,
    pub theta_hm: f64,
    pub binarization: ThresholdMode,
    pub blur_radius: usize,
    pub morph_radius: usize,
    pub min_area: usize,
    pub min_period: usize,
    pub max_period: Option<usize>,
    pub dirty_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Thresholds {
            theta_det: p.detect.theta_det,
            theta_ncc: p.matching.theta_ncc,
            theta_hm: AutolabelPolicy::default().theta_hm,
            binarization: p.diff.threshold,
            blur_radius: p.diff.blur_radius,
            morph_radius: p.diff.morph_radius,
            min_area: p.diff.min_area,
            min_period: p.search.min_period,
            max_period: p.search.max_period,
            dirty_factor: p.bands.dirty_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub generator: u64,
    pub split: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            generator: 7,
            split: 7,
            train: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub thresholds: Thresholds,
    pub mode: ChannelMode,
    pub multi_defect: bool,
    pub seeds: Seeds,
    pub service: ServiceSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            thresholds: Thresholds::default(),
            mode: ChannelMode::RgbG,
            multi_defect: false,
            seeds: Seeds::default(),
            service: ServiceSettings::default(),
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::new(ErrorCode::InvalidConfig, msg)
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| invalid(e.to_string()))?;
        let cfg: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| invalid(format!("at {}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::parse(&text)
    }

    /// Documented ranges: probabilities and fractions in `[0, 1]`, NCC in
    /// `[-1, 1]`, radii at most 16, periods `2 <= min < max`.
    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        in_range("thresholds.theta_det", t.theta_det, 0.0, 1.0)?;
        in_range("thresholds.theta_ncc", t.theta_ncc, -1.0, 1.0)?;
        in_range("thresholds.theta_hm", t.theta_hm, 0.0, 1.0)?;
        in_range("thresholds.blur_radius", t.blur_radius as f64, 0.0, 16.0)?;
        in_range("thresholds.morph_radius", t.morph_radius as f64, 0.0, 16.0)?;
        in_range("thresholds.dirty_factor", t.dirty_factor, 1.0, 100.0)?;
        match t.binarization {
            ThresholdMode::Otsu { floor } => in_range("thresholds.binarization.floor", floor as f64, 0.0, 255.0)?,
            ThresholdMode::Fixed { value } => in_range("thresholds.binarization.value", value as f64, 0.0, 255.0)?,
        }
        if t.min_period < 2 {
            return Err(invalid(format!("thresholds.min_period = {} must be at least 2", t.min_period)));
        }
        if let Some(max) = t.max_period {
            if max <= t.min_period {
                return Err(invalid(format!("thresholds.max_period = {max} must exceed min_period")));
            }
        }
        let s = &self.service;
        if s.nodes.is_empty() || s.nodes.iter().any(|n| n.capacity == 0) {
            return Err(invalid("service.nodes needs at least one node with capacity >= 1".into()));
        }
        if s.queue_capacity == 0 {
            return Err(invalid("service.queue_capacity must be at least 1".into()));
        }
        in_range("service.heartbeat_every_s", s.heartbeat_every_s, 0.01, HEARTBEAT_TIMEOUT_S / 2.0)?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let t = &self.thresholds;
        let mut p = PipelineConfig::default();
        p.detect.theta_det = t.theta_det;
        p.detect.multi_defect = self.multi_defect;
        p.matching.theta_ncc = t.theta_ncc;
        p.diff.threshold = t.binarization;
        p.diff.blur_radius = t.blur_radius;
        p.diff.morph_radius = t.morph_radius;
        p.diff.min_area = t.min_area;
        p.search.min_period = t.min_period;
        p.search.max_period = t.max_period;
        p.bands.dirty_factor = t.dirty_factor;
        p
    }

    pub fn autolabel(&self) -> AutolabelPolicy {
        let p = self.pipeline();
        AutolabelPolicy {
            theta_hm: self.thresholds.theta_hm,
            diff: p.diff,
            search: p.search,
            bands: p.bands,
            projection: p.projection,
            ..AutolabelPolicy::default()
        }
    }
}
