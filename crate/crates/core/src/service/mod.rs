//! Inspection service: controller (dispatcher and model scheduler), model
//! registry, result publishing, labeling store, persistence and HTTP API.

pub mod controller;
pub mod http;
pub mod labeling;
pub mod node;
pub mod publisher;
pub mod registry;
pub mod scheduler;
pub mod sim;
pub mod store;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classify::ChannelMode;
use crate::pipeline::{DefectRecord, Verdict};

/// Seconds after which a silent node stops receiving jobs.
pub const HEARTBEAT_TIMEOUT_S: f64 = 15.0;

/// Record layout version written into every persisted record.
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scope {
    pub product_id: String,
    pub layer_id: String,
}

impl Scope {
    pub fn new(product: &str, layer: &str) -> Self {
        Scope {
            product_id: product.to_string(),
            layer_id: layer.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKey {
    pub model_id: String,
    pub version: String,
}

impl ModelKey {
    pub fn new(id: &str, version: &str) -> Self {
        ModelKey {
            model_id: id.to_string(),
            version: version.to_string(),
        }
    }
}

impl std::fmt::Display for ModelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.model_id, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStatus {
    Registered,
    Loading,
    Loaded,
    Unloading,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub version: String,
    pub scope: Scope,
    pub mode: ChannelMode,
    /// Classifier artifact.
    pub artifact: String,
    /// Binary window detector artifact.
    #[serde(default)]
    pub detector_artifact: Option<String>,
    /// Impact layout document.
    #[serde(default)]
    pub layout: Option<String>,
    #[serde(default = "registered")]
    pub status: ModelStatus,
}

fn registered() -> ModelStatus {
    ModelStatus::Registered
}

impl ModelDescriptor {
    pub fn key(&self) -> ModelKey {
        ModelKey::new(&self.model_id, &self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: String,
    pub capacity: usize,
    pub loaded_models: std::collections::BTreeSet<ModelKey>,
    pub outstanding_jobs: usize,
    /// Clock seconds of the last heartbeat.
    pub last_heartbeat: f64,
    pub available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Dispatched,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub image_ref: String,
    pub image_id: String,
    pub scope: Scope,
    pub state: JobState,
    pub assigned_node: Option<String>,
    pub result_ref: Option<String>,
    /// Dispatch attempts, counting re-dispatches after a stale node.
    pub attempts: u32,
    #[serde(default)]
    pub failure: Option<JobFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub stage: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub model_id: String,
    pub version: String,
}

/// The record published to the result sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionResult {
    pub job_id: String,
    pub image_id: String,
    pub state: JobState,
    pub verdict: Option<Verdict>,
    pub defects: Vec<DefectRecord>,
    pub model: Option<ModelRef>,
    pub timing_ms: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    pub failure: Option<JobFailure>,
    pub node_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "nodes")]
pub enum NodePolicy {
    All,
    Nodes(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub scope: Scope,
    pub model_id: String,
    pub version: String,
    pub assignment: NodePolicy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub entries: Vec<PlanEntry>,
}

/// Seconds since an arbitrary epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
    }
}

/// Manually advanced clock; sleeping on it advances it.
#[derive(Clone, Default)]
pub struct ManualClock {
    micros: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(start_s: f64) -> Self {
        let c = ManualClock::default();
        c.set(start_s);
        c
    }

    pub fn set(&self, s: f64) {
        self.micros.store((s * 1e6) as u64, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        self.micros.fetch_add(d.as_micros() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        self.micros.load(Ordering::SeqCst) as f64 / 1e6
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

impl Sleeper for ManualClock {
    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// RFC 3339 rendering of clock seconds.
pub fn timestamp(secs: f64) -> String {
    chrono::DateTime::from_timestamp_micros((secs * 1e6) as i64)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_else(|| format!("{secs}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances_on_sleep() {
        let c = ManualClock::new(10.0);
        c.sleep(Duration::from_millis(1500));
        assert!((c.now() - 11.5).abs() < 1e-9);
    }

    #[test]
    fn timestamps_are_rfc3339() {
        assert_eq!(timestamp(0.0), "1970-01-01T00:00:00.000Z");
    }

    #[test]
    fn plan_json_shape() {
        let p = DeploymentPlan {
            entries: vec![PlanEntry {
                scope: Scope::new("A", "X"),
                model_id: "m".into(),
                version: "2".into(),
                assignment: NodePolicy::Nodes(vec!["node-1".into()]),
            }],
        };
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["entries"][0]["assignment"]["policy"], "nodes");
        assert_eq!(v["entries"][0]["assignment"]["nodes"][0], "node-1");
        let back: DeploymentPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
