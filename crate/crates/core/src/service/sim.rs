//! Deterministic discrete-event harness: simulated nodes that crash and
//! restart, a sink with outages, and the audit checks over the outcome.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::controller::{AuditEvent, Controller, ControllerConfig, Dispatch, Heartbeat, SubmitRequest};
use super::node::Executor;
use super::publisher::{Backoff, DeadLetterStore, Publisher, ResultSink};
use super::registry::ModelRegistry;
use super::scheduler::Action;
use super::{Clock, DeploymentPlan, InspectionResult, JobState, ManualClock, ModelDescriptor, NodePolicy, PlanEntry, Scope};
use crate::detect::{BinaryPatchClassifier, OracleClassifier};
use crate::error::{Error, ErrorCode, Result};
use crate::raster::{BBox, InspectionImage, Raster};

/// Ground-truth window scores looked up by image id.
#[derive(Default)]
pub struct MaskOracle {
    masks: HashMap<String, OracleClassifier>,
}

impl MaskOracle {
    pub fn insert(&mut self, image_id: &str, mask: &Raster<bool>) {
        self.masks.insert(image_id.to_string(), OracleClassifier::new(mask));
    }
}

impl BinaryPatchClassifier for MaskOracle {
    fn score(&self, image: &InspectionImage, window: BBox) -> Result<f64> {
        match self.masks.get(&image.meta.image_id) {
            Some(o) => o.score(image, window),
            None => Ok(0.0),
        }
    }
}

/// Records deliveries; while an outage lasts every attempt fails.
#[derive(Default)]
pub struct SimSink {
    outage_attempts: AtomicU32,
    pub delivered: Mutex<Vec<String>>,
    pub failed_attempts: AtomicU32,
}

impl SimSink {
    pub fn start_outage(&self, attempts: u32) {
        self.outage_attempts.store(attempts, Ordering::SeqCst);
    }

    pub fn end_outage(&self) {
        self.outage_attempts.store(0, Ordering::SeqCst);
    }
}

impl ResultSink for SimSink {
    fn deliver(&self, r: &InspectionResult) -> std::result::Result<(), String> {
        let left = self.outage_attempts.load(Ordering::SeqCst);
        if left > 0 {
            self.outage_attempts.store(left - 1, Ordering::SeqCst);
            self.failed_attempts.fetch_add(1, Ordering::SeqCst);
            return Err("sink outage".into());
        }
        self.delivered.lock().expect("sink").push(r.job_id.clone());
        Ok(())
    }

    fn describe(&self) -> String {
        "sim".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoakConfig {
    pub nodes: usize,
    pub capacity: usize,
    pub step_s: f64,
    pub heartbeat_every_s: f64,
    /// Per node and step.
    pub crash_probability: f64,
    pub downtime_s: (f64, f64),
    /// Per delivery.
    pub outage_probability: f64,
    /// Failing attempts per outage; above the retry budget it dead-letters.
    pub outage_attempts: (u32, u32),
    pub max_steps: usize,
}

impl Default for SoakConfig {
    fn default() -> Self {
        SoakConfig {
            nodes: 2,
            capacity: 4,
            step_s: 0.5,
            heartbeat_every_s: 5.0,
            crash_probability: 0.01,
            downtime_s: (3.0, 40.0),
            outage_probability: 0.08,
            outage_attempts: (1, 14),
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoakReport {
    pub submitted: usize,
    pub done: usize,
    pub failed: usize,
    pub lost: Vec<String>,
    pub deliveries: usize,
    pub unique_outcomes: usize,
    pub undelivered: Vec<String>,
    pub dead_lettered: usize,
    pub redriven: usize,
    pub crashes: usize,
    pub outages: usize,
    pub stale_requeues: usize,
    pub routing_violations: usize,
    pub fifo_violations: usize,
    pub first_plan_actions: usize,
    pub second_plan_actions: usize,
    pub simulated_s: f64,
}

impl SoakReport {
    pub fn passed(&self, jobs: usize) -> bool {
        self.lost.is_empty()
            && self.done + self.failed == jobs
            && self.unique_outcomes == jobs
            && self.undelivered.is_empty()
            && self.routing_violations == 0
            && self.fifo_violations == 0
            && self.second_plan_actions == 0
    }
}

struct SimNode {
    id: String,
    up: bool,
    back_at: f64,
    next_heartbeat: f64,
    queue: VecDeque<Dispatch>,
}

/// One job per image; `descriptor` is the single model deployed to all nodes.
pub fn run_soak(
    executor: Arc<dyn Executor>,
    descriptor: ModelDescriptor,
    images: &[(String, String)],
    cfg: &SoakConfig,
    seed: u64,
) -> Result<SoakReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clock = ManualClock::new(1_000.0);
    let mut ctl = Controller::new(Arc::new(clock.clone()), ControllerConfig::default(), ModelRegistry::new());
    let scope = descriptor.scope.clone();
    ctl.register_model(descriptor.clone())?;
    let mut nodes: Vec<SimNode> = (1..=cfg.nodes)
        .map(|i| {
            let id = format!("node-{i}");
            ctl.register_node(&id, cfg.capacity);
            SimNode {
                id,
                up: true,
                back_at: 0.0,
                next_heartbeat: 1_000.0,
                queue: VecDeque::new(),
            }
        })
        .collect();
    let plan = DeploymentPlan {
        entries: vec![PlanEntry {
            scope: scope.clone(),
            model_id: descriptor.model_id.clone(),
            version: descriptor.version.clone(),
            assignment: NodePolicy::All,
        }],
    };
    let actions = ctl.schedule(&plan)?;
    for a in &actions {
        if let Action::Load { node_id, .. } = a {
            executor.load(node_id, &descriptor)?;
        }
    }
    ctl.apply_actions(&actions)?;
    let first_plan_actions = actions.len();

    let sink = Arc::new(SimSink::default());
    let publisher = Publisher {
        sink: sink.clone(),
        backoff: Backoff::default(),
        // retries wait on their own timeline
        sleeper: Arc::new(ManualClock::new(0.0)),
        clock: Arc::new(clock.clone()),
        dead_letters: Arc::new(DeadLetterStore::in_memory()),
    };

    let route = |nodes: &mut Vec<SimNode>, ds: Vec<Dispatch>| {
        for d in ds {
            let n = nodes.iter_mut().find(|n| n.id == d.node_id).expect("known node");
            if n.up {
                n.queue.push_back(d);
            }
        }
    };

    let (mut crashes, mut outages, mut dead_lettered) = (0, 0, 0);
    let mut completions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut next_job = 0usize;
    let mut steps = 0usize;
    let all_finished = |ctl: &Controller| {
        ctl.tickets()
            .iter()
            .all(|t| matches!(t.state, JobState::Done | JobState::Failed))
    };
    while steps < cfg.max_steps && (next_job < images.len() || !all_finished(&ctl)) {
        steps += 1;
        clock.advance(std::time::Duration::from_secs_f64(cfg.step_s));
        let now = clock.now();

        if next_job < images.len() {
            let (image_ref, image_id) = &images[next_job];
            let req = SubmitRequest {
                job_id: format!("job-{next_job:04}"),
                image_ref: image_ref.clone(),
                image_id: image_id.clone(),
                scope: scope.clone(),
            };
            match ctl.submit(req) {
                Ok((_, ds)) => {
                    next_job += 1;
                    route(&mut nodes, ds);
                }
                Err(e) if e.code == ErrorCode::NodeSaturated => {}
                Err(e) => return Err(e),
            }
        }

        for i in 0..nodes.len() {
            let n = &mut nodes[i];
            if n.up && rng.random_bool(cfg.crash_probability) {
                n.up = false;
                n.queue.clear();
                n.back_at = now + rng.random_range(cfg.downtime_s.0..cfg.downtime_s.1);
                crashes += 1;
            } else if !n.up && now >= n.back_at {
                n.up = true;
                n.next_heartbeat = now;
            }
            if n.up && now >= n.next_heartbeat {
                n.next_heartbeat = now + cfg.heartbeat_every_s;
                let hb = Heartbeat {
                    running: Some(n.queue.iter().map(|d| d.job_id.clone()).collect()),
                    ..Heartbeat::default()
                };
                let id = n.id.clone();
                let (_, ds) = ctl.heartbeat(&id, &hb)?;
                route(&mut nodes, ds);
            }
        }
        let ds = ctl.tick();
        route(&mut nodes, ds);

        for i in 0..nodes.len() {
            if !nodes[i].up {
                continue;
            }
            let Some(job) = nodes[i].queue.pop_front() else {
                continue;
            };
            let result = executor.execute(&job);
            let (accepted, ds) = ctl.complete(&job.node_id, result.clone())?;
            route(&mut nodes, ds);
            if !accepted {
                continue;
            }
            completions.entry(job.node_id.clone()).or_default().push(job.job_id.clone());
            if rng.random_bool(cfg.outage_probability) {
                sink.start_outage(rng.random_range(cfg.outage_attempts.0..=cfg.outage_attempts.1));
                outages += 1;
            }
            if publisher.publish(&result).is_err() {
                dead_lettered += 1;
            }
        }
    }

    sink.end_outage();
    let redrive = publisher.redrive()?;

    let tickets = ctl.tickets();
    let lost: Vec<String> = tickets
        .iter()
        .filter(|t| !matches!(t.state, JobState::Done | JobState::Failed))
        .map(|t| t.job_id.clone())
        .collect();
    let delivered = sink.delivered.lock().expect("sink").clone();
    let unique: BTreeSet<&String> = delivered.iter().collect();
    let undelivered: Vec<String> = tickets
        .iter()
        .filter(|t| !unique.contains(&t.job_id))
        .map(|t| t.job_id.clone())
        .collect();

    let audit = ctl.audit();
    let routing_violations = audit
        .iter()
        .filter(|a| a.event == AuditEvent::Dispatch)
        .filter(|a| {
            let model_ok = a.model.as_ref().is_some_and(|m| {
                a.node_models.contains(m) && ctl.registry.get(m).is_some_and(|d| Some(&d.scope) == a.scope.as_ref())
            });
            !model_ok
        })
        .count();
    // per node, same-scope jobs must finish in the order they were last dispatched there
    let mut fifo_violations = 0;
    for (node, done) in &completions {
        let mut last_dispatch: HashMap<&str, u64> = HashMap::new();
        for a in audit.iter().filter(|a| a.event == AuditEvent::Dispatch && &a.node_id == node) {
            last_dispatch.insert(a.job_id.as_deref().expect("job"), a.seq);
        }
        let order: Vec<u64> = done.iter().map(|j| last_dispatch[j.as_str()]).collect();
        fifo_violations += order.windows(2).filter(|w| w[0] > w[1]).count();
    }
    let stale_requeues = audit.iter().filter(|a| a.event == AuditEvent::Stale).count();
    let second = ctl.schedule(&plan)?;

    Ok(SoakReport {
        submitted: next_job,
        done: tickets.iter().filter(|t| t.state == JobState::Done).count(),
        failed: tickets.iter().filter(|t| t.state == JobState::Failed).count(),
        lost,
        deliveries: delivered.len(),
        unique_outcomes: unique.len(),
        undelivered,
        dead_lettered,
        redriven: redrive.delivered,
        crashes,
        outages,
        stale_requeues,
        routing_violations,
        fifo_violations,
        first_plan_actions,
        second_plan_actions: second.len(),
        simulated_s: clock.now() - 1_000.0,
    })
}

/// Executor stub that answers instantly; used to test the harness itself.
pub struct EchoExecutor;

impl Executor for EchoExecutor {
    fn load(&self, _: &str, _: &ModelDescriptor) -> Result<()> {
        Ok(())
    }

    fn unload(&self, _: &str, _: &super::ModelKey) {}

    fn execute(&self, job: &Dispatch) -> InspectionResult {
        let failed = job.image_ref.starts_with("corrupt");
        InspectionResult {
            job_id: job.job_id.clone(),
            image_id: job.image_id.clone(),
            state: if failed { JobState::Failed } else { JobState::Done },
            verdict: None,
            defects: Vec::new(),
            model: None,
            timing_ms: BTreeMap::new(),
            failure: failed.then(|| super::JobFailure {
                stage: "decode".into(),
                code: ErrorCode::InvalidImage.to_string(),
                message: "corrupt".into(),
            }),
            node_id: Some(job.node_id.clone()),
        }
    }
}

pub fn sim_descriptor(scope: Scope) -> ModelDescriptor {
    ModelDescriptor {
        model_id: "soak".into(),
        version: "1".into(),
        scope,
        mode: crate::classify::ChannelMode::Rgb,
        artifact: String::new(),
        detector_artifact: None,
        layout: None,
        status: super::ModelStatus::Registered,
    }
}

pub fn check(report: &SoakReport, jobs: usize) -> Result<()> {
    if report.passed(jobs) {
        Ok(())
    } else {
        Err(Error::new(ErrorCode::StoreError, format!("soak failed: {report:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_soak_loses_nothing() {
        let images: Vec<(String, String)> = (0..200)
            .map(|i| {
                let r = if i % 37 == 0 { format!("corrupt-{i}") } else { format!("img-{i}") };
                (r, format!("img-{i}"))
            })
            .collect();
        let cfg = SoakConfig {
            crash_probability: 0.02,
            ..SoakConfig::default()
        };
        let r = run_soak(Arc::new(EchoExecutor), sim_descriptor(Scope::new("A", "X")), &images, &cfg, 5).unwrap();
        assert!(r.passed(200), "{r:?}");
        assert!(r.crashes > 0 && r.outages > 0, "{r:?}");
        assert!(r.failed > 0);
        assert_eq!(r.first_plan_actions, 2);
    }
}
