//! Job dispatcher and model-scheduler state behind one logical writer.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::registry::ModelRegistry;
use super::scheduler::{schedule_models, Action};
use super::store::{Store, TICKETS};
use super::{
    Clock, DeploymentPlan, InspectionResult, JobState, JobTicket, ModelDescriptor, ModelKey, ModelStatus, NodeInfo,
    Scope, HEARTBEAT_TIMEOUT_S,
};
use crate::error::{Error, ErrorCode, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Jobs waiting for a node beyond this are rejected.
    pub queue_capacity: usize,
    pub heartbeat_timeout_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            queue_capacity: 1024,
            heartbeat_timeout_s: HEARTBEAT_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    /// Idempotency key.
    pub job_id: String,
    pub image_ref: String,
    pub image_id: String,
    pub scope: Scope,
}

/// A job handed to a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub job_id: String,
    pub node_id: String,
    pub model: ModelKey,
    pub image_ref: String,
    pub image_id: String,
    pub scope: Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEvent {
    Dispatch,
    Stale,
    Complete,
    Fail,
    StaleCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: f64,
    pub event: AuditEvent,
    pub job_id: Option<String>,
    pub node_id: String,
    pub scope: Option<Scope>,
    pub model: Option<ModelKey>,
    /// Models the node had loaded when the event was recorded.
    pub node_models: BTreeSet<ModelKey>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub loaded_models: Option<BTreeSet<ModelKey>>,
    /// Jobs the node still holds; dispatched jobs missing here are re-queued.
    #[serde(default)]
    pub running: Option<Vec<String>>,
}

pub struct Controller {
    clock: Arc<dyn Clock>,
    cfg: ControllerConfig,
    pub registry: ModelRegistry,
    nodes: BTreeMap<String, NodeInfo>,
    jobs: HashMap<String, JobTicket>,
    seq_of: HashMap<String, u64>,
    next_seq: u64,
    pending: VecDeque<String>,
    results: HashMap<String, InspectionResult>,
    audit: Vec<AuditEntry>,
    store: Option<Arc<Store>>,
}

impl Controller {
    pub fn new(clock: Arc<dyn Clock>, cfg: ControllerConfig, registry: ModelRegistry) -> Self {
        Controller {
            clock,
            cfg,
            registry,
            nodes: BTreeMap::new(),
            jobs: HashMap::new(),
            seq_of: HashMap::new(),
            next_seq: 0,
            pending: VecDeque::new(),
            results: HashMap::new(),
            audit: Vec::new(),
            store: None,
        }
    }

    /// Persists tickets to `store` and re-queues unfinished tickets found there.
    pub fn with_store(mut self, store: Arc<Store>) -> Result<Self> {
        let mut tickets: Vec<(String, JobTicket)> = store.all(TICKETS)?;
        tickets.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, mut t) in tickets {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.seq_of.insert(t.job_id.clone(), seq);
            if matches!(t.state, JobState::Queued | JobState::Dispatched) {
                t.assigned_node = None;
                self.pending.push_back(t.job_id.clone());
            }
            self.jobs.insert(t.job_id.clone(), t);
        }
        self.store = Some(store);
        Ok(self)
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    fn persist(&self, job_id: &str) -> Result<()> {
        if let (Some(s), Some(t)) = (&self.store, self.jobs.get(job_id)) {
            s.put(TICKETS, job_id, t)?;
        }
        Ok(())
    }

    fn is_available(&self, n: &NodeInfo) -> bool {
        self.now() - n.last_heartbeat <= self.cfg.heartbeat_timeout_s
    }

    fn model_for(&self, node: &NodeInfo, scope: &Scope) -> Option<ModelKey> {
        node.loaded_models
            .iter()
            .find(|k| {
                self.registry
                    .get(k)
                    .is_some_and(|d| &d.scope == scope && d.status != ModelStatus::Retired)
            })
            .cloned()
    }

    fn record(&mut self, event: AuditEvent, job: Option<&str>, node_id: &str, scope: Option<Scope>, model: Option<ModelKey>) {
        let node_models = self.nodes.get(node_id).map(|n| n.loaded_models.clone()).unwrap_or_default();
        self.audit.push(AuditEntry {
            seq: self.audit.len() as u64,
            at: self.now(),
            event,
            job_id: job.map(str::to_string),
            node_id: node_id.to_string(),
            scope,
            model,
            node_models,
        });
    }

    pub fn register_model(&mut self, d: ModelDescriptor) -> Result<()> {
        self.registry.register(d)
    }

    pub fn register_node(&mut self, node_id: &str, capacity: usize) -> NodeInfo {
        let now = self.now();
        let n = self.nodes.entry(node_id.to_string()).or_insert_with(|| NodeInfo {
            node_id: node_id.to_string(),
            capacity,
            loaded_models: BTreeSet::new(),
            outstanding_jobs: 0,
            last_heartbeat: now,
            available: true,
        });
        n.capacity = capacity;
        n.last_heartbeat = now;
        n.clone()
    }

    /// Refreshes a node; a heartbeat carrying a capacity registers it.
    pub fn heartbeat(&mut self, node_id: &str, hb: &Heartbeat) -> Result<(NodeInfo, Vec<Dispatch>)> {
        if !self.nodes.contains_key(node_id) {
            match hb.capacity {
                Some(c) => {
                    self.register_node(node_id, c);
                }
                None => return Err(Error::new(ErrorCode::UnknownNode, format!("node {node_id} is not registered"))),
            }
        }
        let now = self.now();
        let n = self.nodes.get_mut(node_id).expect("registered");
        n.last_heartbeat = now;
        if let Some(c) = hb.capacity {
            n.capacity = c;
        }
        if let Some(m) = &hb.loaded_models {
            n.loaded_models = m.clone();
        }
        let info = n.clone();
        if let Some(running) = &hb.running {
            let held: BTreeSet<&String> = running.iter().collect();
            let lost: Vec<String> = self
                .jobs
                .values()
                .filter(|t| {
                    t.state == JobState::Dispatched
                        && t.assigned_node.as_deref() == Some(node_id)
                        && !held.contains(&t.job_id)
                })
                .map(|t| t.job_id.clone())
                .collect();
            self.requeue(node_id, lost);
        }
        let d = self.tick();
        Ok((self.node_view(&info), d))
    }

    fn node_view(&self, n: &NodeInfo) -> NodeInfo {
        let mut v = n.clone();
        v.available = self.is_available(n);
        v
    }

    pub fn list_nodes(&self) -> Vec<NodeInfo> {
        self.nodes.values().map(|n| self.node_view(n)).collect()
    }

    pub fn nodes(&self) -> &BTreeMap<String, NodeInfo> {
        &self.nodes
    }

    /// Queues a job and dispatches what it can. A repeated job id returns
    /// the existing ticket.
    pub fn submit(&mut self, req: SubmitRequest) -> Result<(JobTicket, Vec<Dispatch>)> {
        if let Some(t) = self.jobs.get(&req.job_id) {
            return Ok((t.clone(), Vec::new()));
        }
        if !self.nodes.values().any(|n| self.model_for(n, &req.scope).is_some()) {
            return Err(Error::new(
                ErrorCode::ModelUnavailable,
                format!("no node has a model for {}/{}", req.scope.product_id, req.scope.layer_id),
            ));
        }
        if self.pending.len() >= self.cfg.queue_capacity {
            return Err(Error::new(
                ErrorCode::NodeSaturated,
                format!("{} jobs already waiting", self.pending.len()),
            ));
        }
        let t = JobTicket {
            job_id: req.job_id.clone(),
            image_ref: req.image_ref,
            image_id: req.image_id,
            scope: req.scope,
            state: JobState::Queued,
            assigned_node: None,
            result_ref: None,
            attempts: 0,
            failure: None,
        };
        self.seq_of.insert(t.job_id.clone(), self.next_seq);
        self.next_seq += 1;
        self.jobs.insert(t.job_id.clone(), t);
        self.pending.push_back(req.job_id.clone());
        self.persist(&req.job_id)?;
        let d = self.dispatch();
        Ok((self.jobs[&req.job_id].clone(), d))
    }

    /// Assigns waiting jobs in FIFO order to the available node with the
    /// scope's model and the fewest outstanding jobs (ties: smallest id).
    pub fn dispatch(&mut self) -> Vec<Dispatch> {
        let mut out = Vec::new();
        let mut waiting = VecDeque::new();
        while let Some(id) = self.pending.pop_front() {
            let scope = self.jobs[&id].scope.clone();
            let pick = self
                .nodes
                .values()
                .filter(|n| self.is_available(n) && n.outstanding_jobs < n.capacity)
                .filter_map(|n| self.model_for(n, &scope).map(|m| (n.outstanding_jobs, n.node_id.clone(), m)))
                .min();
            let Some((_, node_id, model)) = pick else {
                waiting.push_back(id);
                continue;
            };
            self.nodes.get_mut(&node_id).expect("node").outstanding_jobs += 1;
            let t = self.jobs.get_mut(&id).expect("job");
            t.state = JobState::Dispatched;
            t.assigned_node = Some(node_id.clone());
            t.attempts += 1;
            let d = Dispatch {
                job_id: id.clone(),
                node_id: node_id.clone(),
                model: model.clone(),
                image_ref: t.image_ref.clone(),
                image_id: t.image_id.clone(),
                scope: scope.clone(),
            };
            self.record(AuditEvent::Dispatch, Some(&id), &node_id, Some(scope), Some(model));
            if let Err(e) = self.persist(&id) {
                log::warn!("ticket {id}: {e}");
            }
            out.push(d);
        }
        self.pending = waiting;
        out
    }

    /// Returns the jobs of nodes whose heartbeat went stale to the front of
    /// the queue, then dispatches.
    pub fn tick(&mut self) -> Vec<Dispatch> {
        let stale: Vec<String> = self
            .nodes
            .values()
            .filter(|n| !self.is_available(n) && n.outstanding_jobs > 0)
            .map(|n| n.node_id.clone())
            .collect();
        for node_id in stale {
            let orphans: Vec<String> = self
                .jobs
                .values()
                .filter(|t| t.state == JobState::Dispatched && t.assigned_node.as_deref() == Some(&node_id))
                .map(|t| t.job_id.clone())
                .collect();
            self.requeue(&node_id, orphans);
        }
        self.dispatch()
    }

    /// Puts a node's jobs back at the queue front in submission order.
    fn requeue(&mut self, node_id: &str, mut jobs: Vec<String>) {
        jobs.sort_by_key(|id| std::cmp::Reverse(self.seq_of[id]));
        for id in &jobs {
            self.jobs.get_mut(id).expect("job").assigned_node = None;
            self.pending.push_front(id.clone());
            self.record(AuditEvent::Stale, Some(id), node_id, None, None);
        }
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.outstanding_jobs = n.outstanding_jobs.saturating_sub(jobs.len());
        }
    }

    /// Records a node's outcome. Outcomes from a node that no longer owns
    /// the job are ignored and reported as `false`.
    pub fn complete(&mut self, node_id: &str, result: InspectionResult) -> Result<(bool, Vec<Dispatch>)> {
        let id = result.job_id.clone();
        let t = self
            .jobs
            .get(&id)
            .ok_or_else(|| Error::new(ErrorCode::UnknownJob, format!("job {id} is not known")))?;
        if t.state != JobState::Dispatched || t.assigned_node.as_deref() != Some(node_id) {
            self.record(AuditEvent::StaleCompletion, Some(&id), node_id, None, None);
            return Ok((false, self.dispatch()));
        }
        let failed = result.state == JobState::Failed;
        let t = self.jobs.get_mut(&id).expect("job");
        t.state = if failed { JobState::Failed } else { JobState::Done };
        t.result_ref = Some(id.clone());
        t.failure = result.failure.clone();
        let scope = t.scope.clone();
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.outstanding_jobs = n.outstanding_jobs.saturating_sub(1);
        }
        self.results.insert(id.clone(), result);
        let ev = if failed { AuditEvent::Fail } else { AuditEvent::Complete };
        self.record(ev, Some(&id), node_id, Some(scope), None);
        self.persist(&id)?;
        Ok((true, self.dispatch()))
    }

    pub fn ticket(&self, job_id: &str) -> Result<JobTicket> {
        self.jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| Error::new(ErrorCode::UnknownJob, format!("job {job_id} is not known")))
    }

    /// The ticket plus its outcome once the job finished.
    pub fn result(&self, job_id: &str) -> Result<(JobTicket, Option<InspectionResult>)> {
        let t = self.ticket(job_id)?;
        Ok((t, self.results.get(job_id).cloned()))
    }

    pub fn insert_result(&mut self, r: InspectionResult) {
        self.results.insert(r.job_id.clone(), r);
    }

    pub fn tickets(&self) -> Vec<JobTicket> {
        let mut v: Vec<JobTicket> = self.jobs.values().cloned().collect();
        v.sort_by_key(|t| self.seq_of[&t.job_id]);
        v
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn schedule(&self, plan: &DeploymentPlan) -> Result<Vec<Action>> {
        schedule_models(plan, &self.registry, &self.nodes)
    }

    /// Applies scheduler actions to the node view and model statuses.
    pub fn apply_actions(&mut self, actions: &[Action]) -> Result<Vec<Dispatch>> {
        for a in actions {
            let n = self
                .nodes
                .get_mut(a.node_id())
                .ok_or_else(|| Error::new(ErrorCode::UnknownNode, format!("node {} is not registered", a.node_id())))?;
            match a {
                Action::Load { model, .. } => {
                    n.loaded_models.insert(model.clone());
                }
                Action::Unload { model, .. } => {
                    n.loaded_models.remove(model);
                }
            }
        }
        let touched: BTreeSet<ModelKey> = actions
            .iter()
            .map(|a| match a {
                Action::Load { model, .. } | Action::Unload { model, .. } => model.clone(),
            })
            .collect();
        for k in touched {
            let loaded = self.nodes.values().any(|n| n.loaded_models.contains(&k));
            let s = if loaded { ModelStatus::Loaded } else { ModelStatus::Registered };
            self.registry.set_status(&k, s)?;
        }
        Ok(self.dispatch())
    }
}
