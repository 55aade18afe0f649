//! HTTP API over the controller, in-process node workers and the publisher.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::controller::{Controller, ControllerConfig, Dispatch, Heartbeat, SubmitRequest};
use super::labeling::{CandidateFilter, Decision, LabelingStore, SourceFilter};
use super::node::{hex, Executor, ImageStore, PipelineExecutor};
use super::publisher::{Backoff, DeadLetter, DeadLetterStore, Publisher, RedriveReport, SinkConfig};
use super::registry::ModelRegistry;
use super::scheduler::Action;
use super::store::{LineLog, Store};
use super::{
    Clock, DeploymentPlan, InspectionResult, JobTicket, ModelDescriptor, NodeInfo, Scope, SystemClock, ThreadSleeper,
};
use crate::error::{Error, ErrorCode, Result};
use crate::pipeline::PipelineConfig;
use crate::reference::{CandidateStatus, PatchLabelCandidate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalNode {
    pub node_id: String,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    /// Holds the store, images, results and dead letters.
    pub data_dir: PathBuf,
    pub sink: SinkConfig,
    pub nodes: Vec<LocalNode>,
    pub queue_capacity: usize,
    pub heartbeat_every_s: f64,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("panel-inspect-data"),
            sink: SinkConfig::File {
                path: PathBuf::from("panel-inspect-data/delivered.jsonl"),
            },
            nodes: vec![LocalNode {
                node_id: "node-1".into(),
                capacity: 4,
            }],
            queue_capacity: ControllerConfig::default().queue_capacity,
            heartbeat_every_s: 5.0,
        }
    }
}

pub struct Service {
    ctl: Mutex<Controller>,
    executor: Arc<dyn Executor>,
    images: ImageStore,
    labeling: LabelingStore,
    publisher: Arc<Publisher>,
    results: LineLog,
    local: HashMap<String, Mutex<mpsc::Sender<Dispatch>>>,
    remote: Mutex<HashMap<String, VecDeque<Dispatch>>>,
    outbox: Mutex<mpsc::Sender<InspectionResult>>,
}

/// Opens the stores under `data_dir` and starts node workers, heartbeats
/// and the publisher thread.
pub fn start(settings: &ServiceSettings, pipeline: PipelineConfig) -> Result<Arc<Service>> {
    let dir = &settings.data_dir;
    let images = ImageStore::new(&dir.join("images"))?;
    let executor: Arc<dyn Executor> = Arc::new(PipelineExecutor::new(
        Arc::new(ImageStore::new(&dir.join("images"))?),
        pipeline,
    ));
    start_with(settings, executor, images, Arc::new(SystemClock))
}

pub fn start_with(
    settings: &ServiceSettings,
    executor: Arc<dyn Executor>,
    images: ImageStore,
    clock: Arc<dyn Clock>,
) -> Result<Arc<Service>> {
    let dir = &settings.data_dir;
    let store = Arc::new(Store::open(&dir.join("store.redb"))?);
    let registry = ModelRegistry::with_store(store.clone())?;
    let cfg = ControllerConfig {
        queue_capacity: settings.queue_capacity,
        ..ControllerConfig::default()
    };
    let mut ctl = Controller::new(clock.clone(), cfg, registry).with_store(store.clone())?;
    let results = LineLog::new(&dir.join("results.jsonl"))?;
    for r in results.read_all::<InspectionResult>()? {
        ctl.insert_result(r);
    }
    for n in &settings.nodes {
        ctl.register_node(&n.node_id, n.capacity);
    }
    let publisher = Arc::new(Publisher {
        sink: settings.sink.build()?,
        backoff: Backoff::default(),
        sleeper: Arc::new(ThreadSleeper),
        clock: clock.clone(),
        dead_letters: Arc::new(DeadLetterStore::open(&dir.join("dead_letters.jsonl"))?),
    });
    let (out_tx, out_rx) = mpsc::channel::<InspectionResult>();
    let mut local = HashMap::new();
    let mut inboxes = Vec::new();
    for n in &settings.nodes {
        let (tx, rx) = mpsc::channel::<Dispatch>();
        local.insert(n.node_id.clone(), Mutex::new(tx));
        inboxes.push(rx);
    }
    let svc = Arc::new(Service {
        ctl: Mutex::new(ctl),
        executor,
        images,
        labeling: LabelingStore::with_store(clock, store)?,
        publisher: publisher.clone(),
        results,
        local,
        remote: Mutex::new(HashMap::new()),
        outbox: Mutex::new(out_tx),
    });
    for rx in inboxes {
        let s = svc.clone();
        std::thread::spawn(move || {
            for job in rx {
                let r = s.executor.execute(&job);
                if let Err(e) = s.finish(&job.node_id, r) {
                    log::error!("completing {}: {e}", job.job_id);
                }
            }
        });
    }
    std::thread::spawn(move || {
        for r in out_rx {
            if let Err(e) = publisher.publish(&r) {
                log::warn!("{e}");
            }
        }
    });
    let s = Arc::downgrade(&svc);
    let every = Duration::from_secs_f64(settings.heartbeat_every_s);
    let ids: Vec<String> = settings.nodes.iter().map(|n| n.node_id.clone()).collect();
    std::thread::spawn(move || loop {
        let Some(svc) = s.upgrade() else { break };
        for id in &ids {
            if let Err(e) = svc.heartbeat(id, &Heartbeat::default()) {
                log::error!("heartbeat {id}: {e}");
            }
        }
        drop(svc);
        std::thread::sleep(every);
    });
    // tickets recovered from the store
    let ds = svc.ctl.lock().expect("controller").dispatch();
    svc.route(ds);
    Ok(svc)
}

/// Idempotency key for a submission without one.
pub fn derive_job_id(image: &[u8], scope: &Scope) -> String {
    let mut h = Sha256::new();
    h.update(image);
    h.update([0]);
    h.update(scope.product_id.as_bytes());
    h.update([0]);
    h.update(scope.layer_id.as_bytes());
    hex(&h.finalize()[..16])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InspectRequest {
    #[serde(default)]
    pub job_id: Option<String>,
    #[serde(default)]
    pub image_id: Option<String>,
    pub product_id: String,
    pub layer_id: String,
    /// Base64 PNG.
    #[serde(default)]
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub ticket: JobTicket,
    pub result: Option<InspectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
    pub decided_by: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub status: Option<CandidateStatus>,
    pub sources: Option<SourceFilter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionAck {
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportAck {
    pub added: usize,
}

impl Service {
    fn route(&self, ds: Vec<Dispatch>) {
        for d in ds {
            match self.local.get(&d.node_id) {
                Some(tx) => {
                    if tx.lock().expect("inbox").send(d).is_err() {
                        log::error!("node worker stopped");
                    }
                }
                None => self
                    .remote
                    .lock()
                    .expect("remote")
                    .entry(d.node_id.clone())
                    .or_default()
                    .push_back(d),
            }
        }
    }

    fn finish(&self, node_id: &str, r: InspectionResult) -> Result<bool> {
        let (accepted, ds) = self.ctl.lock().expect("controller").complete(node_id, r.clone())?;
        self.route(ds);
        if accepted {
            self.results.append(&r)?;
            let _ = self.outbox.lock().expect("outbox").send(r);
        }
        Ok(accepted)
    }

    pub fn submit(&self, req: InspectRequest, bytes: Vec<u8>) -> Result<JobTicket> {
        if bytes.is_empty() {
            return Err(Error::new(ErrorCode::InvalidImage, "no image in request"));
        }
        let scope = Scope::new(&req.product_id, &req.layer_id);
        let job_id = req.job_id.unwrap_or_else(|| derive_job_id(&bytes, &scope));
        let image_ref = self.images.put(&bytes)?;
        let (t, ds) = self.ctl.lock().expect("controller").submit(SubmitRequest {
            image_id: req.image_id.unwrap_or_else(|| job_id.clone()),
            job_id,
            image_ref,
            scope,
        })?;
        self.route(ds);
        Ok(t)
    }

    pub fn result(&self, job_id: &str) -> Result<ResultView> {
        let (ticket, result) = self.ctl.lock().expect("controller").result(job_id)?;
        Ok(ResultView { ticket, result })
    }

    pub fn register_model(&self, d: ModelDescriptor) -> Result<ModelDescriptor> {
        let mut ctl = self.ctl.lock().expect("controller");
        let key = d.key();
        ctl.register_model(d)?;
        Ok(ctl.registry.get(&key).cloned().expect("registered"))
    }

    pub fn models(&self) -> Vec<ModelDescriptor> {
        self.ctl.lock().expect("controller").registry.list()
    }

    /// Loads on local nodes first; a failed load rolls back this plan's loads.
    pub fn apply_plan(&self, plan: &DeploymentPlan) -> Result<Vec<Action>> {
        let mut ctl = self.ctl.lock().expect("controller");
        let actions = ctl.schedule(plan)?;
        let mut done: Vec<&Action> = Vec::new();
        for a in &actions {
            if !self.local.contains_key(a.node_id()) {
                continue;
            }
            match a {
                Action::Load { node_id, model } => {
                    let d = ctl.registry.get(model).cloned().expect("validated");
                    if let Err(e) = self.executor.load(node_id, &d) {
                        for a in done {
                            if let Action::Load { node_id, model } = a {
                                self.executor.unload(node_id, model);
                            }
                        }
                        return Err(e);
                    }
                    done.push(a);
                }
                Action::Unload { node_id, model } => self.executor.unload(node_id, model),
            }
        }
        let ds = ctl.apply_actions(&actions)?;
        drop(ctl);
        self.route(ds);
        Ok(actions)
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        self.ctl.lock().expect("controller").list_nodes()
    }

    pub fn heartbeat(&self, node_id: &str, hb: &Heartbeat) -> Result<NodeInfo> {
        let (info, ds) = self.ctl.lock().expect("controller").heartbeat(node_id, hb)?;
        self.route(ds);
        Ok(info)
    }

    /// Jobs waiting for a remote node.
    pub fn take_jobs(&self, node_id: &str) -> Result<Vec<Dispatch>> {
        if !self.ctl.lock().expect("controller").nodes().contains_key(node_id) {
            return Err(Error::new(ErrorCode::UnknownNode, format!("node {node_id} is not registered")));
        }
        Ok(self
            .remote
            .lock()
            .expect("remote")
            .remove(node_id)
            .map(Vec::from)
            .unwrap_or_default())
    }

    pub fn report(&self, node_id: &str, r: InspectionResult) -> Result<bool> {
        self.finish(node_id, r)
    }

    pub fn labeling(&self) -> &LabelingStore {
        &self.labeling
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.publisher.dead_letters.list()
    }

    pub fn redrive(&self) -> Result<RedriveReport> {
        self.publisher.redrive()
    }

    pub fn results_path(&self) -> &Path {
        self.results.path()
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::UnknownJob | ErrorCode::UnknownCandidate | ErrorCode::UnknownNode => StatusCode::NOT_FOUND,
        ErrorCode::Conflict | ErrorCode::DuplicateVersion => StatusCode::CONFLICT,
        ErrorCode::NodeSaturated => StatusCode::TOO_MANY_REQUESTS,
        ErrorCode::ModelUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorCode::SinkUnreachable => StatusCode::BAD_GATEWAY,
        ErrorCode::StoreError | ErrorCode::Io => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.0.code.to_string(),
            message: self.0.message,
        };
        (status_for(self.0.code), Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(Error::new(ErrorCode::InvalidConfig, msg))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/inspect", post(inspect))
        .route("/v1/results/{job_id}", get(result))
        .route("/v1/models", post(register_model).get(list_models))
        .route("/v1/plans", post(plan))
        .route("/v1/nodes", get(nodes))
        .route("/v1/nodes/{id}/heartbeat", post(heartbeat))
        .route("/v1/nodes/{id}/jobs", get(take_jobs))
        .route("/v1/nodes/{id}/results", post(report))
        .route("/v1/labeling/candidates", get(candidates).post(import_candidates))
        .route("/v1/labeling/candidates/{id}/decision", post(decide))
        .route("/v1/deadletters", get(dead_letters))
        .route("/v1/deadletters/redrive", post(redrive))
        .with_state(svc)
}

async fn inspect(State(svc): State<Arc<Service>>, req: Request) -> std::result::Result<Json<JobTicket>, ApiError> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/"));
    let (body, bytes) = if multipart {
        let mut mp = Multipart::from_request(req, &()).await.map_err(|e| bad(e.body_text()))?;
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut bytes = Vec::new();
        while let Some(f) = mp.next_field().await.map_err(|e| bad(e.body_text()))? {
            let name = f.name().unwrap_or_default().to_string();
            let data = f.bytes().await.map_err(|e| bad(e.body_text()))?;
            if name == "image" {
                bytes = data.to_vec();
            } else {
                fields.insert(name, String::from_utf8_lossy(&data).into_owned());
            }
        }
        let field = |k: &str| fields.get(k).cloned();
        let body = InspectRequest {
            job_id: field("job_id"),
            image_id: field("image_id"),
            product_id: field("product_id").ok_or_else(|| bad("missing field product_id"))?,
            layer_id: field("layer_id").ok_or_else(|| bad("missing field layer_id"))?,
            image: String::new(),
        };
        (body, bytes)
    } else {
        let Json(body) = Json::<InspectRequest>::from_request(req, &())
            .await
            .map_err(|e| bad(e.body_text()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(body.image.as_bytes())
            .map_err(|e| ApiError(Error::new(ErrorCode::InvalidImage, format!("image is not base64: {e}"))))?;
        (body, bytes)
    };
    Ok(Json(svc.submit(body, bytes)?))
}

async fn result(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<ResultView> {
    Ok(Json(svc.result(&id)?))
}

async fn register_model(
    State(svc): State<Arc<Service>>,
    Json(d): Json<ModelDescriptor>,
) -> std::result::Result<(StatusCode, Json<ModelDescriptor>), ApiError> {
    Ok((StatusCode::CREATED, Json(svc.register_model(d)?)))
}

async fn list_models(State(svc): State<Arc<Service>>) -> Json<Vec<ModelDescriptor>> {
    Json(svc.models())
}

async fn plan(State(svc): State<Arc<Service>>, Json(p): Json<DeploymentPlan>) -> ApiResult<PlanOutcome> {
    let actions = tokio::task::spawn_blocking(move || svc.apply_plan(&p))
        .await
        .map_err(|e| ApiError(Error::new(ErrorCode::Io, e.to_string())))??;
    Ok(Json(PlanOutcome { actions }))
}

async fn nodes(State(svc): State<Arc<Service>>) -> Json<Vec<NodeInfo>> {
    Json(svc.nodes())
}

async fn heartbeat(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(hb): Json<Heartbeat>,
) -> ApiResult<NodeInfo> {
    Ok(Json(svc.heartbeat(&id, &hb)?))
}

async fn take_jobs(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<Vec<Dispatch>> {
    Ok(Json(svc.take_jobs(&id)?))
}

async fn report(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(r): Json<InspectionResult>,
) -> ApiResult<CompletionAck> {
    let accepted = tokio::task::spawn_blocking(move || svc.report(&id, r))
        .await
        .map_err(|e| ApiError(Error::new(ErrorCode::Io, e.to_string())))??;
    Ok(Json(CompletionAck { accepted }))
}

async fn candidates(
    State(svc): State<Arc<Service>>,
    Query(q): Query<CandidateQuery>,
) -> Json<Vec<PatchLabelCandidate>> {
    Json(svc.labeling().list(&CandidateFilter {
        status: q.status,
        sources: q.sources,
    }))
}

async fn import_candidates(
    State(svc): State<Arc<Service>>,
    Json(c): Json<Vec<PatchLabelCandidate>>,
) -> ApiResult<ImportAck> {
    Ok(Json(ImportAck {
        added: svc.labeling().import(&c)?,
    }))
}

async fn decide(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(d): Json<DecisionRequest>,
) -> ApiResult<PatchLabelCandidate> {
    Ok(Json(svc.labeling().decide(&id, d.decision, &d.decided_by)?))
}

async fn dead_letters(State(svc): State<Arc<Service>>) -> Json<Vec<DeadLetter>> {
    Json(svc.dead_letters())
}

async fn redrive(State(svc): State<Arc<Service>>) -> ApiResult<RedriveReport> {
    let r = tokio::task::spawn_blocking(move || svc.redrive())
        .await
        .map_err(|e| ApiError(Error::new(ErrorCode::Io, e.to_string())))??;
    Ok(Json(r))
}

/// Serves until ctrl-c.
pub async fn serve(svc: Arc<Service>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_for(ErrorCode::UnknownJob), StatusCode::NOT_FOUND);
        assert_eq!(status_for(ErrorCode::Conflict), StatusCode::CONFLICT);
        assert_eq!(status_for(ErrorCode::NodeSaturated), StatusCode::TOO_MANY_REQUESTS);
        assert_eq!(status_for(ErrorCode::ModelUnavailable), StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(status_for(ErrorCode::UnknownModel), StatusCode::BAD_REQUEST);
    }

    #[test]
    fn derived_job_id_depends_on_bytes_and_scope() {
        let a = derive_job_id(b"png", &Scope::new("A", "X"));
        assert_eq!(a, derive_job_id(b"png", &Scope::new("A", "X")));
        assert_ne!(a, derive_job_id(b"png", &Scope::new("A", "Y")));
        assert_ne!(a, derive_job_id(b"pnh", &Scope::new("A", "X")));
        assert_eq!(a.len(), 32);
    }
}
