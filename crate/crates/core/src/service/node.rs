//! Computing-node side: image storage, model loading and job execution.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::controller::Dispatch;
use super::{InspectionResult, JobFailure, JobState, ModelDescriptor, ModelKey, ModelRef};
use crate::classify::{LogisticModel, ReferencePatchDetector};
use crate::error::{Error, ErrorCode, Result};
use crate::impact::load_layout;
use crate::pipeline::{inspect_png, Models, PipelineConfig};
use crate::raster::ImageMeta;

pub trait ImageSource: Send + Sync {
    fn fetch(&self, image_ref: &str) -> Result<Vec<u8>>;
}

/// Content-addressed PNG files.
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
        Ok(ImageStore { dir: dir.to_path_buf() })
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let name = format!("{}.png", hex(&Sha256::digest(bytes)));
        let path = self.dir.join(&name);
        if !path.exists() {
            std::fs::write(&path, bytes).map_err(|e| Error::io(path.display(), e))?;
        }
        Ok(name)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ImageSource for ImageStore {
    fn fetch(&self, image_ref: &str) -> Result<Vec<u8>> {
        if image_ref.contains(['/', '\\']) || image_ref.starts_with('.') {
            return Err(Error::new(ErrorCode::InvalidImage, format!("bad image reference {image_ref:?}")));
        }
        let path = self.dir.join(image_ref);
        std::fs::read(&path).map_err(|e| Error::io(path.display(), e))
    }
}

/// Images held in memory by reference.
#[derive(Default)]
pub struct MemoryImages {
    map: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl MemoryImages {
    pub fn insert(&self, image_ref: &str, bytes: Vec<u8>) {
        self.map.lock().expect("images").insert(image_ref.to_string(), Arc::new(bytes));
    }
}

impl ImageSource for MemoryImages {
    fn fetch(&self, image_ref: &str) -> Result<Vec<u8>> {
        self.map
            .lock()
            .expect("images")
            .get(image_ref)
            .map(|b| b.as_ref().clone())
            .ok_or_else(|| Error::new(ErrorCode::InvalidImage, format!("no image {image_ref:?}")))
    }
}

pub trait Executor: Send + Sync {
    fn load(&self, node_id: &str, d: &ModelDescriptor) -> Result<()>;
    fn unload(&self, node_id: &str, key: &ModelKey);
    /// Never fails; failures are carried in the result.
    fn execute(&self, job: &Dispatch) -> InspectionResult;
}

pub type ModelFactory = dyn Fn(&ModelDescriptor) -> Result<Models> + Send + Sync;

/// Loads classifier, detector and layout from the descriptor's files.
pub fn load_artifacts(d: &ModelDescriptor) -> Result<Models> {
    let classifier = LogisticModel::load(Path::new(&d.artifact))?;
    if classifier.meta.mode != d.mode {
        return Err(Error::new(
            ErrorCode::BadArtifact,
            format!("artifact mode {} differs from descriptor mode {}", classifier.meta.mode, d.mode),
        ));
    }
    let det_path = d
        .detector_artifact
        .as_ref()
        .ok_or_else(|| Error::new(ErrorCode::BadArtifact, format!("model {} has no detector artifact", d.key())))?;
    let detector = ReferencePatchDetector {
        model: LogisticModel::load(Path::new(det_path))?,
    };
    let layout = d.layout.as_ref().map(|p| load_layout(Path::new(p))).transpose()?;
    Ok(Models {
        detector: Arc::new(detector),
        classifier: Some(Arc::new(classifier)),
        layout: layout.map(Arc::new),
    })
}

pub struct PipelineExecutor {
    images: Arc<dyn ImageSource>,
    factory: Box<ModelFactory>,
    loaded: Mutex<HashMap<(String, ModelKey), Models>>,
    cfg: PipelineConfig,
}

impl PipelineExecutor {
    pub fn new(images: Arc<dyn ImageSource>, cfg: PipelineConfig) -> Self {
        Self::with_factory(images, cfg, Box::new(load_artifacts))
    }

    pub fn with_factory(images: Arc<dyn ImageSource>, cfg: PipelineConfig, factory: Box<ModelFactory>) -> Self {
        PipelineExecutor {
            images,
            factory,
            loaded: Mutex::new(HashMap::new()),
            cfg,
        }
    }
}

fn failed(job: &Dispatch, stage: &str, e: &Error) -> InspectionResult {
    InspectionResult {
        job_id: job.job_id.clone(),
        image_id: job.image_id.clone(),
        state: JobState::Failed,
        verdict: None,
        defects: Vec::new(),
        model: Some(ModelRef {
            model_id: job.model.model_id.clone(),
            version: job.model.version.clone(),
        }),
        timing_ms: Default::default(),
        failure: Some(JobFailure {
            stage: stage.to_string(),
            code: e.code.to_string(),
            message: e.message.clone(),
        }),
        node_id: Some(job.node_id.clone()),
    }
}

impl Executor for PipelineExecutor {
    fn load(&self, node_id: &str, d: &ModelDescriptor) -> Result<()> {
        let models = (self.factory)(d)?;
        self.loaded
            .lock()
            .expect("models")
            .insert((node_id.to_string(), d.key()), models);
        Ok(())
    }

    fn unload(&self, node_id: &str, key: &ModelKey) {
        self.loaded.lock().expect("models").remove(&(node_id.to_string(), key.clone()));
    }

    fn execute(&self, job: &Dispatch) -> InspectionResult {
        let models = self
            .loaded
            .lock()
            .expect("models")
            .get(&(job.node_id.clone(), job.model.clone()))
            .cloned();
        let Some(models) = models else {
            let e = Error::new(ErrorCode::ModelUnavailable, format!("model {} not loaded on {}", job.model, job.node_id));
            return failed(job, "load", &e);
        };
        let bytes = match self.images.fetch(&job.image_ref) {
            Ok(b) => b,
            Err(e) => return failed(job, "decode", &e),
        };
        let meta = ImageMeta {
            image_id: job.image_id.clone(),
            product_id: job.scope.product_id.clone(),
            layer_id: job.scope.layer_id.clone(),
            captured_at: None,
        };
        match inspect_png(&bytes, meta, &models, &self.cfg) {
            Ok(ins) => InspectionResult {
                job_id: job.job_id.clone(),
                image_id: job.image_id.clone(),
                state: JobState::Done,
                verdict: Some(ins.verdict),
                defects: ins.defects,
                model: Some(ModelRef {
                    model_id: job.model.model_id.clone(),
                    version: job.model.version.clone(),
                }),
                timing_ms: ins.timing_ms,
                failure: None,
                node_id: Some(job.node_id.clone()),
            },
            Err(e) => failed(job, e.stage.name(), &e.error),
        }
    }
}
