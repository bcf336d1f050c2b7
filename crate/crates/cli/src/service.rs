//! HTTP colorization service: a bounded job queue drained by sampler threads,
//! with clients polling job state.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::Serialize;
use serde_json::{json, Map, Value};

use mtcolor_core::checkpoint::Checkpoint;
use mtcolor_core::color::{decode_png, encode_png, GrayField, PALETTE};
use mtcolor_core::data::annotation::parse_instance;
use mtcolor_core::denoiser::Denoiser;
use mtcolor_core::diffusion::{NoiseSchedule, SamplerConfig};
use mtcolor_core::multisample::{colorize, conditioning_from_instances, ColorizeRequest, Provenance};
use mtcolor_core::params::ParamStore;
use mtcolor_core::Error;

pub const DEFAULT_QUEUE: usize = 8;

/// A loaded model ready to sample.
pub struct Engine {
    pub model: Denoiser,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub checkpoint_hash: String,
}

impl Engine {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> mtcolor_core::Result<Self> {
        let (model, store) = ckpt.instantiate()?;
        Ok(Self { model, store, schedule: ckpt.schedule()?, checkpoint_hash: ckpt.hash()? })
    }

    pub fn image_size(&self) -> usize {
        self.model.config().image_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    pub request: Value,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub result_png_base64: Option<String>,
    pub provenance: Option<Provenance>,
    pub error: Option<String>,
}

impl Job {
    /// Moves forward only; finished jobs never change.
    fn advance(&mut self, to: JobState) -> bool {
        if to <= self.state || matches!(self.state, JobState::Done | JobState::Failed) {
            return false;
        }
        self.state = to;
        true
    }
}

/// A request rejected before queueing.
#[derive(Debug, thiserror::Error)]
#[error("{field}: {message}")]
pub struct RequestError {
    pub field: String,
    pub message: String,
}

fn reject(field: impl Into<String>, message: impl Into<String>) -> RequestError {
    RequestError { field: field.into(), message: message.into() }
}

const FIELDS: [&str; 9] =
    ["gray_png_base64", "global_text", "instances", "alpha", "beta", "steps", "guidance", "seed", "luma_lock"];

/// Validates a colorize body and builds the request plus its normalized echo.
pub fn parse_request(body: &Value, image_size: usize, schedule: &NoiseSchedule) -> Result<(ColorizeRequest, Value), RequestError> {
    let obj = body.as_object().ok_or_else(|| reject("", "expected an object"))?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(reject(k.as_str(), "unknown field"));
    }
    let gray_b64 = obj
        .get("gray_png_base64")
        .ok_or_else(|| reject("gray_png_base64", "missing"))?
        .as_str()
        .ok_or_else(|| reject("gray_png_base64", "expected a string"))?;
    let png = BASE64.decode(gray_b64).map_err(|e| reject("gray_png_base64", format!("bad base64: {e}")))?;
    let img = decode_png(&png).map_err(|e| reject("gray_png_base64", e.to_string()))?;
    if (img.width() as usize, img.height() as usize) != (image_size, image_size) {
        return Err(reject(
            "gray_png_base64",
            format!("image is {}×{}, model expects {image_size}×{image_size}", img.width(), img.height()),
        ));
    }
    let gray = GrayField::from_rgb(&img);

    let global_text = match obj.get("global_text") {
        None | Some(Value::Null) => String::new(),
        Some(v) => v.as_str().ok_or_else(|| reject("global_text", "expected a string"))?.to_string(),
    };
    let empty = Vec::new();
    let raw = match obj.get("instances") {
        None | Some(Value::Null) => &empty,
        Some(v) => v.as_array().ok_or_else(|| reject("instances", "expected an array"))?,
    };
    let mut instances = Vec::with_capacity(raw.len());
    for (k, v) in raw.iter().enumerate() {
        let inst = parse_instance(v, &format!("instances[{k}]"), 0, k, (image_size, image_size), false).map_err(|e| match e {
            Error::Schema { field, message, .. } => reject(field, message),
            other => reject(format!("instances[{k}]"), other.to_string()),
        })?;
        instances.push((inst.mask, inst.text));
    }

    let defaults = SamplerConfig::default();
    let number = |key: &str, default: f64| -> Result<f64, RequestError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(default),
            Some(v) => v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| reject(key, "expected a number")),
        }
    };
    let integer = |key: &str, default: u64| -> Result<u64, RequestError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| reject(key, "expected a non-negative integer")),
        }
    };
    let alpha = number("alpha", defaults.alpha)?;
    let beta = number("beta", defaults.beta)?;
    let guidance = number("guidance", defaults.guidance_scale)?;
    let steps = integer("steps", defaults.ddim_steps as u64)? as usize;
    let seed = integer("seed", defaults.seed)?;
    let luma_lock = match obj.get("luma_lock") {
        None | Some(Value::Null) => true,
        Some(v) => v.as_bool().ok_or_else(|| reject("luma_lock", "expected a boolean"))?,
    };
    for (key, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(reject(key, format!("{v} outside [0, 1]")));
        }
    }
    if steps == 0 || steps > schedule.steps() {
        return Err(reject("steps", format!("{steps} outside 1..={}", schedule.steps())));
    }
    let sampler = SamplerConfig { ddim_steps: steps, guidance_scale: guidance, alpha, beta, seed, ..defaults };
    sampler.validate(schedule).map_err(|e| reject("", e.to_string()))?;

    let echo = json!({
        "gray_png_base64": gray_b64,
        "global_text": global_text,
        "instances": instances.iter().map(|(m, t)| json!({"text": t, "mask": m})).collect::<Vec<_>>(),
        "alpha": alpha,
        "beta": beta,
        "steps": steps,
        "guidance": guidance,
        "seed": seed,
        "luma_lock": luma_lock,
    });
    let cond = conditioning_from_instances(gray, &global_text, &instances).map_err(|e| reject("instances", e.to_string()))?;
    let mut req = ColorizeRequest::new(cond, sampler);
    req.luma_lock = luma_lock;
    Ok((req, echo))
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Inner {
    engine: Engine,
    jobs: Mutex<HashMap<String, Job>>,
    queue: SyncSender<(String, ColorizeRequest)>,
    receiver: Arc<Mutex<Receiver<(String, ColorizeRequest)>>>,
    next_id: AtomicU64,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

pub enum Submit {
    Queued(String),
    Full,
}

impl Service {
    /// A service with an empty queue of `capacity` slots and no workers.
    pub fn new(engine: Engine, capacity: usize) -> Self {
        let (queue, receiver) = sync_channel(capacity);
        let inner = Inner {
            engine,
            jobs: Mutex::new(HashMap::new()),
            queue,
            receiver: Arc::new(Mutex::new(receiver)),
            next_id: AtomicU64::new(1),
        };
        Self { inner: Arc::new(inner) }
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    /// Starts `n` sampler threads. They run until the process exits.
    pub fn spawn_workers(&self, n: usize) {
        for i in 0..n {
            let svc = self.clone();
            std::thread::Builder::new()
                .name(format!("sampler-{i}"))
                .spawn(move || svc.worker_loop())
                .expect("spawn sampler thread");
        }
    }

    fn worker_loop(&self) {
        loop {
            let next = self.inner.receiver.lock().expect("queue lock").recv();
            let Ok((id, req)) = next else { return };
            self.update(&id, |job| {
                if job.advance(JobState::Running) {
                    job.started_ms = Some(now_ms());
                }
            });
            let e = &self.inner.engine;
            let result = colorize(&req, &e.model, &e.store, &e.schedule).and_then(|out| {
                let png = encode_png(&out.image)?;
                let mut prov = out.provenance;
                prov.checkpoint_hash = Some(e.checkpoint_hash.clone());
                Ok((png, prov))
            });
            self.update(&id, |job| {
                let to = if result.is_ok() { JobState::Done } else { JobState::Failed };
                if !job.advance(to) {
                    return;
                }
                job.finished_ms = Some(now_ms());
                match &result {
                    Ok((png, prov)) => {
                        job.result_png_base64 = Some(BASE64.encode(png));
                        job.provenance = Some(prov.clone());
                    }
                    Err(err) => job.error = Some(err.to_string()),
                }
            });
        }
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.inner.jobs.lock().expect("job lock").get_mut(id) {
            f(job);
        }
    }

    pub fn submit(&self, req: ColorizeRequest, echo: Value) -> Submit {
        let id = format!("job-{:08}", self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        let job = Job {
            id: id.clone(),
            state: JobState::Queued,
            request: echo,
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
            result_png_base64: None,
            provenance: None,
            error: None,
        };
        // Registered before sending so a fast worker always finds it.
        self.inner.jobs.lock().expect("job lock").insert(id.clone(), job);
        match self.inner.queue.try_send((id.clone(), req)) {
            Ok(()) => Submit::Queued(id),
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.inner.jobs.lock().expect("job lock").remove(&id);
                Submit::Full
            }
        }
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.inner.jobs.lock().expect("job lock").get(id).cloned()
    }
}

fn error_body(status: StatusCode, message: impl Into<String>, field: Option<String>) -> Response {
    let mut body = Map::new();
    body.insert("error".into(), Value::String(message.into()));
    if let Some(f) = field {
        body.insert("field".into(), Value::String(f));
    }
    (status, Json(Value::Object(body))).into_response()
}

async fn health(State(svc): State<Service>) -> Json<Value> {
    Json(json!({"status": "ok", "checkpoint_hash": svc.engine().checkpoint_hash}))
}

async fn palette() -> Json<Value> {
    Json(Value::Array(PALETTE.iter().map(|c| json!({"name": c.name, "rgb": c.rgb})).collect()))
}

async fn submit(State(svc): State<Service>, body: axum::body::Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}"), Some(String::new())),
    };
    let e = svc.engine();
    let (req, echo) = match parse_request(&value, e.image_size(), &e.schedule) {
        Ok(r) => r,
        Err(err) => return error_body(StatusCode::BAD_REQUEST, err.message, Some(err.field)),
    };
    match svc.submit(req, echo) {
        Submit::Queued(id) => (StatusCode::ACCEPTED, Json(json!({"job_id": id}))).into_response(),
        Submit::Full => error_body(StatusCode::CONFLICT, "job queue is full", None),
    }
}

async fn job(State(svc): State<Service>, Path(id): Path<String>) -> Response {
    match svc.job(&id) {
        Some(job) => Json(job).into_response(),
        None => error_body(StatusCode::NOT_FOUND, format!("unknown job {id}"), None),
    }
}

/// API routes, plus static files from `static_dir` for everything else.
pub fn router(svc: Service, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/palette", get(palette))
        .route("/api/colorize", post(submit))
        .route("/api/jobs/{id}", get(job))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}
