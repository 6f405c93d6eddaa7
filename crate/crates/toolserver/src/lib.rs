//! VideoCrop as a service: sessions over registered manifests, each with its
//! own visual token ledger.
//!
//! HTTP routes:
//!
//! | method | path                  | body                                 |
//! |--------|-----------------------|--------------------------------------|
//! | POST   | `/manifests`          | a manifest document                  |
//! | POST   | `/sessions`           | `{"manifest_ref": .., "quota": ..?}` |
//! | GET    | `/sessions/{id}`      |                                      |
//! | POST   | `/sessions/{id}/crop` | `{"directive": {..}}`                |
//! | DELETE | `/sessions/{id}`      |                                      |
//!
//! The stdio mode reads one JSON request per line with an `op` field
//! (`register`, `open`, `crop`, `close`, `info`) and writes one JSON
//! response per line.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clueseek_core::manifest::{parse_manifest, VideoManifest};
use clueseek_core::protocol::{CropDirective, ToolObservation};
use clueseek_core::quota::{BudgetLedger, QuotaConfig, SamplingPlan};
use clueseek_core::tool::{execute_crop, CropResult, Visibility};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown manifest {0}")]
    UnknownManifest(String),
    #[error("manifest {0} is already registered")]
    DuplicateManifest(String),
    #[error("invalid quota config: {0}")]
    InvalidQuota(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::UnknownManifest(_) => "unknown_manifest",
            ServiceError::DuplicateManifest(_) => "duplicate_manifest",
            ServiceError::InvalidQuota(_) => "invalid_quota",
            ServiceError::BadRequest(_) => "bad_request",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownManifest(_) => StatusCode::NOT_FOUND,
            ServiceError::DuplicateManifest(_) => StatusCode::CONFLICT,
            ServiceError::InvalidQuota(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }

    fn body(&self) -> ErrorBody {
        ErrorBody { error: self.code().to_string(), message: self.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSessionRequest {
    pub manifest_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSessionResponse {
    pub session_id: String,
    pub manifest_ref: String,
    pub budget_cap: u64,
    pub overview_tokens: u64,
    pub remaining_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub manifest_ref: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub budget_cap: u64,
    pub spent: u64,
    pub remaining_budget: u64,
    pub crops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropStatus {
    Ok,
    RefusedBudget,
    InvalidDirective,
}

/// The directive is taken as raw JSON so a malformed one is answered with
/// `invalid_directive` rather than a transport error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropBody {
    pub directive: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropResponse {
    pub status: CropStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<SamplingPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<ToolObservation>,
    pub remaining_budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseResponse {
    pub session_id: String,
    pub closed: bool,
}

#[derive(Debug)]
struct Session {
    manifest: Arc<VideoManifest>,
    quota: QuotaConfig,
    ledger: BudgetLedger,
    created_at: u64,
    crops: u32,
}

/// Shared service state. Sessions are independent; each one serializes its
/// own crops behind a mutex so a charge and its observation happen together.
#[derive(Debug)]
pub struct ToolService {
    manifests: RwLock<BTreeMap<String, Arc<VideoManifest>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    quota: QuotaConfig,
    visibility: Visibility,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl ToolService {
    pub fn new(quota: QuotaConfig, visibility: Visibility) -> Self {
        ToolService {
            manifests: RwLock::new(BTreeMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            quota,
            visibility,
        }
    }

    pub fn with_manifests(quota: QuotaConfig, visibility: Visibility, manifests: impl IntoIterator<Item = VideoManifest>) -> Self {
        let svc = Self::new(quota, visibility);
        {
            let mut store = svc.manifests.write().expect("manifest lock");
            for m in manifests {
                store.insert(m.id.clone(), Arc::new(m));
            }
        }
        svc
    }

    pub fn register_manifest(&self, manifest: VideoManifest) -> Result<(), ServiceError> {
        let mut store = self.manifests.write().expect("manifest lock");
        if store.contains_key(&manifest.id) {
            return Err(ServiceError::DuplicateManifest(manifest.id));
        }
        store.insert(manifest.id.clone(), Arc::new(manifest));
        Ok(())
    }

    pub fn manifest_ids(&self) -> Vec<String> {
        self.manifests.read().expect("manifest lock").keys().cloned().collect()
    }

    /// Opens a session and charges the overview up front.
    pub fn open_session(&self, req: &OpenSessionRequest) -> Result<OpenSessionResponse, ServiceError> {
        let manifest = self
            .manifests
            .read()
            .expect("manifest lock")
            .get(&req.manifest_ref)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownManifest(req.manifest_ref.clone()))?;
        let quota = req.quota.clone().unwrap_or_else(|| self.quota.clone());
        quota.validate().map_err(|e| ServiceError::InvalidQuota(e.to_string()))?;
        let ledger = BudgetLedger::with_overview(&quota);
        let session_id = format!("s-{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let resp = OpenSessionResponse {
            session_id: session_id.clone(),
            manifest_ref: manifest.id.clone(),
            budget_cap: ledger.cap(),
            overview_tokens: ledger.spent(),
            remaining_budget: ledger.remaining(),
        };
        let session = Session { manifest, quota, ledger, created_at: now_ms(), crops: 0 };
        self.sessions.lock().expect("session table lock").insert(session_id, Arc::new(Mutex::new(session)));
        Ok(resp)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo, ServiceError> {
        let handle = self.session(id)?;
        let s = handle.lock().expect("session lock");
        Ok(SessionInfo {
            session_id: id.to_string(),
            manifest_ref: s.manifest.id.clone(),
            created_at: s.created_at,
            budget_cap: s.ledger.cap(),
            spent: s.ledger.spent(),
            remaining_budget: s.ledger.remaining(),
            crops: s.crops,
        })
    }

    pub fn crop(&self, session_id: &str, directive: &CropDirective) -> Result<CropResponse, ServiceError> {
        let handle = self.session(session_id)?;
        let mut guard = handle.lock().expect("session lock");
        let s = &mut *guard;
        let turn = s.crops + 1;
        let resp = match execute_crop(&s.manifest, directive, &s.quota, self.visibility, &mut s.ledger, turn) {
            CropResult::Ok { plan, observation } => {
                s.crops += 1;
                CropResponse {
                    status: CropStatus::Ok,
                    plan: Some(plan),
                    observation: Some(observation),
                    remaining_budget: s.ledger.remaining(),
                    detail: None,
                }
            }
            CropResult::RefusedBudget { remaining } => CropResponse {
                status: CropStatus::RefusedBudget,
                plan: None,
                observation: None,
                remaining_budget: remaining,
                detail: None,
            },
            CropResult::InvalidDirective => CropResponse {
                status: CropStatus::InvalidDirective,
                plan: None,
                observation: None,
                remaining_budget: s.ledger.remaining(),
                detail: Some("segment lies outside the video".to_string()),
            },
        };
        Ok(resp)
    }

    /// Like [`ToolService::crop`] but takes the directive as raw JSON.
    pub fn crop_value(&self, session_id: &str, directive: &Value) -> Result<CropResponse, ServiceError> {
        match CropDirective::deserialize(directive) {
            Ok(d) => self.crop(session_id, &d),
            Err(e) => {
                let handle = self.session(session_id)?;
                let remaining = handle.lock().expect("session lock").ledger.remaining();
                Ok(CropResponse {
                    status: CropStatus::InvalidDirective,
                    plan: None,
                    observation: None,
                    remaining_budget: remaining,
                    detail: Some(e.to_string()),
                })
            }
        }
    }

    /// Idempotent: closing an unknown or closed session is not an error.
    pub fn close_session(&self, id: &str) -> CloseResponse {
        let removed = self.sessions.lock().expect("session table lock").remove(id).is_some();
        CloseResponse { session_id: id.to_string(), closed: removed }
    }

    /// A copy of one session's ledger, for budget audits.
    pub fn ledger_snapshot(&self, id: &str) -> Result<BudgetLedger, ServiceError> {
        Ok(self.session(id)?.lock().expect("session lock").ledger.clone())
    }

    /// Handles one stdio request line and returns the response line.
    pub fn handle_line(&self, line: &str) -> String {
        let out = match serde_json::from_str::<StdioRequest>(line) {
            Err(e) => Err(ServiceError::BadRequest(e.to_string())),
            Ok(req) => self.dispatch(req),
        };
        match out {
            Ok(v) => v,
            Err(e) => serde_json::to_string(&e.body()).expect("error serializes"),
        }
    }

    fn dispatch(&self, req: StdioRequest) -> Result<String, ServiceError> {
        match req {
            StdioRequest::Register { manifest } => {
                let m = manifest_from_value(&manifest)?;
                let id = m.id.clone();
                self.register_manifest(m)?;
                Ok(to_line(&Registered { registered: id }))
            }
            StdioRequest::Open(open) => self.open_session(&open).map(|r| to_line(&r)),
            StdioRequest::Crop { session_id, directive } => self.crop_value(&session_id, &directive).map(|r| to_line(&r)),
            StdioRequest::Close { session_id } => Ok(to_line(&self.close_session(&session_id))),
            StdioRequest::Info { session_id } => self.session_info(&session_id).map(|r| to_line(&r)),
        }
    }
}

fn manifest_from_value(doc: &Value) -> Result<VideoManifest, ServiceError> {
    parse_manifest(&doc.to_string()).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("response serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub registered: String,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum StdioRequest {
    Register { manifest: Value },
    Open(OpenSessionRequest),
    Crop { session_id: String, directive: Value },
    Close { session_id: String },
    Info { session_id: String },
}

/// Serves newline-delimited JSON requests until `input` is exhausted.
pub fn run_stdio(service: &ToolService, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", service.handle_line(&line))?;
        output.flush()?;
    }
    Ok(())
}

async fn register(State(svc): State<Arc<ToolService>>, Json(doc): Json<Value>) -> Result<impl IntoResponse, ServiceError> {
    let m = manifest_from_value(&doc)?;
    let id = m.id.clone();
    svc.register_manifest(m)?;
    Ok((StatusCode::CREATED, Json(Registered { registered: id })))
}

async fn open(
    State(svc): State<Arc<ToolService>>,
    Json(req): Json<OpenSessionRequest>,
) -> Result<(StatusCode, Json<OpenSessionResponse>), ServiceError> {
    let resp = svc.open_session(&req)?;
    tracing::debug!(session = %resp.session_id, manifest = %resp.manifest_ref, "session opened");
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn info(State(svc): State<Arc<ToolService>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ServiceError> {
    svc.session_info(&id).map(Json)
}

async fn crop(
    State(svc): State<Arc<ToolService>>,
    Path(id): Path<String>,
    Json(body): Json<CropBody>,
) -> Result<Json<CropResponse>, ServiceError> {
    svc.crop_value(&id, &body.directive).map(Json)
}

async fn close(State(svc): State<Arc<ToolService>>, Path(id): Path<String>) -> Json<CloseResponse> {
    Json(svc.close_session(&id))
}

pub fn router(service: Arc<ToolService>) -> Router {
    Router::new()
        .route("/manifests", post(register))
        .route("/sessions", post(open))
        .route("/sessions/{id}", get(info).delete(close))
        .route("/sessions/{id}/crop", post(crop))
        .with_state(service)
}

/// Serves HTTP on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<ToolService>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "toolserver listening");
    axum::serve(listener, router(service)).await
}
