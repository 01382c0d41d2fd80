//! HTTP API over the session store.
//!
//! Every response body carries a `schema` id. Failures use one envelope,
//! `{schema, code, message, details}`. Preview routes never touch the event
//! log; PoS runs start a background job that is polled for progress.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use elicit::copula::ConcordanceJudgement;
use elicit::distfit::Family;
use elicit::elicitation::{JudgementSet, QuantityOfInterest, Stage};
use elicit::pos::{Knob, PosResult};
use elicit::session::{
    effect_source, Appended, CreateSession, ExtensionConfig, PosRequest, Service, Session, SessionError,
    DEFAULT_EXTENSION_SAMPLES,
};

pub const ERROR_SCHEMA: &str = "elicit.error/1";
pub const SESSION_VIEW_SCHEMA: &str = "elicit.session-view/1";
pub const JOB_SCHEMA: &str = "elicit.job/1";
/// Header carrying a client token when the body does not.
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
/// Content type selecting the raw column-major sample from the explore route.
pub const OCTET_STREAM: &str = "application/octet-stream";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: json!({}),
        }
    }

    fn body(&self) -> Value {
        json!({
            "schema": ERROR_SCHEMA,
            "code": self.code,
            "message": self.message,
            "details": self.details,
        })
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "not_found" => StatusCode::NOT_FOUND,
        "stage_violation" | "locked" | "token_conflict" => StatusCode::CONFLICT,
        "corrupt_session" | "io_error" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError {
            status: status_for(e.code()),
            code: e.code().into(),
            message: e.to_string(),
            details: e.details(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn reply(status: StatusCode, schema: &str, mut body: Value) -> Response {
    if let Value::Object(m) = &mut body {
        m.insert("schema".into(), Value::String(schema.into()));
    }
    (status, Json(body)).into_response()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

fn decimals(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| elicit::decimal::format(x)).collect()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

fn token(headers: &HeaderMap, body: Option<String>) -> Option<String> {
    body.or_else(|| headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, SessionError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn appended(a: Appended, session: Option<&Session>, extra: Value) -> Value {
    let mut v = json!({"seq": a.seq, "duplicate": a.duplicate});
    if let Some(s) = session {
        v["state_hash"] = json!(s.state_hash());
    }
    if let (Value::Object(m), Value::Object(x)) = (&mut v, extra) {
        m.extend(x);
    }
    v
}

fn session_view(s: &Session) -> Value {
    json!({
        "id": s.id(),
        "state_hash": s.state_hash(),
        "events": s.events().len(),
        "state": s.state(),
    })
}

#[derive(Debug)]
enum JobState {
    Running,
    Done { seq: u64, duplicate: bool, result: Box<PosResult> },
    Failed(Value),
}

#[derive(Debug)]
struct Job {
    session: String,
    n_sims: u64,
    done: AtomicU64,
    state: Mutex<JobState>,
}

#[derive(Clone)]
pub struct AppState {
    service: Arc<Service>,
    jobs: Arc<Mutex<HashMap<String, Arc<Job>>>>,
}

impl AppState {
    pub fn new(service: Service) -> Self {
        AppState {
            service: Arc::new(service),
            jobs: Arc::default(),
        }
    }

    pub fn service(&self) -> &Service {
        &self.service
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(read_session))
        .route("/v1/sessions/{id}/events", get(read_events))
        .route("/v1/sessions/{id}/qois", post(define_qoi))
        .route("/v1/sessions/{id}/judgements", post(submit_judgement))
        .route("/v1/sessions/{id}/fit/preview", post(fit_preview))
        .route("/v1/sessions/{id}/qois/{qoi}/reveal", post(reveal))
        .route("/v1/sessions/{id}/qois/{qoi}/notes", post(add_note))
        .route("/v1/sessions/{id}/qois/{qoi}/fit", post(fit_consensus))
        .route("/v1/sessions/{id}/qois/{qoi}/stage", post(override_stage))
        .route("/v1/sessions/{id}/extension", post(configure_extension))
        .route("/v1/sessions/{id}/extension/{qoi}", get(read_extension))
        .route("/v1/sessions/{id}/extension/{qoi}/medians", post(elicit_median))
        .route("/v1/sessions/{id}/extension/{qoi}/preview", post(extension_preview))
        .route("/v1/sessions/{id}/extension/{qoi}/commit", post(commit_extension))
        .route("/v1/sessions/{id}/copula/explore", post(copula_explore))
        .route("/v1/sessions/{id}/copula/commit", post(commit_copula))
        .route("/v1/sessions/{id}/pos/runs", post(start_pos).get(list_pos))
        .route("/v1/sessions/{id}/pos/sensitivity", post(pos_sensitivity))
        .route("/v1/jobs/{job}", get(job_status))
        .route("/v1/sessions/{id}/export", get(export))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Serves the API until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, service: Service) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, dir = %service.store().dir().display(), "serving");
    axum::serve(listener, router(AppState::new(service))).await
}

async fn health() -> Response {
    reply(StatusCode::OK, "elicit.health/1", json!({"status": "ok"}))
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: CreateSession = parse(&body)?;
    let svc = st.service.clone();
    let s = blocking(move || svc.create_session(&req)).await?;
    Ok(reply(StatusCode::CREATED, SESSION_VIEW_SCHEMA, session_view(&s)))
}

async fn list_sessions(State(st): State<AppState>) -> ApiResult {
    let svc = st.service.clone();
    let ids = blocking(move || svc.list()).await?;
    Ok(reply(StatusCode::OK, "elicit.session-list/1", json!({"sessions": ids})))
}

async fn read_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let svc = st.service.clone();
    let s = blocking(move || svc.session(&id)).await?;
    Ok(reply(StatusCode::OK, SESSION_VIEW_SCHEMA, session_view(&s)))
}

async fn read_events(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let svc = st.service.clone();
    let s = blocking(move || svc.session(&id)).await?;
    Ok(reply(StatusCode::OK, "elicit.events/1", json!({"id": s.id(), "events": s.events()})))
}

#[derive(Deserialize)]
struct QoiBody {
    qoi: QuantityOfInterest,
    #[serde(default)]
    client_token: Option<String>,
}

async fn define_qoi(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: QoiBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, s) = blocking(move || svc.define_qoi(&id, b.qoi, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.appended/1", appended(a, Some(&s), json!({}))))
}

#[derive(Deserialize)]
struct JudgementBody {
    judgement: JudgementSet,
    #[serde(default)]
    client_token: Option<String>,
}

async fn submit_judgement(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: JudgementBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let qoi = b.judgement.qoi.clone();
    let svc = st.service.clone();
    let (a, s) = blocking(move || svc.submit_judgement(&id, b.judgement, t)).await?;
    let record = s.state().record(&qoi).map_err(ApiError::from)?;
    Ok(reply(
        StatusCode::OK,
        "elicit.judgement-recorded/1",
        appended(a, Some(&s), json!({"record": record})),
    ))
}

#[derive(Deserialize)]
struct FitPreviewBody {
    judgement: JudgementSet,
}

async fn fit_preview(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: FitPreviewBody = parse(&body)?;
    let svc = st.service.clone();
    let fits = blocking(move || svc.fit_preview(&id, &b.judgement)).await?;
    Ok(reply(StatusCode::OK, "elicit.fits/1", json!({"fits": fits})))
}

#[derive(Deserialize, Default)]
struct TokenBody {
    #[serde(default)]
    client_token: Option<String>,
}

async fn reveal(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: TokenBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, summary) = blocking(move || svc.reveal(&id, &qoi, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.reveal/1", appended(a, None, json!({"reveal": summary}))))
}

#[derive(Deserialize)]
struct NoteBody {
    text: String,
    #[serde(default)]
    client_token: Option<String>,
}

async fn add_note(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: NoteBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, s) = blocking(move || svc.add_note(&id, &qoi, &b.text, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.appended/1", appended(a, Some(&s), json!({}))))
}

#[derive(Deserialize)]
struct FitBody {
    #[serde(default)]
    family: Option<Family>,
    #[serde(default)]
    client_token: Option<String>,
}

async fn fit_consensus(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: FitBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let q = qoi.clone();
    let (a, s) = blocking(move || svc.fit_consensus(&id, &q, b.family, t)).await?;
    let record = s.state().record(&qoi).map_err(ApiError::from)?;
    Ok(reply(
        StatusCode::OK,
        "elicit.consensus/1",
        appended(a, Some(&s), json!({"consensus": record.consensus, "candidates": record.group_fits})),
    ))
}

#[derive(Deserialize)]
struct StageBody {
    stage: Stage,
    reason: String,
    #[serde(default)]
    client_token: Option<String>,
}

async fn override_stage(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: StageBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, s) = blocking(move || svc.override_stage(&id, &qoi, b.stage, &b.reason, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.appended/1", appended(a, Some(&s), json!({}))))
}

#[derive(Deserialize)]
struct ExtensionBody {
    config: ExtensionConfig,
    #[serde(default)]
    client_token: Option<String>,
}

async fn configure_extension(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ExtensionBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, ext) = blocking(move || svc.configure_extension(&id, b.config, t)).await?;
    let pending = ext.pending();
    Ok(reply(
        StatusCode::OK,
        "elicit.extension/1",
        appended(a, None, json!({"extension": ext, "pending": decimals(&pending)})),
    ))
}

async fn read_extension(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>) -> ApiResult {
    let svc = st.service.clone();
    let s = blocking(move || svc.session(&id)).await?;
    let ext = s
        .state()
        .extensions
        .get(&qoi)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no extension configured for {qoi:?}")))?;
    Ok(reply(
        StatusCode::OK,
        "elicit.extension/1",
        json!({"extension": ext, "pending": decimals(&ext.pending())}),
    ))
}

#[derive(Deserialize)]
struct MedianBody {
    #[serde(with = "elicit::decimal")]
    y: f64,
    #[serde(with = "elicit::decimal")]
    median: f64,
    #[serde(default)]
    client_token: Option<String>,
}

async fn elicit_median(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: MedianBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, ext) = blocking(move || svc.elicit_conditional_median(&id, &qoi, b.y, b.median, t)).await?;
    let pending = ext.pending();
    Ok(reply(
        StatusCode::OK,
        "elicit.extension/1",
        appended(a, None, json!({"extension": ext, "pending": decimals(&pending)})),
    ))
}

#[derive(Deserialize)]
struct ExtensionPreviewBody {
    #[serde(default, with = "elicit::decimal::pairs")]
    what_if: Vec<(f64, f64)>,
    #[serde(default)]
    n: Option<usize>,
    seed: u64,
}

async fn extension_preview(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let b: ExtensionPreviewBody = parse(&body)?;
    let svc = st.service.clone();
    let n = b.n.unwrap_or(DEFAULT_EXTENSION_SAMPLES);
    let p = blocking(move || svc.extension_preview(&id, &qoi, &b.what_if, n, b.seed)).await?;
    Ok(reply(StatusCode::OK, "elicit.extension-preview/1", to_value(&p)))
}

#[derive(Deserialize)]
struct ExtensionCommitBody {
    #[serde(default)]
    n: Option<usize>,
    seed: u64,
    #[serde(default)]
    client_token: Option<String>,
}

async fn commit_extension(State(st): State<AppState>, Path((id, qoi)): Path<(String, String)>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ExtensionCommitBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let n = b.n.unwrap_or(DEFAULT_EXTENSION_SAMPLES);
    let (a, ext) = blocking(move || svc.commit_extension(&id, &qoi, n, b.seed, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.extension/1", appended(a, None, json!({"extension": ext}))))
}

#[derive(Deserialize)]
struct ExploreBody {
    qois: Vec<String>,
    judgements: Vec<ConcordanceJudgement>,
    #[serde(default)]
    n: Option<usize>,
    seed: u64,
}

async fn copula_explore(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ExploreBody = parse(&body)?;
    let svc = st.service.clone();
    let n = b.n.unwrap_or(elicit::copula::PREVIEW_SAMPLES);
    let p = blocking(move || svc.copula_explore_sample(&id, &b.qois, &b.judgements, n, b.seed)).await?;
    let wants_binary = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains(OCTET_STREAM));
    if wants_binary {
        let mut h = HeaderMap::new();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static(OCTET_STREAM));
        h.insert("x-elicit-rows", HeaderValue::from(p.sample.n as u64));
        h.insert("x-elicit-columns", HeaderValue::from(p.sample.d as u64));
        if let Ok(v) = HeaderValue::from_str(&p.model.ids.join(",")) {
            h.insert("x-elicit-ids", v);
        }
        h.insert("x-elicit-layout", HeaderValue::from_static("column-major-f64-le"));
        return Ok((StatusCode::OK, h, p.sample.to_le_bytes()).into_response());
    }
    let columns: Vec<Vec<String>> = (0..p.sample.d).map(|j| decimals(p.sample.column(j))).collect();
    Ok(reply(
        StatusCode::OK,
        "elicit.copula-preview/1",
        json!({
            "summary": p.summary,
            "model": p.model,
            "sample": {"n": p.sample.n, "ids": p.model.ids, "columns": columns},
        }),
    ))
}

#[derive(Deserialize)]
struct CopulaCommitBody {
    qois: Vec<String>,
    judgements: Vec<ConcordanceJudgement>,
    #[serde(default)]
    client_token: Option<String>,
}

async fn commit_copula(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: CopulaCommitBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    let svc = st.service.clone();
    let (a, model) = blocking(move || svc.commit_copula(&id, b.qois, b.judgements, t)).await?;
    Ok(reply(StatusCode::OK, "elicit.copula/1", appended(a, None, json!({"copula": model}))))
}

#[derive(Deserialize)]
struct PosBody {
    #[serde(flatten)]
    request: PosRequest,
    #[serde(default)]
    client_token: Option<String>,
}

fn job_view(id: &str, job: &Job) -> Value {
    let done = job.done.load(Ordering::Relaxed).min(job.n_sims);
    let mut v = json!({
        "job_id": id,
        "session": job.session,
        "completed": done,
        "total": job.n_sims,
        "progress": done as f64 / job.n_sims.max(1) as f64,
    });
    match &*job.state.lock().unwrap_or_else(|e| e.into_inner()) {
        JobState::Running => v["status"] = json!("running"),
        JobState::Done { seq, duplicate, result } => {
            v["status"] = json!("done");
            v["seq"] = json!(seq);
            v["duplicate"] = json!(duplicate);
            v["result"] = to_value(result);
        }
        JobState::Failed(e) => {
            v["status"] = json!("failed");
            v["error"] = e.clone();
        }
    }
    v
}

async fn start_pos(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: PosBody = parse(&body)?;
    let t = token(&headers, b.client_token);
    if b.request.n_sims == 0 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_pos_config", "n_sims must be at least 1"));
    }
    // Cheap checks up front so a bad request fails here rather than in the job.
    let svc = st.service.clone();
    let (sid, req) = (id.clone(), b.request.clone());
    blocking(move || {
        let s = svc.session(&sid)?;
        effect_source(s.state(), &req)?;
        req.design.validate()?;
        req.rule.validate()?;
        req.benchmarks.validate()?;
        Ok(())
    })
    .await?;

    let job_id = uuid::Uuid::new_v4().simple().to_string();
    let job = Arc::new(Job {
        session: id.clone(),
        n_sims: b.request.n_sims,
        done: AtomicU64::new(0),
        state: Mutex::new(JobState::Running),
    });
    st.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(job_id.clone(), job.clone());
    let svc = st.service.clone();
    let worker = job.clone();
    tokio::task::spawn_blocking(move || {
        let out = svc.run_pos_with_progress(&id, b.request, t, Some(&worker.done));
        let next = match out {
            Ok((a, result)) => JobState::Done {
                seq: a.seq,
                duplicate: a.duplicate,
                result: Box::new(result),
            },
            Err(e) => {
                tracing::warn!(session = %id, error = %e, "pos job failed");
                JobState::Failed(ApiError::from(e).body())
            }
        };
        *worker.state.lock().unwrap_or_else(|e| e.into_inner()) = next;
    });
    Ok(reply(StatusCode::ACCEPTED, JOB_SCHEMA, job_view(&job_id, &job)))
}

async fn job_status(State(st): State<AppState>, Path(job_id): Path<String>) -> ApiResult {
    let job = st
        .jobs
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get(&job_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job {job_id} not found")))?;
    Ok(reply(StatusCode::OK, JOB_SCHEMA, job_view(&job_id, &job)))
}

async fn list_pos(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let svc = st.service.clone();
    let s = blocking(move || svc.session(&id)).await?;
    Ok(reply(StatusCode::OK, "elicit.pos-runs/1", json!({"runs": s.state().pos_runs})))
}

#[derive(Deserialize)]
struct SensitivityBody {
    #[serde(flatten)]
    request: PosRequest,
    knob: Knob,
}

async fn pos_sensitivity(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: SensitivityBody = parse(&body)?;
    let svc = st.service.clone();
    let rows = blocking(move || svc.pos_sensitivity(&id, &b.request, &b.knob)).await?;
    Ok(reply(StatusCode::OK, "elicit.pos-sensitivity/1", json!({"rows": rows})))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn export(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<ExportQuery>) -> ApiResult {
    let svc = st.service.clone();
    let report = blocking(move || svc.export(&id)).await?;
    match q.format.as_deref().unwrap_or("json") {
        "json" => Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response()),
        "text" => Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.to_text()).into_response()),
        other => Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("unknown export format {other:?}"))),
    }
}
