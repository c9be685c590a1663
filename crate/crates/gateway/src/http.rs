//! HTTP listener: batch ingest, health, the FHIR read API and operator endpoints.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, RawQuery, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use blockiot_core::fhir::{capability_statement, SearchError, SearchQuery};
use blockiot_core::identity::PatientKey;
use blockiot_core::ingest::{Authenticated, Credentials, IngestError};
use blockiot_core::principal::{Action, Principal, Role};
use blockiot_core::runtime::{Node, NodeError};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::intake::{parse_payloads, Intake};
use crate::reply::{error_body, status_code};

const FHIR_JSON: &str = "application/fhir+json";

#[derive(Clone)]
struct AppState {
    node: Arc<Node>,
    intake: Intake,
}

pub(crate) fn router(intake: Intake, body_limit: usize) -> Router {
    let state = AppState { node: intake.node().clone(), intake };
    Router::new()
        .route("/ingest/observations", post(ingest))
        .route("/healthz", get(healthz))
        .route("/status", get(status))
        .route("/fhir/metadata", get(metadata))
        .route("/fhir/{resource}", get(fhir_search))
        .route("/admin/access", post(admin_access))
        .route("/admin/seal", post(admin_seal))
        .route("/admin/summaries", post(admin_summaries))
        .route("/admin/summary/{patient}", get(admin_summary))
        .route("/admin/alerts", get(admin_alerts))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

fn error_response(e: &IngestError) -> Response {
    let status = StatusCode::from_u16(status_code(e)).expect("valid status");
    let mut resp = (status, Json(error_body(e))).into_response();
    match e {
        IngestError::Unauthenticated(_) => {
            resp.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        e if e.is_retryable() => {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        _ => {}
    }
    resp
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = v.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim().to_string())
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<Authenticated, IngestError> {
    let token = bearer(headers).ok_or(IngestError::Unauthenticated(blockiot_core::ingest::AuthError::Unknown))?;
    Ok(state.node.registrations().authenticate(&Credentials::Bearer(token), state.node.now())?)
}

async fn ingest(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let sender = match authenticate(&state, &headers) {
        Ok(s) => s,
        Err(e) => return error_response(&e),
    };
    let payloads = match parse_payloads(&body) {
        Ok(p) => p,
        Err(e) => return error_response(&e),
    };
    match state.intake.submit(sender, payloads).await {
        Ok(receipt) => (StatusCode::OK, Json(receipt)).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn healthz(State(state): State<AppState>) -> Response {
    if state.node.is_ready() {
        (StatusCode::OK, Json(json!({"status": "ready"}))).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "unavailable"}))).into_response()
    }
}

async fn status(State(state): State<AppState>) -> Response {
    let node = state.node.clone();
    match tokio::task::spawn_blocking(move || node.status()).await {
        Ok(s) => Json(s).into_response(),
        Err(e) => internal(e.to_string()),
    }
}

fn fhir(status: StatusCode, body: Value) -> Response {
    let mut resp = (status, body.to_string()).into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(FHIR_JSON));
    resp
}

fn outcome(status: StatusCode, code: &str, message: String) -> Response {
    fhir(
        status,
        json!({
            "resourceType": "OperationOutcome",
            "issue": [{"severity": "error", "code": code, "diagnostics": message}],
        }),
    )
}

fn internal(message: String) -> Response {
    tracing::error!(%message, "request failed");
    (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": message}))).into_response()
}

async fn metadata() -> Response {
    fhir(StatusCode::OK, capability_statement())
}

fn principal_or_401(state: &AppState, headers: &HeaderMap) -> Result<Principal, Response> {
    authenticate(state, headers).map(|a| a.principal().clone()).map_err(|e| error_response(&e))
}

async fn fhir_search(
    State(state): State<AppState>,
    Path(resource): Path<String>,
    RawQuery(query): RawQuery,
    headers: HeaderMap,
) -> Response {
    let principal = match principal_or_401(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let node = state.node.clone();
    let result = tokio::task::spawn_blocking(move || {
        let q = SearchQuery::parse(&resource, query.as_deref().unwrap_or(""))?;
        node.fhir_search(&resource, &q, &principal)
    })
    .await;
    match result {
        Ok(Ok(bundle)) => fhir(StatusCode::OK, bundle),
        // Nothing about the target leaks on denial.
        Ok(Err(SearchError::Forbidden)) => StatusCode::FORBIDDEN.into_response(),
        Ok(Err(e @ SearchError::UnsupportedParam(_))) => outcome(StatusCode::BAD_REQUEST, "not-supported", e.to_string()),
        Ok(Err(e @ SearchError::InvalidParam { .. })) => outcome(StatusCode::BAD_REQUEST, "invalid", e.to_string()),
        Ok(Err(e @ SearchError::UnknownResource(_))) => outcome(StatusCode::NOT_FOUND, "not-found", e.to_string()),
        Ok(Err(e @ SearchError::Storage(_))) => outcome(StatusCode::INTERNAL_SERVER_ERROR, "exception", e.to_string()),
        Err(e) => internal(e.to_string()),
    }
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    let p = principal_or_401(state, headers)?;
    if p.role == Role::Admin {
        Ok(())
    } else {
        Err(StatusCode::FORBIDDEN.into_response())
    }
}

fn node_error(e: NodeError) -> Response {
    let status = match e {
        NodeError::Rejected(_) => StatusCode::CONFLICT,
        NodeError::Ledger(_) | NodeError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(json!({"error": e.to_string()}))).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, NodeError> + Send + 'static) -> Result<T, Response> {
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(node_error(e)),
        Err(e) => Err(internal(e.to_string())),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AccessRequest {
    grant: bool,
    grantee: String,
    /// Patient key in hex, `Patient/<id>`, or a manufacturer patient id.
    patient: String,
    #[serde(default = "read_scope")]
    scope: Action,
}

fn read_scope() -> Action {
    Action::Read
}

async fn admin_access(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = require_admin(&state, &headers) {
        return r;
    }
    let req: AccessRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))).into_response(),
    };
    let Some(patient) = state.node.directory().resolve_patient(&req.patient) else {
        return (StatusCode::NOT_FOUND, Json(json!({"error": "unknown patient"}))).into_response();
    };
    let node = state.node.clone();
    match blocking(move || node.set_access(req.grant, &req.grantee, patient, req.scope)).await {
        Ok(tx) => Json(json!({"tx_id": tx})).into_response(),
        Err(r) => r,
    }
}

async fn admin_seal(State(state): State<AppState>, headers: HeaderMap) -> Response {
    if let Err(r) = require_admin(&state, &headers) {
        return r;
    }
    let node = state.node.clone();
    match blocking(move || node.seal_pending()).await {
        Ok(Some(o)) => Json(json!({
            "sealed": true,
            "height": o.block.height,
            "transactions": o.block.transactions.len(),
            "alerts": o.new_alerts.len(),
        }))
        .into_response(),
        Ok(None) => Json(json!({"sealed": false})).into_response(),
        Err(r) => r,
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SummariesRequest {
    #[serde(default)]
    date: Option<chrono::NaiveDate>,
}

async fn admin_summaries(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = require_admin(&state, &headers) {
        return r;
    }
    let req: SummariesRequest = if body.is_empty() {
        SummariesRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))).into_response(),
        }
    };
    let node = state.node.clone();
    match blocking(move || node.publish_summaries(req.date)).await {
        Ok(list) => {
            let items: Vec<Value> = list.iter().map(|(p, tx)| json!({"patient": p, "tx_id": tx})).collect();
            Json(Value::Array(items)).into_response()
        }
        Err(r) => r,
    }
}

async fn admin_summary(State(state): State<AppState>, Path(patient): Path<String>, headers: HeaderMap) -> Response {
    if let Err(r) = require_admin(&state, &headers) {
        return r;
    }
    let Ok(key) = patient.parse::<PatientKey>() else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "patient must be a hex patient key"}))).into_response();
    };
    let Some(addr) = state.node.state().summaries.get(&key).copied() else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let node = state.node.clone();
    match blocking(move || node.cas().get(&addr).map_err(|e| NodeError::Storage(e.to_string()))).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(r) => r,
    }
}

#[derive(Deserialize)]
struct AlertsQuery {
    patient: Option<PatientKey>,
}

async fn admin_alerts(State(state): State<AppState>, Query(q): Query<AlertsQuery>, headers: HeaderMap) -> Response {
    if let Err(r) = require_admin(&state, &headers) {
        return r;
    }
    let s = state.node.state();
    let alerts: Vec<&blockiot_core::ledger::AlertRecord> =
        s.alerts.iter().filter(|a| q.patient.is_none_or(|p| a.event.patient_key == p)).collect();
    Json(json!(alerts)).into_response()
}
