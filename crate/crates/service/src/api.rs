use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use elicit_core::distfit::{fit_beta_from_triplet, CiLevel, ElicitedTriplet};
use elicit_core::elicitation::{Arm, ExpertProfile, Round, SessionError, SessionState, WorkshopSession, SCHEMA_VERSION};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{bearer, expert_token, facilitator_token, tokens_equal};
use crate::error::ApiError;
use crate::store::{Created, Event, SessionHandle, SessionStore, StoreError};

pub const DEFAULT_PREVIEW_POINTS: usize = 101;
const MAX_PREVIEW_POINTS: usize = 2001;

#[derive(Clone)]
pub struct AppState {
    store: Arc<SessionStore>,
    secret: Arc<str>,
}

impl AppState {
    pub fn new(store: SessionStore, secret: &str) -> Self {
        Self { store: Arc::new(store), secret: secret.into() }
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(describe_session))
        .route("/sessions/{id}/export", get(export_session))
        .route("/sessions/{id}/experts", post(register_expert))
        .route("/sessions/{id}/submissions", post(submit))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/rounds/{round}/boxplots", get(boxplots))
        .route("/preview", get(preview))
        .with_state(state)
}

type Reply = Result<(StatusCode, Json<Value>), ApiError>;

fn ok(status: StatusCode, mut body: Value) -> Reply {
    if let Value::Object(map) = &mut body {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    Ok((status, Json(body)))
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Session(s) => s.into(),
            StoreError::InvalidId(_) => ApiError::unprocessable("invalid_session_id", e.to_string(), Value::Null),
            other => {
                tracing::error!(error = %other, "storage failure");
                ApiError::Storage(other.to_string())
            }
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let slice: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(slice).map_err(|e| ApiError::unprocessable("invalid_body", e.to_string(), Value::Null))
}

enum Caller {
    Facilitator,
    Expert(String),
}

impl AppState {
    fn require_facilitator(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        match bearer(headers) {
            Some(t) if tokens_equal(t, &facilitator_token(&self.secret)) => Ok(()),
            _ => Err(ApiError::Unauthorized),
        }
    }

    fn caller(&self, headers: &HeaderMap, session: &WorkshopSession) -> Result<Caller, ApiError> {
        let token = bearer(headers).ok_or(ApiError::Unauthorized)?;
        if tokens_equal(token, &facilitator_token(&self.secret)) {
            return Ok(Caller::Facilitator);
        }
        session
            .experts()
            .iter()
            .find(|e| tokens_equal(token, &expert_token(&self.secret, session.session_id(), &e.profile.expert_id)))
            .map(|e| Caller::Expert(e.profile.expert_id.clone()))
            .ok_or(ApiError::Unauthorized)
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.store.get(id).ok_or_else(|| ApiError::UnknownSession(id.to_owned()))
    }
}

fn descriptor(s: &WorkshopSession) -> Value {
    json!({
        "session_id": s.session_id(),
        "state": s.state(),
        "experts": s.experts().len(),
        "submissions": s.submissions().len(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    session_id: Option<String>,
}

async fn create_session(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Reply {
    st.require_facilitator(&headers)?;
    let req: CreateSession = parse_body(&body)?;
    let id = req.session_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    match st.store.create(&id)? {
        Created::New(h) => ok(StatusCode::CREATED, descriptor(&h.current())),
        Created::Existing(h) => ok(StatusCode::OK, descriptor(&h.current())),
    }
}

async fn describe_session(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    let h = st.session(&id)?;
    let s = h.current();
    st.caller(&headers, &s)?;
    ok(StatusCode::OK, descriptor(&s))
}

async fn export_session(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    st.require_facilitator(&headers)?;
    let s = st.session(&id)?.current();
    // the session document carries its own schema_version
    Ok((StatusCode::OK, Json(serde_json::to_value(&*s).expect("session serializes"))))
}

async fn register_expert(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Reply {
    st.require_facilitator(&headers)?;
    let h = st.session(&id)?;
    let profile: ExpertProfile = parse_body(&body)?;
    if profile.expert_id.is_empty() {
        return Err(ApiError::unprocessable("invalid_body", "expert_id must not be empty", Value::Null));
    }
    let expert_id = profile.expert_id.clone();
    // a retry with the identical profile is answered without a new event
    let existing = h.current().expert(&expert_id).map(|e| e.profile.clone());
    let status = match existing {
        Some(p) if p == profile => StatusCode::OK,
        Some(_) => return Err(SessionError::DuplicateExpert(expert_id).into()),
        None => {
            let result = h
                .commit(|s| match s.expert(&profile.expert_id) {
                    Some(e) if e.profile == profile => Err(SessionError::DuplicateExpert(profile.expert_id.clone())),
                    _ => Ok(Event::ExpertRegistered { profile: profile.clone() }),
                })
                .await;
            match result {
                Ok(_) => StatusCode::CREATED,
                // lost a race against an identical retry
                Err(StoreError::Session(SessionError::DuplicateExpert(_)))
                    if h.current().expert(&expert_id).is_some_and(|e| e.profile == profile) =>
                {
                    StatusCode::OK
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    ok(
        status,
        json!({ "session_id": id, "expert_id": expert_id, "token": expert_token(&st.secret, &id, &expert_id) }),
    )
}

fn parse_round(raw: &Value) -> Result<Round, ApiError> {
    serde_json::from_value(raw.clone())
        .map_err(|_| ApiError::unprocessable("invalid_round", format!("round must be 1 or 2, got {raw}"), Value::Null))
}

fn parse_arm(raw: &str) -> Result<Arm, ApiError> {
    raw.parse::<Arm>()
        .map_err(|_| ApiError::unprocessable("invalid_arm", format!("unknown arm '{raw}'"), json!({ "allowed": Arm::ALL })))
}

fn triplet(lower: f64, mode: f64, upper: f64) -> Result<ElicitedTriplet, ApiError> {
    ElicitedTriplet::new(lower, mode, upper).map_err(|e| SessionError::InvalidTriplet(e).into())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmissionRequest {
    round: Value,
    arm: String,
    lower: f64,
    mode: f64,
    upper: f64,
}

async fn submit(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Reply {
    let h = st.session(&id)?;
    let expert_id = match st.caller(&headers, &h.current())? {
        Caller::Expert(e) => e,
        Caller::Facilitator => return Err(ApiError::Unauthorized),
    };
    let req: SubmissionRequest = parse_body(&body)?;
    let (round, arm) = (parse_round(&req.round)?, parse_arm(&req.arm)?);
    let t = triplet(req.lower, req.mode, req.upper)?;
    let s = h
        .commit(|_| Ok(Event::Submitted { expert_id: expert_id.clone(), round, arm, triplet: t, submitted_at: Utc::now() }))
        .await?;
    let stored = s
        .submissions()
        .iter()
        .find(|x| x.expert_id == expert_id && x.round == round && x.arm == arm)
        .expect("committed submission is present");
    ok(StatusCode::OK, json!({ "session_id": id, "submission": stored }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceRequest {
    expected_state: SessionState,
}

async fn advance(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Reply {
    st.require_facilitator(&headers)?;
    let h = st.session(&id)?;
    let req: AdvanceRequest = parse_body(&body)?;
    let s = h
        .commit(|s| {
            if s.state() != req.expected_state {
                return Err(SessionError::StateMismatch { expected: req.expected_state, actual: s.state() });
            }
            let to = s.state().next().ok_or(SessionError::AlreadyClosed)?;
            Ok(Event::Advanced { from: s.state(), to, alias_seed: rand::random() })
        })
        .await?;
    ok(StatusCode::OK, json!({ "session_id": id, "previous_state": req.expected_state, "state": s.state() }))
}

async fn boxplots(
    State(st): State<AppState>,
    headers: HeaderMap,
    Path((id, round)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> Reply {
    let h = st.session(&id)?;
    let s = h.current();
    st.caller(&headers, &s)?;
    let round = parse_round(&round.parse::<u8>().map(Value::from).unwrap_or(Value::String(round)))?;
    let arm = parse_arm(q.get("arm").map(String::as_str).unwrap_or_default())?;
    let boxes = s.boxplots(round, arm)?;
    ok(StatusCode::OK, json!({ "session_id": id, "round": round, "arm": arm, "boxplots": boxes }))
}

#[derive(Serialize)]
struct Residuals {
    lower: f64,
    upper: f64,
}

fn query_f64(q: &HashMap<String, String>, key: &'static str) -> Result<Option<f64>, ApiError> {
    q.get(key)
        .map(|v| v.trim().parse::<f64>())
        .transpose()
        .map_err(|_| ApiError::unprocessable("invalid_query", format!("'{key}' must be a number"), Value::Null))
}

/// Stateless fit for the live plot.
async fn preview(Query(q): Query<HashMap<String, String>>) -> Reply {
    let need = |k: &'static str| {
        query_f64(&q, k)?.ok_or_else(|| ApiError::unprocessable("invalid_query", format!("missing '{k}'"), Value::Null))
    };
    let t = triplet(need("lower")?, need("mode")?, need("upper")?)?;
    let ci = match query_f64(&q, "ci")? {
        Some(level) => CiLevel::new(level)
            .map_err(|e| ApiError::unprocessable("invalid_query", e.to_string(), Value::Null))?,
        None => CiLevel::default(),
    };
    let points = match q.get("points") {
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| (2..=MAX_PREVIEW_POINTS).contains(n))
            .ok_or_else(|| {
                ApiError::unprocessable("invalid_query", format!("'points' must be in 2..={MAX_PREVIEW_POINTS}"), Value::Null)
            })?,
        None => DEFAULT_PREVIEW_POINTS,
    };
    let fit = fit_beta_from_triplet(&t, ci).map_err(SessionError::InvalidTriplet)?;
    let grid = fit.params.density_grid(points).map_err(SessionError::InvalidTriplet)?;
    ok(
        StatusCode::OK,
        json!({
            "beta_params": fit.params,
            "summary": fit.params.summary(),
            "residuals": Residuals { lower: fit.residual_lower, upper: fit.residual_upper },
            "density_grid": grid,
        }),
    )
}
