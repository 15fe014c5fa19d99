use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use elicit_core::elicitation::{SessionError, SCHEMA_VERSION};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or invalid token")]
    Unauthorized,
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String, details: Value },
    #[error("{message}")]
    Unprocessable { code: &'static str, message: String, details: Value },
    #[error("storage failure: {0}")]
    Storage(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    schema_version: u32,
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Value::is_null")]
    details: &'a Value,
}

impl ApiError {
    pub fn unprocessable(code: &'static str, message: impl Into<String>, details: Value) -> Self {
        Self::Unprocessable { code, message: message.into(), details }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::Unauthorized => StatusCode::UNAUTHORIZED,
            Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            Self::Unauthorized => "unauthorized",
            Self::UnknownSession(_) => "unknown_session",
            Self::Conflict { code, .. } | Self::Unprocessable { code, .. } => code,
            Self::Storage(_) => "storage",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let null = Value::Null;
        let details = match &self {
            Self::Conflict { details, .. } | Self::Unprocessable { details, .. } => details,
            _ => &null,
        };
        let body = ErrorBody { schema_version: SCHEMA_VERSION, error: self.code(), message: self.to_string(), details };
        (self.status(), Json(serde_json::to_value(body).unwrap_or_default())).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use serde_json::json;
        let message = e.to_string();
        match e {
            SessionError::UnknownSession(id) => Self::UnknownSession(id),
            SessionError::InvalidTriplet(inner) => Self::unprocessable(
                "invalid_triplet",
                message,
                json!({ "invariant": "0 <= lower < mode < upper <= 1 and a beta fit exists", "cause": inner.to_string() }),
            ),
            SessionError::UnknownExpert(id) => Self::unprocessable("unknown_expert", message, json!({ "expert_id": id })),
            SessionError::Schema(_) => Self::unprocessable("schema", message, Value::Null),
            SessionError::StateMismatch { expected, actual } => Self::Conflict {
                code: "state_mismatch",
                message,
                details: json!({ "expected_state": expected, "actual_state": actual }),
            },
            SessionError::WrongRoundState { round, state } => Self::Conflict {
                code: "wrong_round_state",
                message,
                details: json!({ "round": round, "state": state }),
            },
            SessionError::BoxplotsUnavailable { round, state } => Self::Conflict {
                code: "boxplots_unavailable",
                message,
                details: json!({ "round": round, "state": state }),
            },
            SessionError::NoSubmissions { round, arm } => Self::Conflict {
                code: "no_submissions",
                message,
                details: json!({ "round": round, "arm": arm }),
            },
            SessionError::IdExists(_) => Self::Conflict { code: "session_exists", message, details: Value::Null },
            SessionError::DuplicateExpert(_) => Self::Conflict { code: "duplicate_expert", message, details: Value::Null },
            SessionError::SessionClosed | SessionError::AlreadyClosed => {
                Self::Conflict { code: "session_closed", message, details: Value::Null }
            }
            SessionError::RegistrationClosed(state) => Self::Conflict {
                code: "registration_closed",
                message,
                details: json!({ "state": state }),
            },
            SessionError::MissingSubmission { .. } => Self::Conflict { code: "missing_submission", message, details: Value::Null },
        }
    }
}
