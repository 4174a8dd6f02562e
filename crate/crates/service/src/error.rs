use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Error body: `{code, message, field?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

pub mod codes {
    pub const VALIDATION: &str = "validation_error";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const SESSION_NOT_FOUND: &str = "session_not_found";
    pub const UNKNOWN_QUERY: &str = "unknown_query";
    pub const DUPLICATE_SUBMISSION: &str = "duplicate_submission";
    pub const INVALID_PERMUTATION: &str = "invalid_permutation";
    pub const EMPTY_DATASET: &str = "empty_dataset";
    pub const TRAINING_IN_PROGRESS: &str = "training_in_progress";
    pub const NO_MODEL: &str = "no_model";
    pub const INTERNAL: &str = "internal_error";
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    pub fn with_field(mut self, field: &str) -> Self {
        self.body.field = Some(field.into());
        self
    }

    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, codes::VALIDATION, message).with_field(field)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, codes::BAD_REQUEST, message)
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, codes::SESSION_NOT_FOUND, format!("no session {id}"))
    }

    pub fn no_model() -> Self {
        Self::new(StatusCode::CONFLICT, codes::NO_MODEL, "session has no trained model")
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(e)
    }
}
