use axum::extract::multipart::MultipartError;
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use elicit_core::export::ReportError;
use elicit_core::ingest::{IngestError, StatsError};
use elicit_core::interview::InterviewError;
use elicit_core::questions::EngineError;
use elicit_core::store::StoreError;
use serde::Serialize;

/// Error body: `{error, code, message, retryable}`.
///
/// `error` is the core error name; `code` is the same name in snake_case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
    pub retryable: bool,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    code: String,
    message: &'a str,
    retryable: bool,
}

impl ApiError {
    pub fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
            retryable: false,
        }
    }

    pub fn bad_request(error: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, message)
    }

    pub fn busy() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "SessionBusy",
            "another change to this session is in progress",
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    fn upstream(error: &'static str, message: impl Into<String>) -> Self {
        Self {
            retryable: true,
            ..Self::new(StatusCode::BAD_GATEWAY, error, message)
        }
    }
}

pub fn snake_case(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.error,
            code: snake_case(self.error),
            message: &self.message,
            retryable: self.retryable,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownSession(_) | StoreError::InvalidSessionId(_) => StatusCode::NOT_FOUND,
            StoreError::SequenceConflict { .. } | StoreError::SessionExists(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let name = match e {
            StoreError::InvalidSessionId(_) => "UnknownSession",
            _ => e.name(),
        };
        ApiError::new(status, name, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::Provider(_) | EngineError::MalformedProviderOutput(_) => {
                return ApiError::upstream(e.name(), e.to_string());
            }
            EngineError::UnknownQuestion(_) | EngineError::NotDisplayed(_) => StatusCode::NOT_FOUND,
            EngineError::RefillNotEnabled(_) => StatusCode::CONFLICT,
            EngineError::Prompt(_) => StatusCode::BAD_REQUEST,
            EngineError::EmptyBank => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.name(), e.to_string())
    }
}

impl From<InterviewError> for ApiError {
    fn from(e: InterviewError) -> Self {
        match e {
            InterviewError::Engine(e) => e.into(),
            InterviewError::Store(e) => e.into(),
            InterviewError::Report(ReportError::NoAnnotations) => ApiError::bad_request("NoAnnotations", e.to_string()),
            _ => ApiError::bad_request(e.name(), e.to_string()),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        ApiError::bad_request(e.name(), e.to_string())
    }
}

impl From<StatsError> for ApiError {
    fn from(e: StatsError) -> Self {
        ApiError::bad_request(e.name(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request("InvalidRequest", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request("InvalidRequest", e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::bad_request("InvalidRequest", e.body_text())
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        ApiError::new(e.status(), "InvalidUpload", e.body_text())
    }
}
