use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pal_core::labeling::LabelError;
use pal_core::manifest::SchemaError;
use pal_core::pipeline::PipelineError;
use pal_core::store::StoreError;
use serde_json::json;

use crate::SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    /// Ingest stopped at `line`; earlier lines were applied.
    #[error("line {line}: {source}")]
    Ingest { line: usize, applied: usize, source: PipelineError },
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Body { status: StatusCode, message: String },
}

fn pipeline_status(e: &PipelineError) -> (StatusCode, &'static str) {
    use PipelineError as P;
    match e {
        P::Label(LabelError::UnknownRequest(_)) | P::NoRequestForFrame(_) => (StatusCode::NOT_FOUND, "unknown_request"),
        P::Label(LabelError::NotPending(_)) => (StatusCode::CONFLICT, "not_pending"),
        P::Label(LabelError::EmptyLabel) | P::EmptyLabel => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label"),
        P::SessionAlreadyActive | P::NoActiveSession => (StatusCode::CONFLICT, "session_conflict"),
        P::NonMonotonicTimestamp { .. } | P::DuplicateFrameId(_) | P::MissingMember(_) => (StatusCode::CONFLICT, "stream_conflict"),
        P::Rule(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_rules"),
        P::EmptySession(_) | P::InvalidSessionEnd { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_session"),
        P::Embedding(_) | P::Imprint(_) | P::Face(_) | P::Detection(_) | P::Geo(_) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input")
        }
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        self.parts().0
    }

    fn parts(&self) -> (StatusCode, &'static str) {
        match self {
            ApiError::Pipeline(e) | ApiError::Ingest { source: e, .. } => pipeline_status(e),
            ApiError::Schema(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_manifest"),
            ApiError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store_failure"),
            ApiError::InvalidInput(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input"),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Body { status, .. } => (*status, "invalid_body"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.parts();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let mut error = json!({ "code": code, "message": self.to_string() });
        if let ApiError::Ingest { line, applied, .. } = &self {
            error["line"] = json!(line);
            error["applied"] = json!(applied);
        }
        (status, Json(json!({ "schema_version": SCHEMA_VERSION, "error": error }))).into_response()
    }
}
