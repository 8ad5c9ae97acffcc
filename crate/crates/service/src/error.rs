use ardie_core::episode::EpisodeError;
use ardie_core::model::ModelError;
use ardie_core::pomdp::{PomdpError, Violation};
use ardie_core::scene::{SceneError, StabilityReport};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Error document returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    /// Step index of the logged error event, when the session recorded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<StabilityReport>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
                step: None,
                violations: Vec::new(),
                report: None,
            },
        }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn at_step(mut self, step: u64) -> Self {
        self.body.step = Some(step);
        self
    }
}

fn invalid(error: &str, message: String) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, error, message)
}

fn violations_of(e: &PomdpError) -> Vec<Violation> {
    match e {
        PomdpError::InvalidModel(v) => v.clone(),
        _ => Vec::new(),
    }
}

impl From<EpisodeError> for ApiError {
    fn from(e: EpisodeError) -> Self {
        let message = e.to_string();
        match e {
            EpisodeError::Phase { .. } => ApiError::new(StatusCode::CONFLICT, "wrong_phase", message),
            EpisodeError::Observation { .. } => invalid("impossible_observation", message),
            EpisodeError::Model(ModelError::DegenerateTask(_)) => invalid("degenerate_task", message),
            EpisodeError::Model(ModelError::Pomdp(p)) | EpisodeError::Pomdp(p) => {
                let mut err = invalid("invalid_model", message);
                err.body.violations = violations_of(&p);
                err
            }
            EpisodeError::Scene(SceneError::StabilityRefused { report, .. }) => {
                let mut err = invalid("stability_refused", message);
                err.body.report = Some(report);
                err
            }
            EpisodeError::MissingPolicy(_) => ApiError::internal(message),
            _ => invalid("invalid_config", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
