//! Live-mode engine: perception, memory and reasoning behind one ordered
//! stream per incident.
//!
//! Every input is journaled before it is applied. A restart re-applies the
//! journal; records already on the persisted stream are re-derived rather
//! than appended again, and persisted decisions are adopted instead of
//! being recomputed, so the stream after recovery is the stream before it.

mod engine;
pub mod http;
mod stream;

pub use engine::*;
pub use stream::{Offer, StreamKind, StreamLog, StreamRecord};

use crate::memory::MemoryError;
use crate::perception::PerceptionError;
use crate::reasoning::ReasoningError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown incident `{0}`")]
    UnknownIncident(String),

    #[error("incident `{0}` is closed")]
    IncidentClosed(String),

    #[error("incident `{0}` already exists")]
    AlreadyExists(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("malformed signal: {0}")]
    MalformedSignal(#[source] PerceptionError),

    #[error(transparent)]
    Reasoning(ReasoningError),

    #[error(transparent)]
    Memory(MemoryError),

    #[error("storage: {0}")]
    Io(#[from] std::io::Error),

    #[error("storage: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<PerceptionError> for ServiceError {
    fn from(e: PerceptionError) -> Self {
        ServiceError::MalformedSignal(e)
    }
}

impl From<MemoryError> for ServiceError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::IncidentClosed(id) => ServiceError::IncidentClosed(id),
            MemoryError::UnknownIncident(id) => ServiceError::UnknownIncident(id),
            other => ServiceError::Memory(other),
        }
    }
}

impl From<ReasoningError> for ServiceError {
    fn from(e: ReasoningError) -> Self {
        match e {
            ReasoningError::Memory(m) => m.into(),
            ReasoningError::UnknownIncident(id) => ServiceError::UnknownIncident(id),
            other => ServiceError::Reasoning(other),
        }
    }
}

impl ServiceError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownIncident(_) => "unknown_incident",
            ServiceError::IncidentClosed(_) => "incident_closed",
            ServiceError::AlreadyExists(_) => "already_exists",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::MalformedSignal(PerceptionError::TemporalViolation(_)) => {
                "temporal_violation"
            }
            ServiceError::MalformedSignal(PerceptionError::UnknownModality(_)) => {
                "unknown_modality"
            }
            ServiceError::MalformedSignal(PerceptionError::UntrustedSource(_)) => {
                "untrusted_source"
            }
            ServiceError::MalformedSignal(PerceptionError::Gateway(_)) => "gateway_error",
            ServiceError::MalformedSignal(_) => "malformed_signal",
            ServiceError::Reasoning(ReasoningError::UnknownRecommendation(_)) => {
                "unknown_recommendation"
            }
            ServiceError::Reasoning(ReasoningError::NotOpen { .. }) => "recommendation_not_open",
            ServiceError::Reasoning(ReasoningError::InvalidFeedback(_)) => "invalid_feedback",
            ServiceError::Reasoning(ReasoningError::Gateway(_)) => "gateway_error",
            ServiceError::Reasoning(_) => "reasoning_error",
            ServiceError::Memory(MemoryError::NotFound(_)) => "not_found",
            ServiceError::Memory(
                MemoryError::OrphanSlot(_)
                | MemoryError::Invalid(_)
                | MemoryError::EmptyDocument(_)
                | MemoryError::DimMismatch { .. },
            ) => "invalid_request",
            ServiceError::Memory(MemoryError::Gateway(_)) => "gateway_error",
            ServiceError::Memory(_) => "memory_error",
            ServiceError::Io(_) | ServiceError::Json(_) => "storage_error",
        }
    }

    /// HTTP status for [`ServiceError::code`].
    pub fn status(&self) -> u16 {
        match self.code() {
            "unknown_incident" | "unknown_recommendation" | "not_found" => 404,
            "incident_closed" | "already_exists" | "recommendation_not_open" => 409,
            "gateway_error" => 502,
            "storage_error" | "memory_error" | "reasoning_error" => 500,
            _ => 422,
        }
    }
}
