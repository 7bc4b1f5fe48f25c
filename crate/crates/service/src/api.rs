//! Request and response documents.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use genhai::data::artifact::{ModelArtifact, Provenance, MODEL_FORMAT};
use genhai::patient_model::SubProgramId;
use genhai::queries::{QueryError, QueryResult, QuerySpec, SweepAxis, SweepPoint};
use genhai::subprograms::Family;

/// Identifies the model that answered a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub format: String,
    pub version: u32,
    pub provenance_hash: String,
}

impl ModelRef {
    pub fn of(artifact: &ModelArtifact) -> Self {
        Self {
            format: artifact.format.clone(),
            version: artifact.version,
            provenance_hash: artifact.provenance_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiQueryResponse {
    #[serde(flatten)]
    pub result: QueryResult,
    pub seed: u64,
    /// True when the request carried no seed and the server chose one.
    pub seed_assigned: bool,
    /// The request after defaults and the seed were filled in.
    pub inputs: QuerySpec,
    pub model: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSweepResponse {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub seed: u64,
    pub seed_assigned: bool,
    pub inputs: QuerySpec,
    pub model: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubProgramInfo {
    pub name: SubProgramId,
    pub family: Family,
    pub input_dim: usize,
    pub conditioning: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format: String,
    pub version: u32,
    pub provenance_hash: String,
    pub provenance: Provenance,
    pub subprograms: Vec<SubProgramInfo>,
}

impl ModelInfo {
    pub fn of(artifact: &ModelArtifact) -> Self {
        debug_assert_eq!(artifact.format, MODEL_FORMAT);
        Self {
            format: artifact.format.clone(),
            version: artifact.version,
            provenance_hash: artifact.provenance_hash.clone(),
            provenance: artifact.provenance.clone(),
            subprograms: artifact
                .subprograms
                .iter()
                .map(|s| SubProgramInfo {
                    name: s.name,
                    family: s.family,
                    input_dim: s.input_dim,
                    conditioning: s.conditioning.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: HealthStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidField,
    KindMismatch,
    MalformedRequest,
    ModelNotLoaded,
    InsufficientAcceptance,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

/// An error response with its status code.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: ErrorCode, field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error,
                field,
                message: message.into(),
            },
        }
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidField, Some(field.into()), message)
    }

    pub fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::ModelNotLoaded, None, "no model artifact is loaded")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, None, message)
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let message = e.to_string();
        match e {
            QueryError::Field { field, .. } => Self::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidField, Some(field), message),
            QueryError::KindMismatch { field, .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::KindMismatch, Some(field), message)
            }
            QueryError::InsufficientAcceptance { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::InsufficientAcceptance, None, message)
            }
            QueryError::Sim(_) | QueryError::Pool(_) => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Parse a JSON body into `T`, naming the offending field on failure.
pub fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::MalformedRequest, None, inner.to_string())
        } else {
            let field = if path == "." { field_in_message(&inner.to_string()) } else { Some(path) };
            ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidField, field, inner.to_string())
        }
    })
}


/// serde reports unknown and missing fields at the parent path; pull the
/// name out of the message.
pub(crate) fn field_in_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}
