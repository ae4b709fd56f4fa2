use serde::Serialize;
use serde_json::{json, Value};

use planecal::io::IoError;
use planecal::solver::SolverError;
use planecal::synth::SynthError;
use planecal::target::TargetError;

/// Machine-readable error shared by the CLI (on stderr) and the HTTP API.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct AppError {
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl AppError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn conflict(expected: u64, got: u64) -> Self {
        Self::new("conflict", "stale session revision")
            .with_details(json!({ "current_revision": expected, "request_revision": got }))
    }

    pub fn is_usage(&self) -> bool {
        self.code == "usage"
    }

    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error payload serializes")
    }
}

impl From<IoError> for AppError {
    fn from(e: IoError) -> Self {
        let message = e.to_string();
        match e {
            IoError::Io { path, .. } => Self::new("io", message).with_details(json!({ "path": path })),
            IoError::Parse { path, line, .. } => {
                Self::new("parse", message).with_details(json!({ "path": path, "line": line }))
            }
            IoError::Schema { path, field, .. } => {
                Self::new("schema", message).with_details(json!({ "path": path, "field": field }))
            }
            IoError::Format { path, expected, found } => Self::new("format", message)
                .with_details(json!({ "path": path, "expected": expected, "found": found })),
            IoError::EmptyCloud { path } => Self::new("empty_cloud", message).with_details(json!({ "path": path })),
            IoError::MissingRing { path } => Self::new("missing_ring", message).with_details(json!({ "path": path })),
            IoError::Target { path, source } => {
                // a corner file that does not match its board is a schema problem of that file
                let code = match source {
                    TargetError::CornerCount { .. } => "schema",
                    _ => AppError::from(source.clone()).code,
                };
                let inner = AppError::from(source);
                Self::new(code, message).with_details(json!({ "path": path, "field": "corners", "cause": inner.details }))
            }
            IoError::Invalid { path, .. } => Self::new("invalid_data", message).with_details(json!({ "path": path })),
        }
    }
}

impl From<SolverError> for AppError {
    fn from(e: SolverError) -> Self {
        let message = e.to_string();
        match e {
            SolverError::InsufficientMeasurements { got } => {
                Self::new("insufficient_measurements", message).with_details(json!({ "got": got, "required": 3 }))
            }
            SolverError::InvalidConfig(_) => Self::new("invalid_config", message),
            SolverError::SingularNormalMatrix { ratio, report } => Self::new("singular_normal_matrix", message)
                .with_details(json!({ "ratio": ratio, "hessian_spectrum": report.hessian_spectrum })),
        }
    }
}

impl From<TargetError> for AppError {
    fn from(e: TargetError) -> Self {
        let message = e.to_string();
        let details = match &e {
            TargetError::CornerCount { expected, got } => json!({ "expected": expected, "got": got }),
            TargetError::InsufficientPoints { got } => json!({ "got": got }),
            TargetError::NoConsensus { best_ratio, required } => {
                json!({ "best_ratio": best_ratio, "required": required })
            }
            _ => Value::Null,
        };
        let code = match e {
            TargetError::InvalidBoard(_) | TargetError::CornerCount { .. } => "invalid_board",
            TargetError::InvalidSelection(_) => "invalid_selection",
            TargetError::InvalidConfig(_) => "invalid_config",
            TargetError::EmptyPatch
            | TargetError::InsufficientPoints { .. }
            | TargetError::NoConsensus { .. }
            | TargetError::HomographyDegenerate
            | TargetError::Divergence(_)
            | TargetError::Projection(_) => "fit_failure",
        };
        Self::new(code, message).with_details(details)
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Solver(e) => e.into(),
            SynthError::Target(e) => e.into(),
            SynthError::InvalidConfig(m) => Self::new("invalid_config", m),
            e => Self::new("synthesis", e.to_string()),
        }
    }
}
