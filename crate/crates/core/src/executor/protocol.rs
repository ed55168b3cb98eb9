//! Newline-delimited JSON frames exchanged with external workers.
//!
//! ```text
//! → {"type":"hello","version":1,"spec_digest":"<hex>"}
//! ← {"type":"hello_ok","time_mode":"wall"|"simulated"}
//! → {"type":"run_step","req_id":1,"step":1,"algorithm":"pca","hyperparams":{},"input_handle":"input","is_last":false}
//! ← {"type":"step_ok","req_id":1,"output_handle":"h1","seconds":0.2,"metric":null}
//! ← {"type":"step_err","req_id":1,"message":"..."}
//! → {"type":"shutdown"}
//! ```
//!
//! Unknown fields are ignored on decode.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TimeMode;
use crate::graph::PipelineSpec;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Hello {
        version: u32,
        spec_digest: String,
    },
    RunStep {
        req_id: u64,
        step: usize,
        algorithm: String,
        hyperparams: Map<String, Value>,
        input_handle: String,
        is_last: bool,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    HelloOk {
        time_mode: TimeMode,
    },
    StepOk {
        req_id: u64,
        output_handle: String,
        seconds: f64,
        #[serde(default)]
        metric: Option<f64>,
    },
    StepErr {
        req_id: u64,
        message: String,
    },
}

impl Response {
    pub fn req_id(&self) -> Option<u64> {
        match self {
            Response::HelloOk { .. } => None,
            Response::StepOk { req_id, .. } | Response::StepErr { req_id, .. } => Some(*req_id),
        }
    }
}

/// One frame as a single line, newline included.
pub fn encode<T: Serialize>(frame: &T) -> String {
    // Frames hold only strings, numbers and maps with string keys.
    let mut line = serde_json::to_string(frame).expect("frame serialization cannot fail");
    line.push('\n');
    line
}

pub fn decode_request(line: &str) -> Result<Request, ProtocolError> {
    serde_json::from_str(line.trim_end()).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

/// Parses and sanity-checks a worker response.
pub fn decode_response(line: &str) -> Result<Response, ProtocolError> {
    let resp: Response = serde_json::from_str(line.trim_end()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if let Response::StepOk { seconds, metric, output_handle, .. } = &resp {
        if !(seconds.is_finite() && *seconds >= 0.0) {
            return Err(ProtocolError::InvalidField(format!("seconds = {seconds}")));
        }
        if let Some(m) = metric {
            if !m.is_finite() {
                return Err(ProtocolError::InvalidField(format!("metric = {m}")));
            }
        }
        if output_handle.is_empty() {
            return Err(ProtocolError::InvalidField("empty output_handle".into()));
        }
    }
    Ok(resp)
}

/// Hex SHA-256 of the spec's canonical JSON.
pub fn spec_digest(spec: &PipelineSpec) -> String {
    let digest = Sha256::digest(spec.to_json_value().to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
