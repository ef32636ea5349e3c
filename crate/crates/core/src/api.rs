//! Wire types of the intervention service, shared by server and client.
//!
//! Images and segmentation layers travel as raw row-major `f64` arrays of
//! `height * width` values in [0, 1]. Thumbnails are base64 encoded bytes, one
//! grayscale byte per pixel, row-major.

use serde::{Deserialize, Serialize};

use crate::intervention::{AuditEntry, Payload};
use crate::synth::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: usize,
    pub anatomy: String,
    pub label: String,
    pub split: Split,
    /// Path of the sample's thumbnail resource.
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thumbnail {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    /// Base64 of `height * width` grayscale bytes.
    pub data: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSession {
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub payload: Payload,
    pub audit: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub variant: String,
    pub samples: usize,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Machine-readable code, for example `unknown_session` or `out_of_range`.
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: ErrorDetail {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}
