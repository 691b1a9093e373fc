// SPDX-License-Identifier: Apache-2.0
//! Error type shared by every module of the crate.

use thiserror::Error;

/// Everything that can go wrong while building or checking an object.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QcError {
    #[error("label `{0}` appears on both operands")]
    LabelCollision(String),
    #[error("Kraus set is empty")]
    EmptyKrausSet,
    #[error("label `{0}` appears in more than two operands of a link chain")]
    LinkAssociativityViolation(String),
    #[error("label `{0}` not found")]
    LabelNotFound(String),
    #[error("{messages} messages exceed the truncation {truncation}")]
    TruncationOverflow { messages: usize, truncation: usize },
    #[error("cannot embed: {0}")]
    EmbeddingMismatch(String),
    #[error("wires `{0}` and `{1}` carry different timestamp sets")]
    WireMergeMismatch(String, String),
    #[error("incomplete QC-QC: {0}")]
    IncompleteQcQc(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid slice {index}: {reason}")]
    InvalidSlice { index: usize, reason: String },
    #[error("loop from `{out_label}` to `{in_label}` does not move forward in time")]
    AcausalLoop { out_label: String, in_label: String },
    #[error("Kraus set is not complete, deviation {0:e}")]
    IncompleteKraus(f64),
    #[error("extension policy is not isometric, deviation {0:e}")]
    InvalidPolicy(f64),
    #[error("invalid encoder weights: {0}")]
    InvalidLambda(String),
    #[error("decoder is singular: {0}")]
    DecoderSingular(String),
}

pub type Result<T> = std::result::Result<T, QcError>;
