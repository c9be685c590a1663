//! What a sender gets back on every transport: a receipt or an error body.

use blockiot_core::ingest::{IngestError, IngestReceipt};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// HTTP-style status class, also used on MQTT and CoAP.
    pub status: u16,
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Receipt(IngestReceipt),
    Error(ErrorBody),
}

impl Reply {
    pub fn receipt(&self) -> Option<&IngestReceipt> {
        match self {
            Reply::Receipt(r) => Some(r),
            Reply::Error(_) => None,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Reply::Error(e) if e.retryable)
    }
}

pub fn status_code(e: &IngestError) -> u16 {
    match e {
        IngestError::EmptyBatch | IngestError::Malformed(_) => 400,
        IngestError::Unauthenticated(_) => 401,
        IngestError::Forbidden(_) => 403,
        IngestError::TooLarge { .. } => 413,
        IngestError::Busy | IngestError::Storage(_) | IngestError::Ledger(_) => 503,
    }
}

pub fn error_body(e: &IngestError) -> ErrorBody {
    ErrorBody { error: e.to_string(), status: status_code(e), retryable: e.is_retryable() }
}

pub fn to_reply(r: Result<IngestReceipt, IngestError>) -> Reply {
    match r {
        Ok(receipt) => Reply::Receipt(receipt),
        Err(e) => Reply::Error(error_body(&e)),
    }
}
