//! CoAP over UDP. Devices POST to `/obs/{patient}/{device}?psk=<identity>`.

mod server;

pub(crate) use server::serve;

use blockiot_core::ingest::IngestError;
use coap_lite::{CoapOption, MessageClass, Packet, ResponseType};

/// Largest response carried in the ACK; anything bigger goes out as a separate response.
pub const PIGGYBACK_LIMIT: usize = 1024;
pub const ACK_TIMEOUT_MS: u64 = 2_000;
pub const MAX_RETRANSMIT: u32 = 4;
/// Duplicate-detection lifetime for (peer, message id) pairs.
pub const EXCHANGE_LIFETIME_MS: u64 = 247_000;

pub fn obs_path(patient_id: &str, device_id: &str) -> [String; 3] {
    ["obs".into(), patient_id.into(), device_id.into()]
}

pub fn uri_path(p: &Packet) -> Vec<String> {
    p.get_option(CoapOption::UriPath)
        .map(|l| l.iter().map(|s| String::from_utf8_lossy(s).into_owned()).collect())
        .unwrap_or_default()
}

pub fn query_param(p: &Packet, name: &str) -> Option<String> {
    p.get_option(CoapOption::UriQuery)?.iter().find_map(|q| {
        let q = std::str::from_utf8(q).ok()?;
        let (k, v) = q.split_once('=')?;
        (k == name).then(|| v.to_string())
    })
}

pub fn response_type(status: u16) -> ResponseType {
    match status {
        200 | 201 => ResponseType::Created,
        400 => ResponseType::BadRequest,
        401 => ResponseType::Unauthorized,
        403 => ResponseType::Forbidden,
        404 => ResponseType::NotFound,
        405 => ResponseType::MethodNotAllowed,
        413 => ResponseType::RequestEntityTooLarge,
        415 => ResponseType::UnsupportedContentFormat,
        503 => ResponseType::ServiceUnavailable,
        _ => ResponseType::InternalServerError,
    }
}

/// Inverse of [`response_type`] for the codes the gateway emits.
pub fn status_of(code: MessageClass) -> u16 {
    match code {
        MessageClass::Response(r) => match r {
            ResponseType::Created | ResponseType::Changed | ResponseType::Content => 201,
            ResponseType::BadRequest => 400,
            ResponseType::Unauthorized => 401,
            ResponseType::Forbidden => 403,
            ResponseType::NotFound => 404,
            ResponseType::MethodNotAllowed => 405,
            ResponseType::RequestEntityTooLarge => 413,
            ResponseType::UnsupportedContentFormat => 415,
            ResponseType::ServiceUnavailable => 503,
            _ => 500,
        },
        _ => 500,
    }
}

pub(crate) fn route_error(msg: impl Into<String>) -> IngestError {
    IngestError::Malformed(msg.into())
}
