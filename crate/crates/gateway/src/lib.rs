//! Network front end of a blockiot node: HTTP, MQTT and CoAP ingest, the FHIR
//! read API, operator endpoints, and device-side clients for all three transports.

pub mod client;
pub mod coap;
pub mod daemon;
mod http;
mod intake;
pub mod mqtt;
pub mod reply;
mod server;
mod webhook;

pub use intake::parse_payloads;
pub use reply::{status_code, ErrorBody, Reply};
pub use server::GatewayHandle;
