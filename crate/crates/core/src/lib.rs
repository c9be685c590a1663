//! Core data model and processing for the blockiot pipeline: identity, units, device
//! templates, content-addressed storage, the proof-of-work ledger, contracts and FHIR.

pub mod canonical;
pub mod cas;
pub mod digest;
pub mod fhir;
pub mod identity;
pub mod ingest;
pub mod observation;
pub mod signing;
pub mod template;
pub mod time;
pub mod units;
pub mod batch;
pub mod contracts;
pub mod ledger;
pub mod principal;
pub mod runtime;
