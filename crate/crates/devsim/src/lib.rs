//! Scenario-driven device simulator: synthesizes or replays device payloads
//! for any shipped template and sends them to a gateway over HTTP, MQTT or CoAP.

pub mod coverage;
pub mod generate;
pub mod run;
pub mod scenario;

pub use coverage::Coverage;
pub use generate::{generate_values, GeneratorSpec, Shape};
pub use run::{run_scenario, Endpoints, RunOptions, RunReport};
pub use scenario::{LoadedScenario, Scenario};
