use std::path::PathBuf;
use std::process::ExitCode;

use blockiot_gateway::daemon;
use clap::Parser;

/// Ingest gateway: HTTP, MQTT and CoAP listeners plus the FHIR read API.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Allow plaintext listeners on non-loopback addresses.
    #[arg(long)]
    insecure_test_mode: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    daemon::init_tracing();
    let code = match daemon::load_config(Some(&args.config), args.insecure_test_mode) {
        Ok(cfg) => daemon::serve(cfg),
        Err(code) => code,
    };
    ExitCode::from(code as u8)
}
