use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;

use blockiot_devsim::{run_scenario, Endpoints, RunOptions, Scenario};
use clap::{Parser, Subcommand};

/// Device simulator for a blockiot gateway.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Send a scenario and print the run report as JSON.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Gateway HTTP address, `host:port`.
        #[arg(long)]
        gateway: String,
        /// MQTT address; defaults to the gateway host on port 1883.
        #[arg(long)]
        mqtt: Option<String>,
        /// CoAP address; defaults to the gateway host on port 5683.
        #[arg(long)]
        coap: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplier on the scenario's time compression.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Admin token; when given, the run ends by sealing, publishing summaries and collecting alerts.
        #[arg(long)]
        admin_token: Option<String>,
        #[arg(long, default_value = "templates")]
        templates: PathBuf,
    },
    /// Print the payloads a scenario would send, one JSON line each, without sending.
    Expand {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "templates")]
        templates: PathBuf,
    },
}

fn resolve(addr: &str) -> Result<SocketAddr, String> {
    addr.to_socket_addrs()
        .map_err(|e| format!("{addr}: {e}"))?
        .next()
        .ok_or_else(|| format!("{addr}: no address"))
}

fn with_port(gateway: &str, port: u16) -> String {
    let host = gateway.rsplit_once(':').map_or(gateway, |(h, _)| h);
    format!("{host}:{port}")
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> Result<ExitCode, String> {
    match Cli::parse().cmd {
        Cmd::Expand { scenario, seed, templates } => {
            let ls = Scenario::load(&scenario).and_then(|s| s.resolve(&templates)).map_err(|e| e.to_string())?;
            for s in ls.expand(seed.unwrap_or(ls.scenario.seed)) {
                println!("{}", serde_json::to_string(&s).expect("json"));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { scenario, gateway, mqtt, coap, seed, speed, admin_token, templates } => {
            if !(speed > 0.0) {
                return Err("--speed must be positive".into());
            }
            let ls = Scenario::load(&scenario).and_then(|s| s.resolve(&templates)).map_err(|e| e.to_string())?;
            let gateway = gateway.trim_start_matches("http://").trim_end_matches('/').to_string();
            let ep = Endpoints {
                http: Some(format!("http://{gateway}")),
                mqtt: Some(resolve(&mqtt.unwrap_or_else(|| with_port(&gateway, 1883)))?),
                coap: Some(resolve(&coap.unwrap_or_else(|| with_port(&gateway, 5683)))?),
                admin_token,
            };
            let opts = RunOptions { seed, speed, ..RunOptions::default() };
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
            let report = rt.block_on(run_scenario(&ls, &ep, &opts)).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("json"));
            Ok(if report.delivery_failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
    }
}
