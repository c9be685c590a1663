use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use blockiot_core::runtime::{Node, SystemClock};
use blockiot_gateway::daemon::{self, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_OK};
use clap::{Parser, Subcommand};

/// Operator CLI for a blockiot gateway.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gateway until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        insecure_test_mode: bool,
    },
    /// Status of the running gateway, or of the data directory when it is not running.
    Status {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn status(config: Option<PathBuf>) -> i32 {
    let cfg = match daemon::load_config(config.as_deref(), false) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Ok(Some(addr)) = cfg.http_addr() {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
        let live = rt.block_on(async {
            let client = reqwest::Client::builder().timeout(Duration::from_secs(3)).build().ok()?;
            let resp = client.get(format!("http://{addr}/status")).send().await.ok()?;
            resp.json::<serde_json::Value>().await.ok()
        });
        if let Some(v) = live {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            return EXIT_OK;
        }
    }
    match Node::open(cfg, Arc::new(SystemClock)) {
        Ok(node) => {
            let mut v = serde_json::to_value(node.status()).expect("status serializes");
            v["ready"] = false.into();
            v["running"] = false.into();
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == EXIT_INTEGRITY {
                EXIT_INTEGRITY
            } else {
                EXIT_CONFIG
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    daemon::init_tracing();
    let code = match cli.cmd {
        Cmd::Serve { config, insecure_test_mode } => match daemon::load_config(Some(&config), insecure_test_mode) {
            Ok(cfg) => daemon::serve(cfg),
            Err(code) => code,
        },
        Cmd::Status { config } => status(config),
    };
    ExitCode::from(code as u8)
}
