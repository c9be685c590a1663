//! Shared entry points for the `gatewayd` and `blockiot` binaries.

use std::path::Path;
use std::sync::Arc;

use blockiot_core::runtime::{GatewayConfig, Node, SystemClock};

use crate::GatewayHandle;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INTEGRITY: i32 = 2;

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn load_config(path: Option<&Path>, insecure: bool) -> Result<GatewayConfig, i32> {
    match GatewayConfig::from_process_env(path) {
        Ok(mut c) => {
            c.insecure_test_mode |= insecure;
            Ok(c)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Err(EXIT_CONFIG)
        }
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

/// Runs the gateway until SIGINT or SIGTERM and returns the process exit code.
pub fn serve(config: GatewayConfig) -> i32 {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    rt.block_on(async move {
        let node = match tokio::task::spawn_blocking(move || Node::open(config, Arc::new(SystemClock))).await {
            Ok(Ok(n)) => Arc::new(n),
            Ok(Err(e)) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
            Err(e) => {
                eprintln!("error: startup task failed: {e}");
                return EXIT_CONFIG;
            }
        };
        let handle = match GatewayHandle::start(node).await {
            Ok(h) => h,
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        };
        if let Some(a) = handle.http_addr() {
            eprintln!("http listening on {a}");
        }
        if let Some(a) = handle.mqtt_addr() {
            eprintln!("mqtt listening on {a}");
        }
        if let Some(a) = handle.coap_addr() {
            eprintln!("coap listening on {a}");
        }
        shutdown_signal().await;
        eprintln!("draining");
        match handle.drain_and_stop().await {
            Ok((store, state)) => {
                println!("store_digest {store}");
                println!("state_digest {state}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: drain failed: {e}");
                EXIT_INTEGRITY
            }
        }
    })
}
