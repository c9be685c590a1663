#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use blockiot_core::runtime::{GatewayConfig, Node, SimClock};
use blockiot_core::time::Timestamp;
use blockiot_gateway::GatewayHandle;
use serde_json::{json, Value};

pub const T0: &str = "2021-01-01T08:00:00Z";

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn t0() -> Timestamp {
    T0.parse().unwrap()
}

/// The shipped config with a private data directory, ephemeral ports and fixed keys.
pub fn config(data: &Path) -> GatewayConfig {
    let mut cfg = GatewayConfig::load(Some(&repo_root().join("gateway.toml")), |_| None).unwrap();
    cfg.data_dir = data.to_path_buf();
    cfg.listen.http = "127.0.0.1:0".into();
    cfg.listen.mqtt = "127.0.0.1:0".into();
    cfg.listen.coap = "127.0.0.1:0".into();
    cfg.ledger.difficulty_bits = 4;
    cfg.ledger.seal_threshold = 1000;
    cfg.ledger.seal_interval_ms = 24 * 3600 * 1000;
    cfg.drain_timeout_ms = 5_000;
    cfg.keys.gateway_seed = Some("11".repeat(32));
    cfg.keys.admin_seed = Some("22".repeat(32));
    cfg
}

pub fn open(cfg: GatewayConfig) -> (Arc<Node>, Arc<SimClock>) {
    let clock = Arc::new(SimClock::new(t0()));
    let node = Node::open(cfg, clock.clone()).unwrap();
    (Arc::new(node), clock)
}

pub async fn start(cfg: GatewayConfig) -> (GatewayHandle, Arc<SimClock>) {
    let (node, clock) = tokio::task::spawn_blocking(move || open(cfg)).await.unwrap();
    (GatewayHandle::start(node).await.unwrap(), clock)
}

/// Blood pressure reading `i` from Ada's cuff, `i` seconds after T0.
pub fn bp(i: usize) -> Value {
    let ts = t0().millis() + i as i64 * 1000;
    json!({
        "pid": "P1",
        "did": "BP9",
        "sys": 100 + (i % 40),
        "dia": 60 + (i % 20),
        "map": 80 + (i % 15),
        "pr": 60 + (i % 30),
        "irr": false,
        "ts": Timestamp::from_millis(ts).to_string(),
    })
}

pub fn bp_batch(n: usize) -> Vec<Value> {
    (0..n).map(bp).collect()
}
