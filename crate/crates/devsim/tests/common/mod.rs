#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use blockiot_core::runtime::{GatewayConfig, Node, SimClock};
use blockiot_core::time::Timestamp;
use blockiot_devsim::{Endpoints, LoadedScenario, Scenario};
use blockiot_gateway::GatewayHandle;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config(data: &Path) -> GatewayConfig {
    let mut cfg = GatewayConfig::load(Some(&repo_root().join("gateway.toml")), |_| None).unwrap();
    cfg.data_dir = data.to_path_buf();
    cfg.listen.http = "127.0.0.1:0".into();
    cfg.listen.mqtt = "127.0.0.1:0".into();
    cfg.listen.coap = "127.0.0.1:0".into();
    cfg.ledger.difficulty_bits = 4;
    cfg.ledger.seal_threshold = 50;
    cfg.drain_timeout_ms = 5_000;
    // Simulated device clocks run years behind the gateway's.
    cfg.clock_skew_budget_ms = Some(100 * 365 * 86_400_000);
    cfg.keys.gateway_seed = Some("11".repeat(32));
    cfg.keys.admin_seed = Some("22".repeat(32));
    cfg
}

pub async fn start_at(cfg: GatewayConfig, at: Timestamp) -> GatewayHandle {
    let node = tokio::task::spawn_blocking(move || Node::open(cfg, Arc::new(SimClock::new(at))).unwrap()).await.unwrap();
    GatewayHandle::start(Arc::new(node)).await.unwrap()
}

pub fn endpoints(gw: &GatewayHandle, admin: bool) -> Endpoints {
    Endpoints {
        http: gw.http_base(),
        mqtt: gw.mqtt_addr(),
        coap: gw.coap_addr(),
        admin_token: admin.then(|| "tok-admin".to_string()),
    }
}

pub fn shipped(name: &str) -> LoadedScenario {
    let root = repo_root();
    Scenario::load(&root.join("scenarios").join(format!("{name}.json"))).unwrap().resolve(&root.join("templates")).unwrap()
}

pub const SCENARIOS: [&str; 5] = ["comorbidity", "diabetes", "hypertension", "copd", "heart_failure"];
