//! Start, drain and restart behaviour, transport equivalence and backpressure.

mod common;

use std::sync::Arc;

use blockiot_core::ledger::CHAIN_FILE;
use blockiot_core::runtime::Node;
use blockiot_gateway::client::{CoapSender, HttpSender, MqttSender};
use blockiot_gateway::GatewayHandle;
use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn height(gw: &GatewayHandle) -> u64 {
    gw.node().status().height
}

#[tokio::test(flavor = "multi_thread")]
async fn fresh_store_starts_at_genesis_and_drains_cleanly() {
    let data = tempfile::tempdir().unwrap();
    let (gw, _clock) = start(config(data.path())).await;
    assert!(gw.node().is_ready());
    assert_eq!(height(&gw), 0);
    let node = gw.node().clone();
    gw.drain_and_stop().await.unwrap();
    assert_eq!(node.status().height, 0, "empty mempool must not produce a block");
    assert!(!node.is_ready());
}

#[tokio::test(flavor = "multi_thread")]
async fn pending_transactions_become_one_final_block() {
    let data = tempfile::tempdir().unwrap();
    let (gw, _clock) = start(config(data.path())).await;
    let http = HttpSender::new(&gw.http_base().unwrap(), "tok-bp9");
    for i in 0..3 {
        http.send(&[bp(i)]).await.unwrap().receipt().unwrap();
    }
    assert_eq!(gw.node().status().pending, 3);
    let node = gw.node().clone();
    gw.drain_and_stop().await.unwrap();
    let ledger = node.ledger().read().unwrap();
    assert_eq!(ledger.blocks().len(), 2);
    assert_eq!(ledger.blocks()[1].transactions.len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_replays_to_the_same_digests() {
    let data = tempfile::tempdir().unwrap();
    let (gw, _clock) = start(config(data.path())).await;
    let http = HttpSender::new(&gw.http_base().unwrap(), "tok-bp9");
    http.send(&bp_batch(20)).await.unwrap();
    let first = gw.drain_and_stop().await.unwrap();

    let (gw, _clock) = start(config(data.path())).await;
    assert_eq!(gw.node().digests(), first);
    // Re-sending after the restart is absorbed by the persistent dedup set.
    let http = HttpSender::new(&gw.http_base().unwrap(), "tok-bp9");
    http.send(&bp_batch(20)).await.unwrap();
    assert_eq!(gw.drain_and_stop().await.unwrap(), first);

    let (node, _clock) = tokio::task::spawn_blocking({
        let cfg = config(data.path());
        move || open(cfg)
    })
    .await
    .unwrap();
    assert_eq!(node.digests(), first);
}

#[tokio::test(flavor = "multi_thread")]
async fn transports_give_identical_digests() {
    let batch = bp_batch(25);
    let mut digests = Vec::new();
    for transport in ["http", "mqtt", "coap"] {
        let data = tempfile::tempdir().unwrap();
        let (gw, _clock) = start(config(data.path())).await;
        let reply = match transport {
            "http" => HttpSender::new(&gw.http_base().unwrap(), "tok-bp9").send(&batch).await.unwrap(),
            "mqtt" => {
                let mut s = MqttSender::connect(gw.mqtt_addr().unwrap(), "bp9", "pw-bp9", "P1", "BP9").await.unwrap();
                s.send(&batch).await.unwrap()
            }
            _ => {
                let mut s = CoapSender::connect(gw.coap_addr().unwrap(), "psk-bp9", "P1", "BP9").await.unwrap();
                s.send(&batch).await.unwrap()
            }
        };
        assert_eq!(reply.receipt().unwrap().accepted, 25, "{transport}");
        digests.push(gw.drain_and_stop().await.unwrap());
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[1], digests[2]);
}

#[tokio::test(flavor = "multi_thread")]
async fn unauthenticated_traffic_changes_nothing() {
    let data = tempfile::tempdir().unwrap();
    let (gw, _clock) = start(config(data.path())).await;
    let before = gw.node().digests();
    let base = gw.http_base().unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    for round in 0..30 {
        let n = rng.random_range(1..5);
        let batch: Vec<_> = (0..n).map(|_| bp(rng.random_range(0..500))).collect();
        let token: String = (0..rng.random_range(1..12)).map(|_| rng.random_range('a'..='z')).collect();
        let r = HttpSender::new(&base, &token).send(&batch).await.unwrap();
        assert!(r.receipt().is_none(), "round {round}");
        let user = format!("u{}", rng.random::<u32>());
        assert!(MqttSender::connect(gw.mqtt_addr().unwrap(), &user, "pw", "P1", "BP9").await.is_err());
        let mut coap = CoapSender::connect(gw.coap_addr().unwrap(), &token, "P1", "BP9").await.unwrap();
        assert!(coap.send(&batch).await.unwrap().receipt().is_none());
    }
    assert_eq!(gw.node().digests(), before);
    gw.drain_and_stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn full_queue_rejects_with_retryable_error() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path());
    cfg.queue_depth = 1;
    let (gw, _clock) = start(cfg).await;
    let base = gw.http_base().unwrap();
    let url = format!("{base}/ingest/observations");
    let client = reqwest::Client::new();
    let mut tasks = Vec::new();
    for i in 0..120 {
        let (client, url) = (client.clone(), url.clone());
        let batch: Vec<_> = (0..20).map(|j| bp(i * 20 + j)).collect();
        tasks.push(tokio::spawn(async move {
            loop {
                let resp = client.post(&url).bearer_auth("tok-bp9").json(&batch).send().await.unwrap();
                match resp.status().as_u16() {
                    200 => return false,
                    503 => {
                        assert!(resp.headers().contains_key("retry-after"));
                        let body: serde_json::Value = resp.json().await.unwrap();
                        assert_eq!(body["retryable"], true);
                        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
                        // Report that at least one rejection happened, then finish the retry.
                        loop {
                            let r = client.post(&url).bearer_auth("tok-bp9").json(&batch).send().await.unwrap();
                            if r.status() == 200 {
                                return true;
                            }
                            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
                        }
                    }
                    s => panic!("unexpected status {s}"),
                }
            }
        }));
    }
    let mut rejected = 0;
    for t in tasks {
        rejected += t.await.unwrap() as usize;
    }
    assert!(rejected > 0, "bounded queue never filled");
    let node = gw.node().clone();
    gw.drain_and_stop().await.unwrap();
    // Each cuff reading maps to pressure, pulse and the irregularity flag.
    assert_eq!(node.state().observations.values().map(|v| v.len()).sum::<usize>(), 3 * 2400);
}

#[tokio::test(flavor = "multi_thread")]
async fn port_conflict_names_the_transport() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let data = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path());
    cfg.listen.mqtt = taken.local_addr().unwrap().to_string();
    let (node, _clock) = tokio::task::spawn_blocking(move || open(cfg)).await.unwrap();
    let err = GatewayHandle::start(node).await.err().unwrap();
    assert_eq!(err.component, "mqtt");
    assert_eq!(err.exit_code(), 1);

    let data = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path());
    cfg.insecure_test_mode = false;
    cfg.listen.http = "0.0.0.0:0".into();
    let (node, _clock) = tokio::task::spawn_blocking(move || open(cfg)).await.unwrap();
    assert_eq!(GatewayHandle::start(node).await.err().unwrap().component, "http");
}

fn flip_genesis_bit(data: &std::path::Path) {
    let path = data.join("ledger").join(CHAIN_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    bytes[4 + len / 2] ^= 0x04;
    std::fs::write(&path, bytes).unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn tampered_chain_is_an_integrity_failure() {
    let data = tempfile::tempdir().unwrap();
    let (gw, _clock) = start(config(data.path())).await;
    HttpSender::new(&gw.http_base().unwrap(), "tok-bp9").send(&bp_batch(2)).await.unwrap();
    gw.drain_and_stop().await.unwrap();
    flip_genesis_bit(data.path());

    let cfg = config(data.path());
    let err = tokio::task::spawn_blocking(move || Node::open(cfg, Arc::new(blockiot_core::runtime::SystemClock)).err())
        .await
        .unwrap()
        .unwrap();
    assert_eq!(err.component, "ledger");
    assert_eq!(err.exit_code(), 2);
}

fn write_config(dir: &std::path::Path, data: &std::path::Path) -> std::path::PathBuf {
    let root = repo_root().canonicalize().unwrap();
    let text = format!(
        "data_dir = {data:?}\ntemplate_dir = {t:?}\ncontract_dir = {c:?}\nregistrations = {r:?}\n\
         [listen]\nhttp = \"127.0.0.1:1\"\nmqtt = \"off\"\ncoap = \"off\"\n[ledger]\ndifficulty_bits = 4\n",
        t = root.join("templates"),
        c = root.join("contracts"),
        r = root.join("registrations.json"),
    );
    let path = dir.join("gw.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), &data);
    let status = || {
        std::process::Command::new(env!("CARGO_BIN_EXE_blockiot"))
            .args(["status", "--config"])
            .arg(&cfg)
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    };
    let ok = status();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let v: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["height"], 0);

    // A genesis-only chain has one record; tampering with it must be caught.
    flip_genesis_bit(&data);
    assert_eq!(status().status.code(), Some(2));

    let missing = std::process::Command::new(env!("CARGO_BIN_EXE_gatewayd"))
        .args(["--config", "/nonexistent/gw.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}
