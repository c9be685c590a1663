//! Outbound alert delivery. Alerts are already on the ledger; delivery is best effort.

use std::sync::Arc;
use std::time::Duration;

use blockiot_core::contracts::AlertEvent;
use blockiot_core::runtime::Node;
use tokio::sync::watch;

const ATTEMPTS: u32 = 3;
const POLL: Duration = Duration::from_millis(200);

pub(crate) async fn run(node: Arc<Node>, url: Option<String>, mut shutdown: watch::Receiver<bool>) {
    let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build().expect("http client");
    loop {
        let stop = tokio::select! {
            _ = tokio::time::sleep(POLL) => false,
            _ = shutdown.changed() => true,
        };
        flush(&node, &client, url.as_deref()).await;
        if stop {
            return;
        }
    }
}

pub(crate) async fn flush(node: &Node, client: &reqwest::Client, url: Option<&str>) {
    for alert in node.take_alerts() {
        match url {
            Some(url) => deliver(client, url, &alert).await,
            None => tracing::info!(kind = ?alert.contract_kind, severity = ?alert.severity, patient = %alert.patient_key, "alert"),
        }
    }
}

async fn deliver(client: &reqwest::Client, url: &str, alert: &AlertEvent) {
    let mut backoff = Duration::from_millis(250);
    for attempt in 1..=ATTEMPTS {
        match client.post(url).json(alert).send().await {
            Ok(r) if r.status().is_success() => return,
            Ok(r) => tracing::warn!(status = %r.status(), attempt, "webhook rejected alert"),
            Err(e) => tracing::warn!(error = %e, attempt, "webhook delivery failed"),
        }
        tokio::time::sleep(backoff).await;
        backoff *= 2;
    }
    tracing::error!(patient = %alert.patient_key, "alert not delivered to webhook");
}
