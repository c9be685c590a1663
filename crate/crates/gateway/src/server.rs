//! Listener lifecycle: bind, serve, drain.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use blockiot_core::digest::Digest32;
use blockiot_core::ingest::Transport;
use blockiot_core::runtime::{FailureKind, Node, NodeError, StartupError};
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::intake::Intake;
use crate::{coap, http, mqtt, webhook};

pub const HTTP_BODY_LIMIT: usize = 8 * 1024 * 1024;
pub const MQTT_MAX_PACKET: usize = 4 * 1024 * 1024;
pub const COAP_MAX_PAYLOAD: usize = 64_000;
const TICK: Duration = Duration::from_millis(100);

/// A running gateway. Dropping it without [`GatewayHandle::drain_and_stop`] aborts the tasks.
pub struct GatewayHandle {
    node: Arc<Node>,
    http_addr: Option<SocketAddr>,
    mqtt_addr: Option<SocketAddr>,
    coap_addr: Option<SocketAddr>,
    shutdown: watch::Sender<bool>,
    listeners: Vec<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    background: Vec<JoinHandle<()>>,
}

fn bind_error(component: &'static str, addr: SocketAddr, e: std::io::Error) -> StartupError {
    StartupError { component, message: format!("cannot bind {addr}: {e}"), kind: FailureKind::Config }
}

fn check_plaintext(component: &'static str, addr: SocketAddr, insecure: bool) -> Result<(), StartupError> {
    if insecure || addr.ip().is_loopback() {
        return Ok(());
    }
    Err(StartupError {
        component,
        message: format!("{addr} is not loopback; plaintext listeners there need insecure_test_mode"),
        kind: FailureKind::Config,
    })
}

impl GatewayHandle {
    /// Binds every enabled listener before serving any, so a port conflict fails startup cleanly.
    pub async fn start(node: Arc<Node>) -> Result<GatewayHandle, StartupError> {
        let cfg = node.config().clone();
        let addr = |r: Result<Option<SocketAddr>, _>, c: &'static str| {
            r.map_err(|e: blockiot_core::runtime::ConfigError| StartupError {
                component: c,
                message: e.to_string(),
                kind: FailureKind::Config,
            })
        };
        let (http_cfg, mqtt_cfg, coap_cfg) =
            (addr(cfg.http_addr(), "http")?, addr(cfg.mqtt_addr(), "mqtt")?, addr(cfg.coap_addr(), "coap")?);
        for (c, a) in [("http", http_cfg), ("mqtt", mqtt_cfg), ("coap", coap_cfg)] {
            if let Some(a) = a {
                check_plaintext(c, a, cfg.insecure_test_mode)?;
            }
        }
        let http_listener = match http_cfg {
            Some(a) => Some(TcpListener::bind(a).await.map_err(|e| bind_error("http", a, e))?),
            None => None,
        };
        let mqtt_listener = match mqtt_cfg {
            Some(a) => Some(TcpListener::bind(a).await.map_err(|e| bind_error("mqtt", a, e))?),
            None => None,
        };
        let coap_socket = match coap_cfg {
            Some(a) => Some(UdpSocket::bind(a).await.map_err(|e| bind_error("coap", a, e))?),
            None => None,
        };

        let (shutdown, rx) = watch::channel(false);
        let mut h = GatewayHandle {
            node: node.clone(),
            http_addr: http_listener.as_ref().and_then(|l| l.local_addr().ok()),
            mqtt_addr: mqtt_listener.as_ref().and_then(|l| l.local_addr().ok()),
            coap_addr: coap_socket.as_ref().and_then(|s| s.local_addr().ok()),
            shutdown,
            listeners: Vec::new(),
            workers: Vec::new(),
            background: Vec::new(),
        };
        let depth = cfg.queue_depth;

        if let Some(listener) = http_listener {
            let (intake, worker) = Intake::spawn(node.clone(), Transport::Http, depth);
            h.workers.push(worker);
            let app = http::router(intake, HTTP_BODY_LIMIT);
            let mut rx = rx.clone();
            h.listeners.push(tokio::spawn(async move {
                let stop = async move {
                    let _ = rx.changed().await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                    tracing::error!(error = %e, "http listener failed");
                }
            }));
        }
        if let Some(listener) = mqtt_listener {
            let (intake, worker) = Intake::spawn(node.clone(), Transport::Mqtt, depth);
            h.workers.push(worker);
            h.listeners.push(tokio::spawn(mqtt::serve(listener, intake, MQTT_MAX_PACKET, rx.clone())));
        }
        if let Some(socket) = coap_socket {
            let (intake, worker) = Intake::spawn(node.clone(), Transport::Coap, depth);
            h.workers.push(worker);
            h.listeners.push(tokio::spawn(coap::serve(socket, intake, COAP_MAX_PAYLOAD, rx.clone())));
        }

        let sealer_node = node.clone();
        let mut sealer_rx = rx.clone();
        h.background.push(tokio::spawn(async move {
            let mut every = tokio::time::interval(TICK);
            every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tokio::select! {
                    _ = every.tick() => {}
                    _ = sealer_rx.changed() => return,
                }
                let n = sealer_node.clone();
                match tokio::task::spawn_blocking(move || n.tick()).await {
                    Ok(Err(e)) => tracing::error!(error = %e, "sealing failed"),
                    Err(e) => tracing::error!(error = %e, "sealer task failed"),
                    Ok(Ok(_)) => {}
                }
            }
        }));
        h.background.push(tokio::spawn(webhook::run(node.clone(), cfg.webhook_url.clone(), rx)));
        tracing::info!(http = ?h.http_addr, mqtt = ?h.mqtt_addr, coap = ?h.coap_addr, "gateway listening");
        Ok(h)
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    pub fn mqtt_addr(&self) -> Option<SocketAddr> {
        self.mqtt_addr
    }

    pub fn coap_addr(&self) -> Option<SocketAddr> {
        self.coap_addr
    }

    pub fn http_base(&self) -> Option<String> {
        self.http_addr.map(|a| format!("http://{a}"))
    }

    /// Stops accepting, lets queued batches finish within the drain timeout,
    /// seals what is pending and returns the store and state digests.
    pub async fn drain_and_stop(mut self) -> Result<(Digest32, Digest32), NodeError> {
        let _ = self.shutdown.send(true);
        let timeout = Duration::from_millis(self.node.config().drain_timeout_ms);
        let deadline = tokio::time::Instant::now() + timeout;
        for task in self.listeners.drain(..).chain(self.workers.drain(..)) {
            let abort = task.abort_handle();
            if tokio::time::timeout_at(deadline, task).await.is_err() {
                tracing::warn!("drain timeout reached; abandoning in-flight work");
                abort.abort();
            }
        }
        for task in self.background.drain(..) {
            let _ = task.await;
        }
        let node = self.node.clone();
        let digests = tokio::task::spawn_blocking(move || node.drain())
            .await
            .map_err(|e| NodeError::Storage(e.to_string()))??;
        let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build().expect("http client");
        webhook::flush(&self.node, &client, self.node.config().webhook_url.as_deref()).await;
        Ok(digests)
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        for t in self.listeners.iter().chain(&self.workers).chain(&self.background) {
            t.abort();
        }
    }
}
