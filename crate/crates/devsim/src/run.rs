//! Sends a scenario to a gateway and tallies what came back.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use blockiot_core::identity::PatientKey;
use blockiot_core::ingest::Transport;
use blockiot_core::observation::MeasurementKind;
use blockiot_core::template::DeviceTemplate;
use blockiot_gateway::client::{ClientError, CoapSender, DeviceSender, HttpSender, MqttSender};
use blockiot_gateway::Reply;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::scenario::{LoadedScenario, Send};

#[derive(Debug, Clone, Default)]
pub struct Endpoints {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub http: Option<String>,
    pub mqtt: Option<SocketAddr>,
    pub coap: Option<SocketAddr>,
    /// Enables sealing, summary publication and alert collection after the run.
    pub admin_token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Multiplies the scenario's time compression.
    pub speed: f64,
    pub max_attempts: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: None, speed: 1.0, max_attempts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub device: String,
    pub seq: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryFailure {
    pub device: String,
    pub seq: usize,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub patient_key: PatientKey,
    pub sends: usize,
    pub accepted: usize,
    pub rejections: Vec<RejectionRecord>,
    pub delivery_failures: Vec<DeliveryFailure>,
    pub transports: BTreeSet<Transport>,
    pub kinds: BTreeSet<MeasurementKind>,
    /// Alert counts by contract kind, for this patient.
    pub alerts: BTreeMap<String, usize>,
    pub contract_families: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
    pub wall_ms: u64,
}

impl RunReport {
    /// Every payload was delivered and accepted.
    pub fn clean(&self) -> bool {
        self.accepted == self.sends && self.rejections.is_empty() && self.delivery_failures.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("no {0} endpoint configured")]
    MissingEndpoint(&'static str),
    #[error("device {device}: {error}")]
    Connect { device: String, error: ClientError },
    #[error("admin request failed: {0}")]
    Admin(String),
}

enum Outcome {
    Accepted { seq: usize, device: usize },
    Rejected { seq: usize, device: usize, reason: String },
    Failed { seq: usize, device: usize, attempts: u32, error: String },
}

async fn connect(ls: &LoadedScenario, device: usize, ep: &Endpoints) -> Result<DeviceSender, RunError> {
    let d = &ls.scenario.devices[device];
    let c = &d.credentials;
    let wrap = |error| RunError::Connect { device: d.name.clone(), error };
    Ok(match d.transport {
        Transport::Http => {
            let base = ep.http.as_deref().ok_or(RunError::MissingEndpoint("http"))?;
            DeviceSender::Http(HttpSender::new(base, c.token.as_deref().unwrap_or_default()))
        }
        Transport::Mqtt => {
            let addr = ep.mqtt.ok_or(RunError::MissingEndpoint("mqtt"))?;
            let user = c.mqtt_username.as_deref().unwrap_or_default();
            let pass = c.mqtt_password.as_deref().unwrap_or_default();
            let s = MqttSender::connect(addr, user, pass, &d.patient_id, &d.device_id).await.map_err(wrap)?;
            DeviceSender::Mqtt(Box::new(s))
        }
        Transport::Coap => {
            let addr = ep.coap.ok_or(RunError::MissingEndpoint("coap"))?;
            let psk = c.coap_psk_id.as_deref().unwrap_or_default();
            DeviceSender::Coap(CoapSender::connect(addr, psk, &d.patient_id, &d.device_id).await.map_err(wrap)?)
        }
    })
}

async fn device_task(
    ls: LoadedScenario,
    device: usize,
    sends: Vec<Send>,
    ep: Endpoints,
    opts: RunOptions,
    t0: tokio::time::Instant,
    out: mpsc::UnboundedSender<Outcome>,
) -> Result<(), RunError> {
    let mut sender = connect(&ls, device, &ep).await?;
    let rate = ls.scenario.time_compression * opts.speed;
    for s in sends {
        let due = Duration::from_secs_f64((s.offset_ms as f64 / 1000.0 / rate).max(0.0));
        tokio::time::sleep_until(t0 + due).await;
        let batch = [s.payload];
        let mut attempt = 0;
        let outcome = loop {
            attempt += 1;
            let result = sender.send(&batch).await;
            let retry = match &result {
                Ok(r) => r.is_retryable(),
                Err(_) => true,
            };
            if !retry || attempt >= opts.max_attempts {
                break match result {
                    Ok(Reply::Receipt(r)) if r.accepted == 1 => Outcome::Accepted { seq: s.seq, device },
                    Ok(Reply::Receipt(r)) => Outcome::Rejected {
                        seq: s.seq,
                        device,
                        reason: r.rejected.first().map_or_else(|| "rejected".into(), |x| x.reason.clone()),
                    },
                    Ok(Reply::Error(e)) if !e.retryable => Outcome::Rejected { seq: s.seq, device, reason: e.error },
                    Ok(Reply::Error(e)) => Outcome::Failed { seq: s.seq, device, attempts: attempt, error: e.error },
                    Err(e) => Outcome::Failed { seq: s.seq, device, attempts: attempt, error: e.to_string() },
                };
            }
            tokio::time::sleep(Duration::from_millis(50 << attempt.min(6))).await;
            if result.is_err() {
                // The session may be gone; start a fresh one.
                if let Ok(fresh) = connect(&ls, device, &ep).await {
                    sender = fresh;
                }
            }
        };
        let _ = out.send(outcome);
    }
    if let DeviceSender::Mqtt(m) = sender {
        let _ = m.disconnect().await;
    }
    Ok(())
}

fn kinds_of(t: &DeviceTemplate, payload: &Value) -> Vec<MeasurementKind> {
    let Some(m) = payload.as_object() else { return Vec::new() };
    t.parameter_map
        .iter()
        .filter(|r| r.input_keys().iter().all(|k| m.contains_key(*k)))
        .map(|r| r.kind)
        .collect()
}

pub async fn run_scenario(ls: &LoadedScenario, ep: &Endpoints, opts: &RunOptions) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let seed = opts.seed.unwrap_or(ls.scenario.seed);
    let sends = ls.expand(seed);
    let mut per_device: Vec<Vec<Send>> = vec![Vec::new(); ls.scenario.devices.len()];
    for s in &sends {
        per_device[s.device].push(s.clone());
    }

    let (tx, mut rx) = mpsc::unbounded_channel();
    let t0 = tokio::time::Instant::now();
    let mut tasks = Vec::new();
    for (device, list) in per_device.into_iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        tasks.push(tokio::spawn(device_task(ls.clone(), device, list, ep.clone(), opts.clone(), t0, tx.clone())));
    }
    drop(tx);

    let mut report = RunReport {
        scenario: ls.scenario.name.clone(),
        seed,
        patient_key: ls.patient_key,
        sends: sends.len(),
        accepted: 0,
        rejections: Vec::new(),
        delivery_failures: Vec::new(),
        transports: BTreeSet::new(),
        kinds: BTreeSet::new(),
        alerts: BTreeMap::new(),
        contract_families: BTreeSet::new(),
        summary: None,
        wall_ms: 0,
    };
    while let Some(o) = rx.recv().await {
        match o {
            Outcome::Accepted { seq, device } => {
                report.accepted += 1;
                report.transports.insert(ls.scenario.devices[device].transport);
                report.kinds.extend(kinds_of(&ls.templates[device], &sends[seq].payload));
            }
            Outcome::Rejected { seq, device, reason } => {
                report.rejections.push(RejectionRecord { device: ls.scenario.devices[device].name.clone(), seq, reason })
            }
            Outcome::Failed { seq, device, attempts, error } => report.delivery_failures.push(DeliveryFailure {
                device: ls.scenario.devices[device].name.clone(),
                seq,
                attempts,
                error,
            }),
        }
    }
    for t in tasks {
        t.await.expect("device task panicked")?;
    }
    report.rejections.sort_by_key(|r| r.seq);
    report.delivery_failures.sort_by_key(|r| r.seq);

    if let (Some(base), Some(token)) = (&ep.http, &ep.admin_token) {
        let last_day = ls.scenario.start.plus_millis(ls.last_offset_ms(&sends)).date();
        collect_contract_results(&mut report, base, token, last_day).await?;
    }
    report.wall_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

async fn collect_contract_results(
    report: &mut RunReport,
    base: &str,
    token: &str,
    last_day: chrono::NaiveDate,
) -> Result<(), RunError> {
    let client = reqwest::Client::new();
    let admin = |e: reqwest::Error| RunError::Admin(e.to_string());
    let base = base.trim_end_matches('/');
    let seal = || async {
        client.post(format!("{base}/admin/seal")).bearer_auth(token).send().await?.error_for_status()?;
        Ok::<_, reqwest::Error>(())
    };
    seal().await.map_err(admin)?;
    client
        .post(format!("{base}/admin/summaries"))
        .bearer_auth(token)
        .json(&json!({"date": last_day}))
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(admin)?;
    seal().await.map_err(admin)?;

    let alerts: Vec<Value> = client
        .get(format!("{base}/admin/alerts?patient={}", report.patient_key))
        .bearer_auth(token)
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(admin)?
        .json()
        .await
        .map_err(admin)?;
    for a in &alerts {
        if let Some(kind) = a["event"]["contract_kind"].as_str() {
            *report.alerts.entry(kind.to_string()).or_default() += 1;
            report.contract_families.insert(kind.to_string());
        }
    }
    let resp = client
        .get(format!("{base}/admin/summary/{}", report.patient_key))
        .bearer_auth(token)
        .send()
        .await
        .map_err(admin)?;
    if resp.status().is_success() {
        report.summary = Some(resp.json().await.map_err(admin)?);
        report.contract_families.insert("summarization".into());
    }
    Ok(())
}
