//! Scenario files: a patient, their devices and a timeline of payloads.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use blockiot_core::identity::PatientKey;
use blockiot_core::ingest::{PatientFixture, Transport};
use blockiot_core::template::{load_template, DeviceTemplate};
use blockiot_core::time::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::generate::{field_values, GeneratorSpec};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceCredentials {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_username: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_password: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coap_psk_id: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    #[default]
    Rfc3339,
    EpochMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    /// File stem of a template in the template directory.
    pub template: String,
    pub transport: Transport,
    pub patient_id: String,
    pub device_id: String,
    pub credentials: DeviceCredentials,
    #[serde(default)]
    pub time_format: TimeFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repeat {
    pub count: usize,
    pub every_s: f64,
    /// Repetition indices that are not sent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skip: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineEntry {
    pub offset_s: f64,
    pub device: String,
    /// Fixed fields, merged under the generated ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub generate: BTreeMap<String, GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<Repeat>,
    /// Send `payload` exactly as written, without identifiers or a timestamp.
    #[serde(default)]
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub patient: PatientFixture,
    pub start: Timestamp,
    /// Simulated seconds per wall-clock second.
    pub time_compression: f64,
    #[serde(default)]
    pub seed: u64,
    pub devices: Vec<DeviceSpec>,
    pub timeline: Vec<TimelineEntry>,
}

/// One payload to send.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Send {
    pub seq: usize,
    pub device: usize,
    pub offset_ms: i64,
    pub payload: Value,
}

/// A validated scenario with its device templates.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub templates: Vec<DeviceTemplate>,
    pub patient_key: PatientKey,
}

fn secs_to_ms(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

impl Scenario {
    pub fn from_json(bytes: &[u8], origin: &str) -> Result<Self, ScenarioError> {
        serde_json::from_slice(bytes).map_err(|source| ScenarioError::Parse { path: origin.to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let bytes = std::fs::read(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&bytes, &path.display().to_string())
    }

    /// Checks the invariants and resolves each device's template from `template_dir`.
    pub fn resolve(self, template_dir: &Path) -> Result<LoadedScenario, ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let patient_key = match self.patient.identity() {
            Ok(id) => id.patient_key,
            Err(e) => return bad(format!("patient: {e}")),
        };
        if !(self.time_compression > 0.0 && self.time_compression.is_finite()) {
            return bad("time_compression must be positive".into());
        }
        let mut names = HashMap::new();
        let mut templates = Vec::new();
        for (i, d) in self.devices.iter().enumerate() {
            if names.insert(d.name.clone(), i).is_some() {
                return bad(format!("device name {:?} is used twice", d.name));
            }
            let c = &d.credentials;
            let ok = match d.transport {
                Transport::Http => c.token.is_some(),
                Transport::Mqtt => c.mqtt_username.is_some() && c.mqtt_password.is_some(),
                Transport::Coap => c.coap_psk_id.is_some(),
            };
            if !ok {
                return bad(format!("device {:?} has no credentials for {}", d.name, d.transport.as_str()));
            }
            if d.template.contains(['/', '\\']) || d.template.starts_with('.') {
                return bad(format!("device {:?}: template must be a file stem", d.name));
            }
            let path = template_dir.join(format!("{}.json", d.template));
            let bytes = std::fs::read(&path)
                .map_err(|_| ScenarioError::Invalid(format!("device {:?}: no shipped template {:?}", d.name, d.template)))?;
            let t = load_template(&bytes).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
            templates.push(t);
        }
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.timeline.iter().enumerate() {
            if !(e.offset_s >= 0.0 && e.offset_s.is_finite()) {
                return bad(format!("timeline[{i}]: offset must be a non-negative number"));
            }
            if e.offset_s < last {
                return bad(format!("timeline[{i}]: offsets must be non-decreasing"));
            }
            last = e.offset_s;
            if !names.contains_key(&e.device) {
                return bad(format!("timeline[{i}]: unknown device {:?}", e.device));
            }
            if e.payload.is_none() && e.generate.is_empty() {
                return bad(format!("timeline[{i}]: needs a payload or generators"));
            }
            if e.raw && !e.generate.is_empty() {
                return bad(format!("timeline[{i}]: raw entries cannot use generators"));
            }
            for (k, g) in &e.generate {
                g.validate().map_err(|m| ScenarioError::Invalid(format!("timeline[{i}].generate.{k}: {m}")))?;
            }
            if let Some(r) = &e.repeat {
                if r.count == 0 || !(r.every_s > 0.0) {
                    return bad(format!("timeline[{i}]: repeat needs a positive count and interval"));
                }
            }
        }
        Ok(LoadedScenario { scenario: self, templates, patient_key })
    }
}

impl LoadedScenario {
    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.scenario.devices.iter().position(|d| d.name == name)
    }

    /// Every payload in send order. Deterministic in the scenario and `seed`.
    pub fn expand(&self, seed: u64) -> Vec<Send> {
        let s = &self.scenario;
        let mut out = Vec::new();
        for (ei, e) in s.timeline.iter().enumerate() {
            let device = self.device_index(&e.device).expect("validated");
            let (count, every_ms, skip) = match &e.repeat {
                Some(r) => (r.count, secs_to_ms(r.every_s), r.skip.as_slice()),
                None => (1, 0, &[][..]),
            };
            let generated: Vec<(&String, Vec<Value>)> = e
                .generate
                .iter()
                .enumerate()
                .map(|(fi, (k, g))| (k, field_values(g, count, seed, ((ei as u64) << 16) | fi as u64)))
                .collect();
            for i in (0..count).filter(|i| !skip.contains(i)) {
                let offset_ms = secs_to_ms(e.offset_s) + every_ms * i as i64;
                let payload = if e.raw {
                    Value::Object(e.payload.clone().unwrap_or_default())
                } else {
                    let mut m = Map::new();
                    let mut fixed = e.payload.clone().unwrap_or_default();
                    for (k, vals) in &generated {
                        fixed.insert((*k).clone(), vals[i].clone());
                    }
                    self.frame(device, offset_ms, &mut m, fixed);
                    Value::Object(m)
                };
                out.push(Send { seq: 0, device, offset_ms, payload });
            }
        }
        out.sort_by_key(|x| x.offset_ms);
        for (i, x) in out.iter_mut().enumerate() {
            x.seq = i;
        }
        out
    }

    fn frame(&self, device: usize, offset_ms: i64, m: &mut Map<String, Value>, fields: Map<String, Value>) {
        let d = &self.scenario.devices[device];
        let t = &self.templates[device];
        m.insert(t.identifiers.patient_id_key.clone(), Value::String(d.patient_id.clone()));
        m.insert(t.identifiers.device_id_key.clone(), Value::String(d.device_id.clone()));
        m.extend(fields);
        if let Some(key) = &t.device_config.time_properties.timestamp_key {
            if !m.contains_key(key) {
                let at = self.scenario.start.plus_millis(offset_ms);
                let v = match d.time_format {
                    TimeFormat::Rfc3339 => Value::String(at.to_string()),
                    TimeFormat::EpochMs => Value::from(at.millis()),
                };
                m.insert(key.clone(), v);
            }
        }
    }

    pub fn last_offset_ms(&self, sends: &[Send]) -> i64 {
        sends.last().map_or(0, |s| s.offset_ms)
    }
}
