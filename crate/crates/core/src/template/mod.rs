//! Device templates: the per-model configuration files that translate
//! proprietary payload keys into canonical observations.

mod mapping;
mod registry;
pub mod schema;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::observation::MeasurementKind;
use crate::units::is_valid_ucum_syntax;

pub use mapping::{
    classify_value, extract_identity, map_payload, FieldError, MappingContext, MappingError,
    MappingOutcome,
};
pub use registry::{TemplateKey, TemplateRegistry};
pub use schema::Problem;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identifiers {
    pub patient_id_key: String,
    pub device_id_key: String,
    pub nomenclature_code: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeProperties {
    pub clock_type: String,
    pub synchronization: String,
    pub resolution_ms: u64,
    pub accuracy_ms: u64,
    /// Payload key carrying the device's own timestamp, if the device sends one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub specialization: String,
    pub manufacturer: String,
    pub model: String,
    pub serial_number: String,
    pub firmware: String,
    pub hardware: String,
    pub software: String,
    pub time_properties: TimeProperties,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regulatory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRule {
    pub source_key: String,
    pub target_code: String,
    pub kind: MeasurementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_set: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_layout: Option<Vec<String>>,
    /// For vectors spread over several payload keys, one key per layout label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_keys: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_labels: Option<Vec<String>>,
    /// Sample rate for waveforms sent as a bare sample array.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<f64>,
}

impl ParameterRule {
    /// Payload keys this rule reads.
    pub fn input_keys(&self) -> Vec<&str> {
        match &self.component_keys {
            Some(keys) => keys.iter().map(String::as_str).collect(),
            None => vec![self.source_key.as_str()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidelineAction {
    None,
    Notify,
    Alert,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineParam {
    pub target_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_limit: Option<f64>,
    pub unit: String,
    pub action: GuidelineAction,
}

impl GuidelineParam {
    pub fn problems(&self, path: &str) -> Vec<Problem> {
        let mut out = Vec::new();
        match (self.lower_limit, self.upper_limit) {
            (None, None) => out.push(Problem::new(path, "at least one of lower_limit/upper_limit required")),
            (Some(lo), Some(hi)) if lo >= hi => {
                out.push(Problem::new(path, format!("lower_limit {lo} must be < upper_limit {hi}")))
            }
            _ => {}
        }
        if !is_valid_ucum_syntax(&self.unit) {
            out.push(Problem::new(format!("{path}/unit"), format!("invalid UCUM unit {:?}", self.unit)));
        }
        out
    }

    /// Which bound, if any, `value` violates.
    pub fn violation(&self, value: f64) -> Option<&'static str> {
        if self.lower_limit.is_some_and(|lo| value < lo) {
            Some("lower bound")
        } else if self.upper_limit.is_some_and(|hi| value > hi) {
            Some("upper bound")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTemplate {
    pub identifiers: Identifiers,
    pub device_config: DeviceConfig,
    pub parameter_map: Vec<ParameterRule>,
    #[serde(default)]
    pub guidelines: Vec<GuidelineParam>,
}

impl DeviceTemplate {
    pub fn key(&self) -> TemplateKey {
        TemplateKey::new(
            &self.device_config.manufacturer,
            &self.device_config.model,
            &self.device_config.firmware,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template parse error: {}", join(.0))]
    Parse(Vec<Problem>),
    #[error("template validation error: {}", join(.0))]
    Validation(Vec<Problem>),
}

impl TemplateError {
    pub fn problems(&self) -> &[Problem] {
        match self {
            TemplateError::Parse(p) | TemplateError::Validation(p) => p,
        }
    }
}

fn join(problems: &[Problem]) -> String {
    problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.manufacturer, self.model, self.firmware_major)
    }
}

pub fn load_template(bytes: &[u8]) -> Result<DeviceTemplate, TemplateError> {
    let doc: Value = serde_json::from_slice(bytes)
        .map_err(|e| TemplateError::Parse(vec![Problem::new("", format!("not a JSON document: {e}"))]))?;
    let schema: Value = serde_json::from_str(schema::DEVICE_TEMPLATE_SCHEMA).expect("shipped schema is JSON");
    let problems = schema::validate(&schema, &doc);
    if !problems.is_empty() {
        return Err(TemplateError::Parse(problems));
    }

    // Kinds are checked here so that an unknown kind is a validation error rather than a parse error.
    let mut problems = Vec::new();
    for (i, rule) in doc["parameter_map"].as_array().into_iter().flatten().enumerate() {
        let kind = rule["kind"].as_str().unwrap_or_default();
        if MeasurementKind::parse(kind).is_none() {
            problems.push(Problem::new(format!("/parameter_map/{i}/kind"), format!("unknown kind {kind:?}")));
        }
    }
    if !problems.is_empty() {
        return Err(TemplateError::Validation(problems));
    }

    let template: DeviceTemplate = serde_json::from_value(doc)
        .map_err(|e| TemplateError::Parse(vec![Problem::new("", e.to_string())]))?;
    let problems = validate_template(&template);
    if problems.is_empty() {
        Ok(template)
    } else {
        Err(TemplateError::Validation(problems))
    }
}

/// Semantic checks the schema cannot express.
pub fn validate_template(t: &DeviceTemplate) -> Vec<Problem> {
    let mut out = Vec::new();
    let mut keys: HashSet<&str> = HashSet::new();
    keys.insert(&t.identifiers.patient_id_key);
    if !keys.insert(&t.identifiers.device_id_key) {
        out.push(Problem::new("/identifiers/device_id_key", "same key as patient_id_key"));
    }
    if let Some(ts) = &t.device_config.time_properties.timestamp_key {
        if !keys.insert(ts) {
            out.push(Problem::new("/device_config/time_properties/timestamp_key", "collides with an identifier key"));
        }
    }
    let mut sources = HashSet::new();
    for (i, rule) in t.parameter_map.iter().enumerate() {
        let path = format!("/parameter_map/{i}");
        if !sources.insert(rule.source_key.as_str()) {
            out.push(Problem::new(format!("{path}/source_key"), format!("duplicate source_key {:?}", rule.source_key)));
            continue;
        }
        for key in rule.input_keys() {
            if !keys.insert(key) {
                out.push(Problem::new(path.clone(), format!("payload key {key:?} is read more than once")));
            }
        }
        let nonempty = |v: &Option<Vec<String>>| v.as_ref().is_some_and(|v| !v.is_empty());
        match rule.kind {
            MeasurementKind::Code if !nonempty(&rule.code_set) => {
                out.push(Problem::new(format!("{path}/code_set"), "kind=code requires a non-empty code_set"))
            }
            MeasurementKind::Vector => {
                if !nonempty(&rule.vector_layout) {
                    out.push(Problem::new(format!("{path}/vector_layout"), "kind=vector requires a non-empty vector_layout"));
                }
                let layout_len = rule.vector_layout.as_ref().map_or(0, Vec::len);
                if layout_len == 1 {
                    out.push(Problem::new(format!("{path}/vector_layout"), "vectors have at least 2 components"));
                }
                if let Some(ck) = &rule.component_keys {
                    if ck.len() != layout_len {
                        out.push(Problem::new(format!("{path}/component_keys"), "must match vector_layout length"));
                    }
                }
            }
            MeasurementKind::Waveform => {
                if rule.sample_rate_hz.is_some_and(|r| !(r > 0.0)) {
                    out.push(Problem::new(format!("{path}/sample_rate_hz"), "sample_rate_hz > 0"));
                }
            }
            _ => {}
        }
        if rule.component_keys.is_some() && rule.kind != MeasurementKind::Vector {
            out.push(Problem::new(format!("{path}/component_keys"), "only valid for kind=vector"));
        }
        if matches!(rule.kind, MeasurementKind::Scalar | MeasurementKind::Vector) {
            match &rule.unit {
                None => out.push(Problem::new(format!("{path}/unit"), format!("kind={} requires a unit", rule.kind))),
                Some(u) if !is_valid_ucum_syntax(u) => {
                    out.push(Problem::new(format!("{path}/unit"), format!("invalid UCUM unit {u:?}")))
                }
                _ => {}
            }
        }
    }
    for (i, g) in t.guidelines.iter().enumerate() {
        out.extend(g.problems(&format!("/guidelines/{i}")));
    }
    out
}
