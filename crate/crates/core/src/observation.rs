//! Canonical observations: one normalized device reading in one of six value kinds.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cas::ContentAddress;
use crate::identity::{DeviceIdentity, PatientKey};
use crate::time::Timestamp;
use crate::units::is_valid_ucum_syntax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Scalar,
    Vector,
    Code,
    EventState,
    Waveform,
    String,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 6] = [
        MeasurementKind::Scalar,
        MeasurementKind::Vector,
        MeasurementKind::Code,
        MeasurementKind::EventState,
        MeasurementKind::Waveform,
        MeasurementKind::String,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MeasurementKind::Scalar => "scalar",
            MeasurementKind::Vector => "vector",
            MeasurementKind::Code => "code",
            MeasurementKind::EventState => "event_state",
            MeasurementKind::Waveform => "waveform",
            MeasurementKind::String => "string",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorComponent {
    pub label: String,
    pub magnitude: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementValue {
    Scalar { magnitude: f64, unit: String },
    Vector { components: Vec<VectorComponent> },
    Code { symbol: String },
    EventState { state_name: String, active: bool },
    Waveform { sample_rate_hz: f64, channel_labels: Vec<String>, samples: Vec<f64> },
    String { text: String },
}

impl MeasurementValue {
    pub fn kind(&self) -> MeasurementKind {
        match self {
            MeasurementValue::Scalar { .. } => MeasurementKind::Scalar,
            MeasurementValue::Vector { .. } => MeasurementKind::Vector,
            MeasurementValue::Code { .. } => MeasurementKind::Code,
            MeasurementValue::EventState { .. } => MeasurementKind::EventState,
            MeasurementValue::Waveform { .. } => MeasurementKind::Waveform,
            MeasurementValue::String { .. } => MeasurementKind::String,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalObservation {
    pub subject: PatientKey,
    pub device: DeviceIdentity,
    pub effective_time: Timestamp,
    pub kind: MeasurementKind,
    pub value: MeasurementValue,
    pub code_binding: String,
    pub provenance: ContentAddress,
    /// Set when a unit was not in the conversion table and was kept as sent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unnormalized: bool,
}

impl CanonicalObservation {
    /// Canonical wire bytes (compact JSON); the observation's content address is taken over these.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("observation serializes")
    }

    pub fn address(&self) -> ContentAddress {
        ContentAddress::of(&self.to_canonical_json())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    KindMismatch { kind: MeasurementKind, value: MeasurementKind },
    InvalidUnit(String),
    NonFiniteMagnitude,
    VectorTooShort(usize),
    SampleRateNotPositive,
    EmptyWaveform,
    EmptyField(&'static str),
    NonMonotoneTime { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KindMismatch { kind, value } => {
                write!(f, "kind/value mismatch: kind={kind}, value={value}")
            }
            Violation::InvalidUnit(u) => write!(f, "invalid UCUM unit {u:?}"),
            Violation::NonFiniteMagnitude => f.write_str("magnitude must be finite"),
            Violation::VectorTooShort(n) => write!(f, "vector length >= 2 (got {n})"),
            Violation::SampleRateNotPositive => f.write_str("sample_rate_hz > 0"),
            Violation::EmptyWaveform => f.write_str("waveform sample count >= 1"),
            Violation::EmptyField(name) => write!(f, "{name} must not be empty"),
            Violation::NonMonotoneTime { index } => {
                write!(f, "effective_time decreases at batch index {index}")
            }
        }
    }
}

fn check_magnitude(m: f64, unit: &str, out: &mut Vec<Violation>) {
    if !m.is_finite() {
        out.push(Violation::NonFiniteMagnitude);
    }
    if !is_valid_ucum_syntax(unit) {
        out.push(Violation::InvalidUnit(unit.to_string()));
    }
}

/// Returns every invariant violation; an empty list means the observation is valid.
pub fn validate_observation(obs: &CanonicalObservation) -> Vec<Violation> {
    let mut out = Vec::new();
    if obs.kind != obs.value.kind() {
        out.push(Violation::KindMismatch { kind: obs.kind, value: obs.value.kind() });
    }
    if obs.device.patient_id.is_empty() {
        out.push(Violation::EmptyField("device.patient_id"));
    }
    if obs.device.device_id.is_empty() {
        out.push(Violation::EmptyField("device.device_id"));
    }
    if obs.code_binding.is_empty() {
        out.push(Violation::EmptyField("code_binding"));
    }
    match &obs.value {
        MeasurementValue::Scalar { magnitude, unit } => check_magnitude(*magnitude, unit, &mut out),
        MeasurementValue::Vector { components } => {
            if components.len() < 2 {
                out.push(Violation::VectorTooShort(components.len()));
            }
            for c in components {
                check_magnitude(c.magnitude, &c.unit, &mut out);
            }
        }
        MeasurementValue::Code { symbol } => {
            if symbol.is_empty() {
                out.push(Violation::EmptyField("symbol"));
            }
        }
        MeasurementValue::EventState { state_name, .. } => {
            if state_name.is_empty() {
                out.push(Violation::EmptyField("state_name"));
            }
        }
        MeasurementValue::Waveform { sample_rate_hz, samples, .. } => {
            if !(*sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
                out.push(Violation::SampleRateNotPositive);
            }
            if samples.is_empty() {
                out.push(Violation::EmptyWaveform);
            }
            if samples.iter().any(|s| !s.is_finite()) {
                out.push(Violation::NonFiniteMagnitude);
            }
        }
        MeasurementValue::String { .. } => {}
    }
    out
}

/// Checks that effective times never decrease per device within one batch.
pub fn check_batch_order(batch: &[CanonicalObservation]) -> Vec<Violation> {
    let mut last: HashMap<&str, Timestamp> = HashMap::new();
    let mut out = Vec::new();
    for (i, o) in batch.iter().enumerate() {
        let prev = last.entry(o.device.device_id.as_str()).or_insert(o.effective_time);
        if o.effective_time < *prev {
            out.push(Violation::NonMonotoneTime { index: i });
        }
        *prev = o.effective_time;
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::digest::Digest32;

    pub fn glucose_reading() -> CanonicalObservation {
        CanonicalObservation {
            subject: PatientKey(Digest32::of(b"p")),
            device: DeviceIdentity {
                patient_id: "P1".into(),
                device_id: "GM1".into(),
                nomenclature_code: 160_184,
            },
            effective_time: Timestamp::from_ymd_hms(2021, 1, 1, 8, 0, 0).unwrap(),
            kind: MeasurementKind::Scalar,
            value: MeasurementValue::Scalar { magnitude: 96.0, unit: "mg/dL".into() },
            code_binding: "blood-glucose".into(),
            provenance: ContentAddress::of(b"raw"),
            unnormalized: false,
        }
    }

    #[test]
    fn well_formed_scalar_is_ok() {
        assert!(validate_observation(&glucose_reading()).is_empty());
    }

    #[test]
    fn kind_value_mismatch() {
        let mut o = glucose_reading();
        o.kind = MeasurementKind::Vector;
        let v = validate_observation(&o);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("kind/value mismatch"));
    }

    #[test]
    fn zero_sample_rate() {
        let mut o = glucose_reading();
        o.kind = MeasurementKind::Waveform;
        o.value = MeasurementValue::Waveform {
            sample_rate_hz: 0.0,
            channel_labels: vec![],
            samples: vec![0.1],
        };
        let v = validate_observation(&o);
        assert_eq!(v, vec![Violation::SampleRateNotPositive]);
        assert_eq!(v[0].to_string(), "sample_rate_hz > 0");
    }

    #[test]
    fn every_violation_is_reported() {
        let mut o = glucose_reading();
        o.kind = MeasurementKind::Vector;
        o.code_binding.clear();
        o.value = MeasurementValue::Scalar { magnitude: f64::NAN, unit: "mm Hg".into() };
        assert_eq!(validate_observation(&o).len(), 4);
    }

    #[test]
    fn wire_form_uses_snake_case_tags() {
        let o = glucose_reading();
        let v: serde_json::Value = serde_json::to_value(&o).unwrap();
        assert_eq!(v["kind"], "scalar");
        assert_eq!(v["value"]["scalar"]["unit"], "mg/dL");
        assert!(v.get("unnormalized").is_none());
        assert_eq!(v["effective_time"], "2021-01-01T08:00:00.000Z");
    }

    #[test]
    fn batch_order_per_device() {
        let a = glucose_reading();
        let mut b = a.clone();
        b.effective_time = a.effective_time.plus_millis(-1);
        assert_eq!(check_batch_order(&[a.clone(), a.clone()]), vec![]);
        assert_eq!(check_batch_order(&[a.clone(), b.clone()]).len(), 1);
        b.device.device_id = "other".into();
        assert!(check_batch_order(&[a, b]).is_empty());
    }
}
