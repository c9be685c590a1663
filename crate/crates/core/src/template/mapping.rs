use std::collections::BTreeSet;

use serde_json::{Map, Value};

use super::{DeviceTemplate, ParameterRule};
use crate::canonical::canonical_json;
use crate::cas::ContentAddress;
use crate::identity::{DeviceIdentity, PatientKey};
use crate::observation::{CanonicalObservation, MeasurementKind, MeasurementValue, VectorComponent};
use crate::time::Timestamp;
use crate::units::normalize_unit;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MappingError {
    #[error("identity error: {0}")]
    Identity(String),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct FieldError {
    pub source_key: String,
    pub target_code: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingContext {
    pub received_at: Timestamp,
    pub subject: PatientKey,
    /// Overrides the template's clock accuracy as the largest accepted device/gateway clock gap.
    pub clock_skew_budget_ms: Option<u64>,
}

/// Result of translating one payload. Every payload key lands in exactly one
/// of `identity_keys`, `consumed_keys` or `unmatched_keys`, and every rule
/// whose keys appear yields exactly one observation or one field error.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingOutcome {
    pub device: DeviceIdentity,
    pub provenance: ContentAddress,
    pub effective_time: Timestamp,
    pub observations: Vec<CanonicalObservation>,
    pub field_errors: Vec<FieldError>,
    pub identity_keys: Vec<String>,
    pub consumed_keys: Vec<String>,
    pub unmatched_keys: Vec<String>,
}

fn id_value(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn extract_identity(
    template: &DeviceTemplate,
    raw: &Map<String, Value>,
) -> Result<(String, String), MappingError> {
    let ids = &template.identifiers;
    let pid = id_value(raw.get(&ids.patient_id_key)).ok_or_else(|| {
        MappingError::Identity(format!("patient id key {:?} absent or empty", ids.patient_id_key))
    })?;
    let did = id_value(raw.get(&ids.device_id_key)).ok_or_else(|| {
        MappingError::Identity(format!("device id key {:?} absent or empty", ids.device_id_key))
    })?;
    Ok((pid, did))
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|f| f.is_finite())
}

fn in_code_set(rule: &ParameterRule, symbol: &str) -> Result<(), String> {
    match &rule.code_set {
        Some(set) if !set.iter().any(|s| s == symbol) => {
            Err(format!("symbol {symbol:?} not in code set [{}]", set.join(", ")))
        }
        _ => Ok(()),
    }
}

/// Interprets one raw payload value under a rule's declared kind. Units are
/// those declared by the rule; normalization happens in [`map_payload`].
pub fn classify_value(rule: &ParameterRule, raw: &Value) -> Result<MeasurementValue, String> {
    let unit = || rule.unit.clone().unwrap_or_default();
    match rule.kind {
        MeasurementKind::Scalar => {
            let magnitude = as_number(raw).ok_or_else(|| format!("expected a number, got {raw}"))?;
            Ok(MeasurementValue::Scalar { magnitude, unit: unit() })
        }
        MeasurementKind::Vector => {
            let layout = rule.vector_layout.as_deref().unwrap_or_default();
            let items = raw.as_array().ok_or_else(|| format!("expected an array, got {raw}"))?;
            if items.len() != layout.len() {
                return Err(format!(
                    "vector has {} element(s), layout declares {}",
                    items.len(),
                    layout.len()
                ));
            }
            let components = layout
                .iter()
                .zip(items)
                .map(|(label, v)| {
                    let magnitude =
                        as_number(v).ok_or_else(|| format!("component {label:?}: expected a number, got {v}"))?;
                    Ok(VectorComponent { label: label.clone(), magnitude, unit: unit() })
                })
                .collect::<Result<_, String>>()?;
            Ok(MeasurementValue::Vector { components })
        }
        MeasurementKind::Code => {
            let symbol = raw.as_str().ok_or_else(|| format!("expected a code symbol, got {raw}"))?;
            in_code_set(rule, symbol)?;
            Ok(MeasurementValue::Code { symbol: symbol.to_string() })
        }
        MeasurementKind::EventState => {
            let (state_name, active) = match raw {
                Value::String(s) if !s.is_empty() => (s.clone(), true),
                Value::Bool(b) => (rule.target_code.clone(), *b),
                Value::Object(o) => {
                    let name = o
                        .get("state_name")
                        .or_else(|| o.get("state"))
                        .and_then(Value::as_str)
                        .filter(|s| !s.is_empty())
                        .ok_or("event object needs a state_name")?;
                    let active = o.get("active").map_or(Some(true), Value::as_bool).ok_or("active must be a boolean")?;
                    (name.to_string(), active)
                }
                other => return Err(format!("expected an event state, got {other}")),
            };
            in_code_set(rule, &state_name)?;
            Ok(MeasurementValue::EventState { state_name, active })
        }
        MeasurementKind::Waveform => {
            let (rate, samples, labels) = match raw {
                Value::Array(_) => (rule.sample_rate_hz, raw, None),
                Value::Object(o) => (
                    o.get("sample_rate_hz").and_then(as_number).or(rule.sample_rate_hz),
                    o.get("samples").ok_or("waveform object needs samples")?,
                    o.get("channel_labels"),
                ),
                other => return Err(format!("expected waveform samples, got {other}")),
            };
            let sample_rate_hz = rate.ok_or("waveform sample rate unknown")?;
            if sample_rate_hz <= 0.0 {
                return Err("sample_rate_hz > 0".into());
            }
            let samples = samples
                .as_array()
                .ok_or("samples must be an array")?
                .iter()
                .map(|v| as_number(v).ok_or_else(|| format!("sample {v} is not a number")))
                .collect::<Result<Vec<_>, _>>()?;
            if samples.is_empty() {
                return Err("waveform needs at least one sample".into());
            }
            let channel_labels = match labels {
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| v.as_str().map(str::to_string).ok_or("channel labels must be text"))
                    .collect::<Result<Vec<_>, _>>()?,
                Some(_) => return Err("channel labels must be an array".into()),
                None => rule.channel_labels.clone().unwrap_or_default(),
            };
            Ok(MeasurementValue::Waveform { sample_rate_hz, channel_labels, samples })
        }
        MeasurementKind::String => {
            let text = raw.as_str().ok_or_else(|| format!("expected text, got {raw}"))?;
            Ok(MeasurementValue::String { text: text.to_string() })
        }
    }
}

/// Rewrites scalar and vector units to canonical form; returns false if any unit was unknown.
fn normalize_value(value: &mut MeasurementValue) -> bool {
    let mut all = true;
    let mut fix = |m: &mut f64, u: &mut String| match normalize_unit(*m, u) {
        Ok((nm, nu)) => {
            *m = nm;
            *u = nu.to_string();
        }
        Err(_) => all = false,
    };
    match value {
        MeasurementValue::Scalar { magnitude, unit } => fix(magnitude, unit),
        MeasurementValue::Vector { components } => {
            for c in components {
                fix(&mut c.magnitude, &mut c.unit);
            }
        }
        _ => {}
    }
    all
}

fn device_time(v: &Value) -> Option<Timestamp> {
    match v {
        Value::String(s) => s.parse().ok(),
        Value::Number(n) => n.as_i64().map(Timestamp::from_millis),
        _ => None,
    }
}

/// Translates one proprietary payload into canonical observations.
///
/// Field-level failures do not stop the other fields; only a missing or empty
/// identifier fails the whole payload.
pub fn map_payload(
    template: &DeviceTemplate,
    raw: &Map<String, Value>,
    ctx: &MappingContext,
) -> Result<MappingOutcome, MappingError> {
    let (patient_id, device_id) = extract_identity(template, raw)?;
    let device = DeviceIdentity {
        patient_id,
        device_id,
        nomenclature_code: template.identifiers.nomenclature_code,
    };
    let provenance = ContentAddress::of(&canonical_json(&Value::Object(raw.clone())));

    let mut identity_keys = vec![
        template.identifiers.patient_id_key.clone(),
        template.identifiers.device_id_key.clone(),
    ];
    let tp = &template.device_config.time_properties;
    let mut effective_time = ctx.received_at;
    if let Some(ts_key) = &tp.timestamp_key {
        if let Some(v) = raw.get(ts_key) {
            identity_keys.push(ts_key.clone());
            let budget = ctx.clock_skew_budget_ms.unwrap_or(tp.accuracy_ms);
            if let Some(t) = device_time(v).filter(|t| t.abs_diff_millis(ctx.received_at) <= budget) {
                effective_time = t;
            }
        }
    }

    let mut consumed = BTreeSet::new();
    let mut observations = Vec::new();
    let mut field_errors = Vec::new();
    for rule in &template.parameter_map {
        let keys = rule.input_keys();
        let present: Vec<&str> = keys.iter().copied().filter(|k| raw.contains_key(*k)).collect();
        if present.is_empty() {
            continue;
        }
        consumed.extend(present.iter().map(|k| k.to_string()));
        let value = if rule.component_keys.is_some() {
            if present.len() != keys.len() {
                let missing: Vec<&str> = keys.iter().copied().filter(|k| !raw.contains_key(*k)).collect();
                Err(format!("missing vector component key(s) {}", missing.join(", ")))
            } else {
                let gathered = Value::Array(keys.iter().map(|k| raw[*k].clone()).collect());
                classify_value(rule, &gathered)
            }
        } else {
            classify_value(rule, &raw[rule.source_key.as_str()])
        };
        match value {
            Ok(mut value) => {
                let normalized = normalize_value(&mut value);
                observations.push(CanonicalObservation {
                    subject: ctx.subject,
                    device: device.clone(),
                    effective_time,
                    kind: value.kind(),
                    value,
                    code_binding: rule.target_code.clone(),
                    provenance,
                    unnormalized: !normalized,
                });
            }
            Err(message) => field_errors.push(FieldError {
                source_key: rule.source_key.clone(),
                target_code: rule.target_code.clone(),
                message,
            }),
        }
    }

    let unmatched_keys = raw
        .keys()
        .filter(|k| !identity_keys.contains(k) && !consumed.contains(*k))
        .cloned()
        .collect();
    Ok(MappingOutcome {
        device,
        provenance,
        effective_time,
        observations,
        field_errors,
        identity_keys,
        consumed_keys: consumed.into_iter().collect(),
        unmatched_keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest32;
    use crate::template::tests::bp_template;
    use crate::template::{load_template, DeviceTemplate};
    use proptest::prelude::*;
    use serde_json::json;

    fn ctx() -> MappingContext {
        MappingContext {
            received_at: Timestamp::from_ymd_hms(2021, 1, 3, 9, 0, 0).unwrap(),
            subject: PatientKey(Digest32::of(b"ada")),
            clock_skew_budget_ms: None,
        }
    }

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    fn glucose_template() -> DeviceTemplate {
        let doc = json!({
            "identifiers": {"patient_id_key": "pid", "device_id_key": "did", "nomenclature_code": 160184},
            "device_config": {
                "specialization": "glucose", "manufacturer": "Acme", "model": "G1", "serial_number": "1",
                "firmware": "2.0", "hardware": "", "software": "",
                "time_properties": {"clock_type": "rtc", "synchronization": "none", "resolution_ms": 1000, "accuracy_ms": 1000}
            },
            "parameter_map": [
                {"source_key": "bg", "target_code": "blood-glucose", "kind": "scalar", "unit": "mg/dL"},
                {"source_key": "ctx", "target_code": "meal-context", "kind": "code",
                 "code_set": ["PREPRANDIAL", "FASTING", "CASUAL", "BEDTIME"]},
                {"source_key": "st", "target_code": "device-status", "kind": "event_state"},
                {"source_key": "zone", "target_code": "exercise-zone", "kind": "string"},
                {"source_key": "w", "target_code": "weight", "kind": "scalar", "unit": "[lb_av]"},
                {"source_key": "ecg", "target_code": "ecg", "kind": "waveform", "sample_rate_hz": 250.0,
                 "channel_labels": ["lead-II"]}
            ]
        });
        load_template(&serde_json::to_vec(&doc).unwrap()).unwrap()
    }

    #[test]
    fn blood_pressure_vector() {
        let raw = obj(json!({"sys": 102, "dia": 51, "map": 76, "pid": "P1", "did": "BP9"}));
        let out = map_payload(&bp_template(), &raw, &ctx()).unwrap();
        assert_eq!(out.observations.len(), 1);
        let o = &out.observations[0];
        assert_eq!(o.kind, MeasurementKind::Vector);
        let expect = [("systolic", 102.0), ("diastolic", 51.0), ("mean", 76.0)];
        match &o.value {
            MeasurementValue::Vector { components } => {
                assert_eq!(components.len(), 3);
                for (c, (l, m)) in components.iter().zip(expect) {
                    assert_eq!((c.label.as_str(), c.magnitude, c.unit.as_str()), (l, m, "mm[Hg]"));
                }
            }
            v => panic!("{v:?}"),
        }
        assert_eq!(o.device.device_id, "BP9");
        assert_eq!(o.provenance, ContentAddress::of(&canonical_json(&Value::Object(raw))));
        assert!(out.unmatched_keys.is_empty());
    }

    #[test]
    fn glucose_scalar_and_code() {
        let raw = obj(json!({"bg": 96, "ctx": "FASTING", "pid": "P1", "did": "GM1"}));
        let out = map_payload(&glucose_template(), &raw, &ctx()).unwrap();
        let values: Vec<_> = out.observations.iter().map(|o| o.value.clone()).collect();
        assert_eq!(
            values,
            vec![
                MeasurementValue::Scalar { magnitude: 96.0, unit: "mg/dL".into() },
                MeasurementValue::Code { symbol: "FASTING".into() },
            ]
        );
    }

    #[test]
    fn units_are_normalized() {
        let raw = obj(json!({"w": 150, "pid": "P1", "did": "S1"}));
        let out = map_payload(&glucose_template(), &raw, &ctx()).unwrap();
        match &out.observations[0].value {
            MeasurementValue::Scalar { magnitude, unit } => {
                assert_eq!(unit, "kg");
                assert!((magnitude - 68.0388555).abs() < 1e-9);
            }
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn nothing_matched_reports_every_key() {
        let raw = obj(json!({"foo": 1, "bar": 2, "pid": "P1", "did": "GM1"}));
        let out = map_payload(&glucose_template(), &raw, &ctx()).unwrap();
        assert!(out.observations.is_empty());
        assert_eq!(out.unmatched_keys, vec!["bar", "foo"]);
    }

    #[test]
    fn field_errors_do_not_block_other_fields() {
        let raw = obj(json!({"bg": "high", "ctx": "BRUNCH", "zone": "Hill Climb", "pid": "P1", "did": "GM1"}));
        let out = map_payload(&glucose_template(), &raw, &ctx()).unwrap();
        assert_eq!(out.field_errors.len(), 2);
        assert_eq!(out.observations.len(), 1);
        assert_eq!(out.observations[0].value, MeasurementValue::String { text: "Hill Climb".into() });
    }

    #[test]
    fn identity_errors() {
        let t = bp_template();
        assert_eq!(
            extract_identity(&t, &obj(json!({"pid": "P1", "did": "BP9"}))).unwrap(),
            ("P1".to_string(), "BP9".to_string())
        );
        assert!(extract_identity(&t, &obj(json!({"pid": "P1"}))).is_err());
        assert!(extract_identity(&t, &obj(json!({"pid": "", "did": "BP9"}))).is_err());
        assert!(map_payload(&t, &obj(json!({"sys": 1, "pid": "P1"})), &ctx()).is_err());
    }

    #[test]
    fn classify_event_string_code() {
        let t = glucose_template();
        let st = &t.parameter_map[2];
        assert_eq!(
            classify_value(st, &json!("battery_low")).unwrap(),
            MeasurementValue::EventState { state_name: "battery_low".into(), active: true }
        );
        assert_eq!(
            classify_value(st, &json!(false)).unwrap(),
            MeasurementValue::EventState { state_name: "device-status".into(), active: false }
        );
        assert_eq!(
            classify_value(&t.parameter_map[3], &json!("Hill Climb")).unwrap(),
            MeasurementValue::String { text: "Hill Climb".into() }
        );
        assert!(classify_value(&t.parameter_map[1], &json!("BRUNCH")).is_err());
    }

    #[test]
    fn vector_length_must_match_layout() {
        let t = bp_template();
        let mut rule = t.parameter_map[0].clone();
        rule.component_keys = None;
        assert!(classify_value(&rule, &json!([120, 80])).is_err());
        assert!(classify_value(&rule, &json!([120, 80, 93])).is_ok());
        let raw = obj(json!({"sys": 120, "dia": 80, "pid": "P1", "did": "BP9"}));
        let out = map_payload(&t, &raw, &ctx()).unwrap();
        assert_eq!(out.field_errors.len(), 1);
        assert!(out.field_errors[0].message.contains("map"));
    }

    #[test]
    fn waveform_forms() {
        let t = glucose_template();
        let rule = &t.parameter_map[5];
        assert_eq!(
            classify_value(rule, &json!([0.1, 0.5, -0.2])).unwrap(),
            MeasurementValue::Waveform {
                sample_rate_hz: 250.0,
                channel_labels: vec!["lead-II".into()],
                samples: vec![0.1, 0.5, -0.2]
            }
        );
        let v = classify_value(
            rule,
            &json!({"sample_rate_hz": 500, "samples": [1, 2], "channel_labels": ["p", "q", "r", "s", "t"]}),
        )
        .unwrap();
        assert!(matches!(v, MeasurementValue::Waveform { sample_rate_hz, ref channel_labels, .. }
            if sample_rate_hz == 500.0 && channel_labels.len() == 5));
        assert!(classify_value(rule, &json!({"sample_rate_hz": 0, "samples": [1]})).is_err());
        assert!(classify_value(rule, &json!([])).is_err());
    }

    #[test]
    fn device_time_within_budget_is_used() {
        let t = bp_template(); // accuracy_ms = 60_000, timestamp key "ts"
        let c = ctx();
        let near = c.received_at.plus_millis(-30_000);
        let raw = obj(json!({"sys": 1, "dia": 2, "map": 3, "pid": "P1", "did": "BP9", "ts": near.to_string()}));
        assert_eq!(map_payload(&t, &raw, &c).unwrap().effective_time, near);
        let far = c.received_at.plus_millis(-3_600_000);
        let raw = obj(json!({"sys": 1, "dia": 2, "map": 3, "pid": "P1", "did": "BP9", "ts": far.millis()}));
        let out = map_payload(&t, &raw, &c).unwrap();
        assert_eq!(out.effective_time, c.received_at);
        assert!(out.unmatched_keys.is_empty());
        let wide = MappingContext { clock_skew_budget_ms: Some(u64::MAX), ..c };
        assert_eq!(map_payload(&t, &raw, &wide).unwrap().effective_time, far);
    }

    fn payload_strategy() -> impl Strategy<Value = Map<String, Value>> {
        let keys = prop::sample::select(vec!["bg", "ctx", "st", "zone", "w", "ecg", "junk", "x"]);
        let vals = prop_oneof![
            any::<i32>().prop_map(|i| json!(i)),
            prop::sample::select(vec!["FASTING", "BRUNCH", "battery_low", ""]).prop_map(|s| json!(s)),
            any::<bool>().prop_map(|b| json!(b)),
            prop::collection::vec(-5.0f64..5.0, 0..4).prop_map(|v| json!(v)),
        ];
        prop::collection::btree_map(keys, vals, 0..8).prop_map(|m| {
            let mut out: Map<String, Value> = m.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            out.insert("pid".into(), json!("P1"));
            out.insert("did".into(), json!("GM1"));
            out
        })
    }

    proptest! {
        #[test]
        fn mapping_accounts_for_every_key_and_rule(raw in payload_strategy()) {
            let t = glucose_template();
            let out = map_payload(&t, &raw, &ctx()).unwrap();
            let matched_rules = t.parameter_map.iter()
                .filter(|r| r.input_keys().iter().any(|k| raw.contains_key(*k)))
                .count();
            prop_assert_eq!(out.observations.len() + out.field_errors.len(), matched_rules);
            prop_assert_eq!(
                out.identity_keys.len() + out.consumed_keys.len() + out.unmatched_keys.len(),
                raw.len()
            );
            for o in &out.observations {
                let rule = t.parameter_map.iter().find(|r| r.target_code == o.code_binding).unwrap();
                prop_assert_eq!(o.value.kind(), rule.kind);
                prop_assert_eq!(o.kind, rule.kind);
            }
            prop_assert_eq!(map_payload(&t, &raw, &ctx()).unwrap(), out);
        }
    }
}
