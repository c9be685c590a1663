//! FHIR R4 JSON mapping for the supported subset (Patient, Device, Observation,
//! Bundle) and a read-only search API over ledger-recorded observations.

mod search;

use serde_json::{json, Map, Value};

pub use search::{
    capability_statement, DateBound, DatePrefix, Directory, DeviceEntry, FhirService, PatientEntry, SearchError,
    SearchQuery,
};

use crate::cas::ContentAddress;
use crate::digest::Digest32;
use crate::identity::{DeviceIdentity, PatientIdentity, PatientKey};
use crate::observation::{CanonicalObservation, MeasurementKind, MeasurementValue, VectorComponent};
use crate::template::DeviceTemplate;
use crate::time::Timestamp;

pub const UCUM_SYSTEM: &str = "http://unitsofmeasure.org";
pub const CODE_SYSTEM: &str = "urn:blockiot:code";
pub const CODE_SET_SYSTEM: &str = "urn:blockiot:code-set";
pub const NOMENCLATURE_SYSTEM: &str = "urn:iso:std:iso:11073:10101";
pub const PATIENT_KEY_SYSTEM: &str = "urn:blockiot:patient-key";
pub const PATIENT_ID_SYSTEM: &str = "urn:blockiot:patient-id";
pub const DEVICE_ID_SYSTEM: &str = "urn:blockiot:device-id";
pub const CAS_SOURCE_PREFIX: &str = "urn:blockiot:cas:";
pub const EXT_EVENT_ACTIVE: &str = "urn:blockiot:fhir:event-active";
pub const EXT_SAMPLE_RATE: &str = "urn:blockiot:fhir:sample-rate-hz";
pub const EXT_CHANNEL_LABEL: &str = "urn:blockiot:fhir:channel-label";
pub const UNNORMALIZED_NOTE: &str = "unit not in conversion table; value kept in the unit sent by the device";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("FHIR mapping error at {path}: {message}")]
pub struct FhirError {
    pub path: String,
    pub message: String,
}

fn err(path: &str, message: impl Into<String>) -> FhirError {
    FhirError { path: path.to_string(), message: message.into() }
}

/// Resource id of an observation: hex digest of its content address.
pub fn observation_id(obs: &CanonicalObservation) -> String {
    obs.address().digest().to_hex()
}

pub fn patient_id(key: &PatientKey) -> String {
    key.to_hex()
}

/// Stable id for a device: digest of the manufacturer patient and device ids.
pub fn device_id(identity: &DeviceIdentity) -> String {
    Digest32::of_parts([
        b"device\0".as_slice(),
        identity.patient_id.as_bytes(),
        b"\0",
        identity.device_id.as_bytes(),
    ])
    .to_hex()
}

fn quantity(value: f64, unit: &str) -> Value {
    json!({"value": value, "unit": unit, "system": UCUM_SYSTEM, "code": unit})
}

pub fn to_fhir_observation(obs: &CanonicalObservation) -> Value {
    let mut body = Map::new();
    body.insert("resourceType".into(), json!("Observation"));
    body.insert("id".into(), json!(observation_id(obs)));
    body.insert("meta".into(), json!({"source": format!("{CAS_SOURCE_PREFIX}{}", obs.provenance)}));
    body.insert("status".into(), json!("final"));
    body.insert(
        "code".into(),
        json!({
            "coding": [
                {"system": CODE_SYSTEM, "code": obs.code_binding},
                {"system": NOMENCLATURE_SYSTEM, "code": obs.device.nomenclature_code.to_string()},
            ],
            "text": obs.code_binding,
        }),
    );
    body.insert(
        "subject".into(),
        json!({
            "reference": format!("Patient/{}", patient_id(&obs.subject)),
            "identifier": {"system": PATIENT_ID_SYSTEM, "value": obs.device.patient_id},
        }),
    );
    body.insert(
        "device".into(),
        json!({
            "reference": format!("Device/{}", device_id(&obs.device)),
            "identifier": {"system": DEVICE_ID_SYSTEM, "value": obs.device.device_id},
        }),
    );
    body.insert("effectiveDateTime".into(), json!(obs.effective_time.to_string()));
    match &obs.value {
        MeasurementValue::Scalar { magnitude, unit } => {
            body.insert("valueQuantity".into(), quantity(*magnitude, unit));
        }
        MeasurementValue::Vector { components } => {
            let comps: Vec<Value> = components
                .iter()
                .map(|c| {
                    json!({
                        "code": {
                            "coding": [{"system": CODE_SYSTEM, "code": format!("{}/{}", obs.code_binding, c.label)}],
                            "text": c.label,
                        },
                        "valueQuantity": quantity(c.magnitude, &c.unit),
                    })
                })
                .collect();
            body.insert("component".into(), Value::Array(comps));
        }
        MeasurementValue::Code { symbol } => {
            body.insert(
                "valueCodeableConcept".into(),
                json!({"coding": [{"system": CODE_SET_SYSTEM, "code": symbol}], "text": symbol}),
            );
        }
        MeasurementValue::EventState { state_name, active } => {
            body.insert(
                "valueCodeableConcept".into(),
                json!({
                    "extension": [{"url": EXT_EVENT_ACTIVE, "valueBoolean": active}],
                    "coding": [{"system": CODE_SET_SYSTEM, "code": state_name}],
                    "text": state_name,
                }),
            );
        }
        MeasurementValue::Waveform { sample_rate_hz, channel_labels, samples } => {
            let data: Vec<String> = samples.iter().map(|s| format!("{s}")).collect();
            let mut ext = vec![json!({"url": EXT_SAMPLE_RATE, "valueDecimal": sample_rate_hz})];
            ext.extend(channel_labels.iter().map(|l| json!({"url": EXT_CHANNEL_LABEL, "valueString": l})));
            body.insert(
                "valueSampledData".into(),
                json!({
                    "extension": ext,
                    "origin": {"value": 0},
                    "period": 1000.0 / sample_rate_hz,
                    "dimensions": channel_labels.len().max(1),
                    "data": data.join(" "),
                }),
            );
        }
        MeasurementValue::String { text } => {
            body.insert("valueString".into(), json!(text));
        }
    }
    if obs.unnormalized {
        body.insert("note".into(), json!([{"text": UNNORMALIZED_NOTE}]));
    }
    Value::Object(body)
}

fn get<'a>(v: &'a Value, path: &str) -> Result<&'a Value, FhirError> {
    let mut cur = v;
    for seg in path.split('.') {
        cur = match seg.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(seg),
        }
        .ok_or_else(|| err(path, "missing"))?;
    }
    Ok(cur)
}

fn get_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, FhirError> {
    get(v, path)?.as_str().ok_or_else(|| err(path, "expected a string"))
}

fn get_f64(v: &Value, path: &str) -> Result<f64, FhirError> {
    get(v, path)?.as_f64().ok_or_else(|| err(path, "expected a number"))
}

fn coding_code<'a>(concept: &'a Value, system: &str, path: &str) -> Result<&'a str, FhirError> {
    concept
        .get("coding")
        .and_then(Value::as_array)
        .and_then(|cs| cs.iter().find(|c| c.get("system").and_then(Value::as_str) == Some(system)))
        .and_then(|c| c.get("code"))
        .and_then(Value::as_str)
        .ok_or_else(|| err(path, format!("no coding with system {system}")))
}

fn extension<'a>(v: &'a Value, url: &str) -> impl Iterator<Item = &'a Value> + 'a {
    let url = url.to_string();
    v.get("extension")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter(move |e| e.get("url").and_then(Value::as_str) == Some(url.as_str()))
}

fn parse_quantity(q: &Value, path: &str) -> Result<(f64, String), FhirError> {
    Ok((get_f64(q, "value").map_err(|e| err(path, e.message))?, get_str(q, "code").map_err(|e| err(path, e.message))?.to_string()))
}

/// Inverse of [`to_fhir_observation`] for resources this module produced.
pub fn from_fhir_observation(v: &Value) -> Result<CanonicalObservation, FhirError> {
    if get_str(v, "resourceType")? != "Observation" {
        return Err(err("resourceType", "not an Observation"));
    }
    let code_binding = coding_code(get(v, "code")?, CODE_SYSTEM, "code")?.to_string();
    let nomenclature_code: u32 = coding_code(get(v, "code")?, NOMENCLATURE_SYSTEM, "code")?
        .parse()
        .map_err(|_| err("code", "nomenclature code is not numeric"))?;
    let subject_ref = get_str(v, "subject.reference")?;
    let subject: PatientKey = subject_ref
        .strip_prefix("Patient/")
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| err("subject.reference", "expected Patient/<key>"))?;
    let device = DeviceIdentity {
        patient_id: get_str(v, "subject.identifier.value")?.to_string(),
        device_id: get_str(v, "device.identifier.value")?.to_string(),
        nomenclature_code,
    };
    let effective_time: Timestamp =
        get_str(v, "effectiveDateTime")?.parse().map_err(|_| err("effectiveDateTime", "invalid dateTime"))?;
    let provenance: ContentAddress = get_str(v, "meta.source")?
        .strip_prefix(CAS_SOURCE_PREFIX)
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| err("meta.source", "expected a content address"))?;

    let value = if let Some(q) = v.get("valueQuantity") {
        let (magnitude, unit) = parse_quantity(q, "valueQuantity")?;
        MeasurementValue::Scalar { magnitude, unit }
    } else if let Some(comps) = v.get("component") {
        let comps = comps.as_array().ok_or_else(|| err("component", "expected an array"))?;
        let components = comps
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let path = format!("component.{i}");
                let (magnitude, unit) = parse_quantity(get(c, "valueQuantity").map_err(|e| err(&path, e.message))?, &path)?;
                let label = get_str(c, "code.text").map_err(|e| err(&path, e.message))?.to_string();
                Ok(VectorComponent { label, magnitude, unit })
            })
            .collect::<Result<Vec<_>, FhirError>>()?;
        MeasurementValue::Vector { components }
    } else if let Some(cc) = v.get("valueCodeableConcept") {
        let symbol = coding_code(cc, CODE_SET_SYSTEM, "valueCodeableConcept")?.to_string();
        match extension(cc, EXT_EVENT_ACTIVE).next() {
            Some(e) => MeasurementValue::EventState {
                state_name: symbol,
                active: e
                    .get("valueBoolean")
                    .and_then(Value::as_bool)
                    .ok_or_else(|| err("valueCodeableConcept.extension", "expected valueBoolean"))?,
            },
            None => MeasurementValue::Code { symbol },
        }
    } else if let Some(sd) = v.get("valueSampledData") {
        let sample_rate_hz = extension(sd, EXT_SAMPLE_RATE)
            .next()
            .and_then(|e| e.get("valueDecimal"))
            .and_then(Value::as_f64)
            .ok_or_else(|| err("valueSampledData.extension", "missing sample rate"))?;
        let channel_labels = extension(sd, EXT_CHANNEL_LABEL)
            .map(|e| e.get("valueString").and_then(Value::as_str).map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| err("valueSampledData.extension", "channel label must be a string"))?;
        let samples = get_str(sd, "data")?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| err("valueSampledData.data", format!("bad sample {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        MeasurementValue::Waveform { sample_rate_hz, channel_labels, samples }
    } else if let Some(s) = v.get("valueString") {
        MeasurementValue::String { text: s.as_str().ok_or_else(|| err("valueString", "expected a string"))?.to_string() }
    } else {
        return Err(err("value[x]", "no supported value element"));
    };
    let unnormalized = v
        .get("note")
        .and_then(Value::as_array)
        .is_some_and(|n| n.iter().any(|x| x.get("text").and_then(Value::as_str) == Some(UNNORMALIZED_NOTE)));
    Ok(CanonicalObservation {
        subject,
        device,
        effective_time,
        kind: value.kind(),
        value,
        code_binding,
        provenance,
        unnormalized,
    })
}

/// Structural check for Observation bodies: status, code, subject, effective time
/// and a value element consistent with the measurement kind.
pub fn check_observation_structure(v: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let nonempty_str = |p: &str| get_str(v, p).map(|s| !s.is_empty()).unwrap_or(false);
    if get_str(v, "resourceType").ok() != Some("Observation") {
        out.push("resourceType must be Observation".to_string());
    }
    if !nonempty_str("status") {
        out.push("status is required".into());
    }
    let code_ok = v.get("code").is_some_and(|c| {
        c.get("text").and_then(Value::as_str).is_some_and(|t| !t.is_empty())
            || c.get("coding").and_then(Value::as_array).is_some_and(|a| !a.is_empty())
    });
    if !code_ok {
        out.push("code is required".into());
    }
    if !get_str(v, "subject.reference").is_ok_and(|r| r.starts_with("Patient/") && r.len() > 8) {
        out.push("subject reference is required".into());
    }
    if !get_str(v, "effectiveDateTime").is_ok_and(|s| s.parse::<Timestamp>().is_ok()) {
        out.push("effectiveDateTime is required".into());
    }
    let values = ["valueQuantity", "valueCodeableConcept", "valueSampledData", "valueString", "component"];
    let present: Vec<_> = values.iter().filter(|k| v.get(**k).is_some()).collect();
    match present.as_slice() {
        [] => out.push("a value element is required".into()),
        [one] => {
            let ok = match **one {
                "valueQuantity" => get_f64(&v[**one], "value").is_ok() && get_str(&v[**one], "code").is_ok(),
                "component" => v[**one].as_array().is_some_and(|a| {
                    !a.is_empty() && a.iter().all(|c| c.get("valueQuantity").is_some_and(|q| get_f64(q, "value").is_ok()))
                }),
                "valueSampledData" => get_str(&v[**one], "data").is_ok() && get_f64(&v[**one], "period").is_ok(),
                "valueString" => v[**one].is_string(),
                _ => v[**one].get("coding").is_some() || v[**one].get("text").is_some(),
            };
            if !ok {
                out.push(format!("{} is malformed", one));
            }
        }
        _ => out.push("more than one value element".into()),
    }
    out
}

/// Kind a resource maps back to, without parsing the whole body.
pub fn observation_kind(v: &Value) -> Option<MeasurementKind> {
    from_fhir_observation(v).ok().map(|o| o.kind)
}

pub fn to_fhir_device(template: &DeviceTemplate, identity: &DeviceIdentity) -> Value {
    let dc = &template.device_config;
    let mut body = Map::new();
    body.insert("resourceType".into(), json!("Device"));
    body.insert("id".into(), json!(device_id(identity)));
    body.insert(
        "identifier".into(),
        json!([{"system": DEVICE_ID_SYSTEM, "value": identity.device_id}]),
    );
    body.insert("manufacturer".into(), json!(dc.manufacturer));
    body.insert("serialNumber".into(), json!(dc.serial_number));
    body.insert("modelNumber".into(), json!(dc.model));
    body.insert("deviceName".into(), json!([{"name": dc.model, "type": "model-name"}]));
    body.insert(
        "type".into(),
        json!({
            "coding": [{"system": NOMENCLATURE_SYSTEM, "code": identity.nomenclature_code.to_string()}],
            "text": dc.specialization,
        }),
    );
    body.insert(
        "version".into(),
        json!([
            {"type": {"text": "firmware"}, "value": dc.firmware},
            {"type": {"text": "hardware"}, "value": dc.hardware},
            {"type": {"text": "software"}, "value": dc.software},
        ]),
    );
    if let Some(reg) = &dc.regulatory {
        body.insert("property".into(), json!([{"type": {"text": "regulatory"}, "valueCode": [{"text": reg}]}]));
    }
    Value::Object(body)
}

pub fn to_fhir_patient(key: &PatientKey, identity: Option<&PatientIdentity>, manufacturer_ids: &[String]) -> Value {
    let mut identifiers = vec![json!({"system": PATIENT_KEY_SYSTEM, "value": key.to_hex()})];
    identifiers.extend(manufacturer_ids.iter().map(|id| json!({"system": PATIENT_ID_SYSTEM, "value": id})));
    let mut body = Map::new();
    body.insert("resourceType".into(), json!("Patient"));
    body.insert("id".into(), json!(patient_id(key)));
    body.insert("identifier".into(), Value::Array(identifiers));
    if let Some(p) = identity {
        body.insert("name".into(), json!([{"family": p.last_name, "given": [p.first_name]}]));
        body.insert("birthDate".into(), json!(p.date_of_birth.format("%Y-%m-%d").to_string()));
    }
    Value::Object(body)
}
