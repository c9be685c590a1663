use serde::{Deserialize, Serialize};

use super::{AlertEvent, ContractKind, Observed, Severity};
use crate::identity::PatientKey;
use crate::observation::MeasurementValue;
use crate::template::GuidelineParam;
use crate::units::normalize_unit;

fn default_heart_rate_codes() -> Vec<String> {
    vec!["heart-rate".into(), "pulse-rate".into()]
}

fn default_irregular_code() -> String {
    "pulse_irregular".into()
}

fn default_fall_code() -> String {
    "fall".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhythmBounds {
    pub min_bpm: f64,
    pub max_bpm: f64,
    #[serde(default)]
    pub irregularity_flag: bool,
    #[serde(default = "default_heart_rate_codes")]
    pub heart_rate_codes: Vec<String>,
    #[serde(default = "default_irregular_code")]
    pub irregular_code: String,
}

impl RhythmBounds {
    pub fn problems(&self) -> Vec<String> {
        if self.min_bpm.is_finite() && self.max_bpm.is_finite() && self.min_bpm < self.max_bpm {
            Vec::new()
        } else {
            vec![format!("rhythm bounds [{}, {}] must satisfy min < max", self.min_bpm, self.max_bpm)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationSpec {
    pub contacts: Vec<String>,
    #[serde(default = "default_fall_code")]
    pub fall_code: String,
}

/// Numeric readings carried by an observation as `(code, value, unit)`. Vector
/// components are addressed as `code/label`; event states read as 1 or 0.
pub fn numeric_points(o: &Observed) -> Vec<(String, f64, Option<String>)> {
    let code = &o.obs.code_binding;
    match &o.obs.value {
        MeasurementValue::Scalar { magnitude, unit } => vec![(code.clone(), *magnitude, Some(unit.clone()))],
        MeasurementValue::Vector { components } => components
            .iter()
            .map(|c| (format!("{code}/{}", c.label), c.magnitude, Some(c.unit.clone())))
            .collect(),
        MeasurementValue::EventState { active, .. } => vec![(code.clone(), if *active { 1.0 } else { 0.0 }, None)],
        _ => Vec::new(),
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// One `alert` when any heart-rate reading leaves `[min_bpm, max_bpm]` or, with the
/// irregularity flag set, any active irregular-pulse event is present.
pub fn eval_adverse_condition(observations: &[Observed], spec: &RhythmBounds, patient: PatientKey) -> Option<AlertEvent> {
    let mut triggers: Vec<&Observed> = Vec::new();
    let mut reasons: Vec<String> = Vec::new();
    for o in observations {
        let code = &o.obs.code_binding;
        match &o.obs.value {
            MeasurementValue::Scalar { magnitude, .. } if spec.heart_rate_codes.contains(code) => {
                if *magnitude > spec.max_bpm {
                    triggers.push(o);
                    reasons.push(format!("upper bound exceeded: {} > {}", fmt_num(*magnitude), fmt_num(spec.max_bpm)));
                } else if *magnitude < spec.min_bpm {
                    triggers.push(o);
                    reasons.push(format!("lower bound exceeded: {} < {}", fmt_num(*magnitude), fmt_num(spec.min_bpm)));
                }
            }
            MeasurementValue::EventState { active: true, .. }
                if spec.irregularity_flag && *code == spec.irregular_code =>
            {
                triggers.push(o);
                reasons.push("irregular pulse reported".into());
            }
            _ => {}
        }
    }
    if triggers.is_empty() {
        return None;
    }
    reasons.dedup();
    Some(AlertEvent::from_triggers(
        Severity::Alert,
        patient,
        ContractKind::AdverseCondition,
        &triggers,
        reasons.join("; "),
    ))
}

/// One `emergency` per distinct active fall observation (deduplicated by provenance).
pub fn eval_emergency(observations: &[Observed], spec: &EscalationSpec, patient: PatientKey) -> Vec<AlertEvent> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for o in observations {
        if o.obs.code_binding != spec.fall_code || !matches!(o.obs.value, MeasurementValue::EventState { active: true, .. }) {
            continue;
        }
        if !seen.insert(o.obs.provenance) {
            continue;
        }
        let mut ev = AlertEvent::from_triggers(
            Severity::Emergency,
            patient,
            ContractKind::EmergencyAlert,
            &[o],
            format!("fall detected at {}", o.obs.effective_time),
        );
        ev.escalation_contacts = spec.contacts.clone();
        out.push(ev);
    }
    out
}

/// Limit checks from guideline parameters; one event per violated parameter.
/// Readings in a different but convertible unit are compared after normalization.
pub fn eval_guidelines(
    observations: &[Observed],
    params: &[GuidelineParam],
    kind: ContractKind,
    patient: PatientKey,
) -> Vec<AlertEvent> {
    let mut out = Vec::new();
    for g in params {
        let Some(severity) = Severity::from_action(g.action) else { continue };
        let mut triggers = Vec::new();
        let mut reasons = Vec::new();
        for o in observations {
            for (code, value, unit) in numeric_points(o) {
                if code != g.target_code {
                    continue;
                }
                let Some((v, lo, hi)) = comparable(value, unit.as_deref(), g) else { continue };
                let bound = if lo.is_some_and(|lo| v < lo) {
                    Some("lower bound")
                } else if hi.is_some_and(|hi| v > hi) {
                    Some("upper bound")
                } else {
                    None
                };
                if let Some(bound) = bound {
                    triggers.push(o);
                    reasons.push(format!("{code} {bound} exceeded: {} {}", fmt_num(value), unit.as_deref().unwrap_or("")));
                }
            }
        }
        if !triggers.is_empty() {
            reasons.dedup();
            out.push(AlertEvent::from_triggers(severity, patient, kind, &triggers, reasons.join("; ")));
        }
    }
    out
}

// Brings a reading and the guideline limits into the same unit.
fn comparable(value: f64, unit: Option<&str>, g: &GuidelineParam) -> Option<(f64, Option<f64>, Option<f64>)> {
    let Some(unit) = unit else {
        return Some((value, g.lower_limit, g.upper_limit));
    };
    if unit == g.unit {
        return Some((value, g.lower_limit, g.upper_limit));
    }
    let (v, cu) = normalize_unit(value, unit).ok()?;
    let conv = |l: Option<f64>| -> Option<Option<f64>> {
        match l {
            None => Some(None),
            Some(l) => {
                let (lv, lu) = normalize_unit(l, &g.unit).ok()?;
                (lu == cu).then_some(Some(lv))
            }
        }
    };
    Some((v, conv(g.lower_limit)?, conv(g.upper_limit)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::testutil::{bp, event, patient, scalar, t};
    use crate::template::GuidelineAction;
    use proptest::prelude::*;

    fn bounds() -> RhythmBounds {
        RhythmBounds {
            min_bpm: 50.0,
            max_bpm: 120.0,
            irregularity_flag: true,
            heart_rate_codes: default_heart_rate_codes(),
            irregular_code: default_irregular_code(),
        }
    }

    #[test]
    fn normal_readings_do_not_alert() {
        let obs: Vec<_> =
            [62.0, 58.0, 53.0].iter().enumerate().map(|(i, v)| scalar(t(1, 8, i as u32), "heart-rate", *v, "/min")).collect();
        assert!(eval_adverse_condition(&obs, &bounds(), patient()).is_none());
    }

    #[test]
    fn high_rate_alerts() {
        let obs = vec![scalar(t(1, 8, 0), "heart-rate", 150.0, "/min")];
        let ev = eval_adverse_condition(&obs, &bounds(), patient()).unwrap();
        assert_eq!(ev.severity, Severity::Alert);
        assert!(ev.message.contains("upper bound exceeded"), "{}", ev.message);
        let low = vec![scalar(t(1, 8, 0), "pulse-rate", 40.0, "/min")];
        assert!(eval_adverse_condition(&low, &bounds(), patient()).unwrap().message.contains("lower bound"));
    }

    #[test]
    fn irregular_pulse_alerts_only_with_flag() {
        let obs = vec![event(t(1, 8, 0), "pulse_irregular", true)];
        assert!(eval_adverse_condition(&obs, &bounds(), patient()).is_some());
        let mut b = bounds();
        b.irregularity_flag = false;
        assert!(eval_adverse_condition(&obs, &b, patient()).is_none());
        let cleared = vec![event(t(1, 8, 0), "pulse_irregular", false)];
        assert!(eval_adverse_condition(&cleared, &bounds(), patient()).is_none());
    }

    #[test]
    fn falls() {
        let spec = EscalationSpec { contacts: vec!["tel:+15550100".into()], fall_code: "fall".into() };
        let fall = event(t(1, 3, 0), "fall", true);
        let evs = eval_emergency(&[fall.clone(), fall.clone()], &spec, patient());
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].severity, Severity::Emergency);
        assert_eq!(evs[0].escalation_contacts, spec.contacts);
        assert!(eval_emergency(&[event(t(1, 3, 0), "fall", false)], &spec, patient()).is_empty());
        let evs = eval_emergency(&[fall, event(t(1, 4, 0), "fall", true)], &spec, patient());
        assert_eq!(evs.len(), 2);
        assert_ne!(evs[0].dedup_key(), evs[1].dedup_key());
    }

    #[test]
    fn guideline_on_vector_component() {
        let g = GuidelineParam {
            target_code: "blood-pressure/systolic".into(),
            lower_limit: None,
            upper_limit: Some(180.0),
            unit: "mm[Hg]".into(),
            action: GuidelineAction::Emergency,
        };
        let obs = vec![bp(t(1, 8, 0), 150.0, 90.0), bp(t(1, 9, 0), 190.0, 95.0)];
        let evs = eval_guidelines(&obs, std::slice::from_ref(&g), ContractKind::AdverseCondition, patient());
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].severity, Severity::Emergency);
        assert_eq!(evs[0].triggering, vec![obs[1].address]);
        let none = GuidelineParam { action: GuidelineAction::None, ..g };
        assert!(eval_guidelines(&obs, &[none], ContractKind::AdverseCondition, patient()).is_empty());
    }

    #[test]
    fn guideline_converts_units() {
        let g = GuidelineParam {
            target_code: "body-temperature".into(),
            lower_limit: None,
            upper_limit: Some(38.0),
            unit: "Cel".into(),
            action: GuidelineAction::Notify,
        };
        let hot = vec![scalar(t(1, 8, 0), "body-temperature", 101.0, "[degF]")];
        assert_eq!(eval_guidelines(&hot, std::slice::from_ref(&g), ContractKind::AdverseCondition, patient()).len(), 1);
        let ok = vec![scalar(t(1, 8, 0), "body-temperature", 99.0, "[degF]")];
        assert!(eval_guidelines(&ok, &[g], ContractKind::AdverseCondition, patient()).is_empty());
    }

    proptest! {
        #[test]
        fn adding_out_of_range_reading_keeps_alert(
            readings in proptest::collection::vec(20.0f64..200.0, 1..30),
            extra in prop_oneof![121.0f64..300.0, 0.0f64..49.9],
        ) {
            let mut obs: Vec<_> = readings
                .iter()
                .enumerate()
                .map(|(i, v)| scalar(t(1, 0, 0).plus_millis(i as i64 * 1000), "heart-rate", *v, "/min"))
                .collect();
            let before = eval_adverse_condition(&obs, &bounds(), patient());
            obs.push(scalar(t(2, 0, 0), "heart-rate", extra, "/min"));
            let after = eval_adverse_condition(&obs, &bounds(), patient());
            prop_assert!(after.is_some());
            if let Some(b) = before {
                prop_assert!(after.unwrap().triggering.len() > b.triggering.len());
            }
        }
    }
}
