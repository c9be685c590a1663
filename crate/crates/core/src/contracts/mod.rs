//! Declarative contracts evaluated during block application: access control,
//! drug compliance, adverse heart condition, emergency falls and summaries.

mod compliance;
mod rules;
mod summary;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use compliance::{
    eval_drug_compliance, match_doses, scheduled_doses, ComplianceReport, DailyCompliance, DoseOutcome,
    DoseSchedule, Fraction,
};
pub use rules::{eval_adverse_condition, eval_emergency, eval_guidelines, numeric_points, EscalationSpec, RhythmBounds};
pub use summary::{audit_statistics, summarize, Point, Series, Statistic, Stats, SummaryReport, SummarySpec};

use crate::cas::ContentAddress;
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::ledger::LedgerState;
use crate::observation::CanonicalObservation;
use crate::principal::{Action, Principal};
use crate::template::{GuidelineAction, GuidelineParam};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKind {
    AccessControl,
    DrugCompliance,
    AdverseCondition,
    EmergencyAlert,
    Summarization,
}

impl ContractKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContractKind::AccessControl => "access_control",
            ContractKind::DrugCompliance => "drug_compliance",
            ContractKind::AdverseCondition => "adverse_condition",
            ContractKind::EmergencyAlert => "emergency_alert",
            ContractKind::Summarization => "summarization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Notify,
    Alert,
    Emergency,
}

impl Severity {
    pub fn from_action(action: GuidelineAction) -> Option<Severity> {
        match action {
            GuidelineAction::None => None,
            GuidelineAction::Notify => Some(Severity::Notify),
            GuidelineAction::Alert => Some(Severity::Alert),
            GuidelineAction::Emergency => Some(Severity::Emergency),
        }
    }
}

/// Half-open time window `(start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        Window { start, end }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start < t && t <= self.end
    }
}

/// An observation together with its content address.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub address: ContentAddress,
    pub obs: CanonicalObservation,
}

impl Observed {
    pub fn new(obs: CanonicalObservation) -> Self {
        Observed { address: obs.address(), obs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub severity: Severity,
    pub patient_key: PatientKey,
    pub contract_kind: ContractKind,
    /// Observation addresses.
    pub triggering: Vec<ContentAddress>,
    /// Raw payload addresses behind `triggering`; the dedup key is taken over these.
    pub provenance: Vec<ContentAddress>,
    pub message: String,
    pub emitted_at: Timestamp,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub escalation_contacts: Vec<String>,
}

impl AlertEvent {
    pub(crate) fn from_triggers(
        severity: Severity,
        patient_key: PatientKey,
        contract_kind: ContractKind,
        triggers: &[&Observed],
        message: String,
    ) -> Self {
        let mut triggering: Vec<_> = triggers.iter().map(|o| o.address).collect();
        triggering.sort();
        triggering.dedup();
        let mut provenance: Vec<_> = triggers.iter().map(|o| o.obs.provenance).collect();
        provenance.sort();
        provenance.dedup();
        let emitted_at = triggers.iter().map(|o| o.obs.effective_time).max().unwrap_or(Timestamp::from_millis(0));
        AlertEvent {
            severity,
            patient_key,
            contract_kind,
            triggering,
            provenance,
            message,
            emitted_at,
            escalation_contacts: Vec::new(),
        }
    }

    /// Replay-safe identity: (contract kind, triggering provenance addresses).
    pub fn dedup_key(&self) -> Digest32 {
        let mut parts: Vec<Vec<u8>> = vec![self.contract_kind.as_str().as_bytes().to_vec(), vec![0]];
        for p in &self.provenance {
            parts.push(p.to_bytes().to_vec());
        }
        Digest32::of_parts(parts.iter().map(Vec::as_slice))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub contract_kind: ContractKind,
    pub patient_key: PatientKey,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parameters: Vec<GuidelineParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_schedule: Option<DoseSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<RhythmBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation: Option<EscalationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarization: Option<SummarySpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ContractError {
    #[error("contract config error: {0}")]
    Config(String),
    #[error("reading contracts: {0}")]
    Io(#[from] std::io::Error),
}

impl ContractSpec {
    pub fn validate(&self) -> Result<(), ContractError> {
        let mut problems = Vec::new();
        for (i, g) in self.parameters.iter().enumerate() {
            for p in g.problems(&format!("/parameters/{i}")) {
                problems.push(p.to_string());
            }
        }
        let need = |present: bool, field: &str, problems: &mut Vec<String>| {
            if !present {
                problems.push(format!("{} contract requires `{field}`", self.contract_kind.as_str()));
            }
        };
        match self.contract_kind {
            ContractKind::DrugCompliance => need(self.dose_schedule.is_some(), "dose_schedule", &mut problems),
            ContractKind::AdverseCondition => need(self.rhythm.is_some(), "rhythm", &mut problems),
            ContractKind::EmergencyAlert => need(self.escalation.is_some(), "escalation", &mut problems),
            ContractKind::Summarization => need(self.summarization.is_some(), "summarization", &mut problems),
            ContractKind::AccessControl => {}
        }
        if let Some(d) = &self.dose_schedule {
            problems.extend(d.problems());
        }
        if let Some(r) = &self.rhythm {
            problems.extend(r.problems());
        }
        if let Some(s) = &self.summarization {
            problems.extend(s.problems());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ContractError::Config(problems.join("; ")))
        }
    }
}

/// Contract specs grouped by patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContractSet {
    by_patient: BTreeMap<PatientKey, Vec<ContractSpec>>,
}

impl ContractSet {
    pub fn new(specs: impl IntoIterator<Item = ContractSpec>) -> Result<Self, ContractError> {
        let mut set = ContractSet::default();
        for s in specs {
            s.validate()?;
            set.by_patient.entry(s.patient_key).or_default().push(s);
        }
        Ok(set)
    }

    /// Loads every `*.json` file in `dir`; each holds one spec or an array of specs.
    pub fn load_dir(dir: &Path) -> Result<Self, ContractError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut specs = Vec::new();
        for path in paths {
            let text = std::fs::read_to_string(&path)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ContractError::Config(format!("{}: {e}", path.display())))?;
            let items = match value {
                serde_json::Value::Array(items) => items,
                other => vec![other],
            };
            for item in items {
                let spec: ContractSpec = serde_json::from_value(item)
                    .map_err(|e| ContractError::Config(format!("{}: {e}", path.display())))?;
                specs.push(spec);
            }
        }
        Self::new(specs)
    }

    pub fn for_patient(&self, key: &PatientKey) -> &[ContractSpec] {
        self.by_patient.get(key).map_or(&[], Vec::as_slice)
    }

    pub fn find(&self, key: &PatientKey, kind: ContractKind) -> Option<&ContractSpec> {
        self.for_patient(key).iter().find(|s| s.contract_kind == kind)
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientKey> {
        self.by_patient.keys()
    }

    pub fn len(&self) -> usize {
        self.by_patient.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_patient.is_empty()
    }

    pub fn digest(&self) -> Digest32 {
        let all: Vec<&ContractSpec> = self.by_patient.values().flatten().collect();
        Digest32::of(&crate::canonical::to_canonical_json(&all))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Deny,
}

impl fmt::Display for AccessDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessDecision::Allow => "allow",
            AccessDecision::Deny => "deny",
        })
    }
}

/// Allow iff the principal is bound to `patient` or holds an unrevoked grant for `action`.
pub fn check_access(state: &LedgerState, principal: &Principal, patient: &PatientKey, action: Action) -> AccessDecision {
    if principal.patient_key.as_ref() == Some(patient) || state.has_grant(&principal.id, patient, action) {
        AccessDecision::Allow
    } else {
        AccessDecision::Deny
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}]", self.start, self.end)
    }
}
