//! Checks that a set of runs exercised every kind, transport and contract family.

use std::collections::BTreeSet;

use blockiot_core::ingest::Transport;
use blockiot_core::observation::MeasurementKind;

use crate::run::RunReport;

pub const CONTRACT_FAMILIES: [&str; 4] = ["drug_compliance", "adverse_condition", "emergency_alert", "summarization"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Coverage {
    pub kinds: BTreeSet<MeasurementKind>,
    pub transports: BTreeSet<Transport>,
    pub families: BTreeSet<String>,
}

impl Coverage {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Self {
        let mut c = Coverage::default();
        for r in reports {
            c.kinds.extend(r.kinds.iter().copied());
            c.transports.extend(r.transports.iter().copied());
            c.families.extend(r.contract_families.iter().cloned());
        }
        c
    }

    /// What is still missing, empty when coverage is complete.
    pub fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in MeasurementKind::ALL {
            if !self.kinds.contains(&k) {
                out.push(format!("kind {k:?}"));
            }
        }
        for t in [Transport::Http, Transport::Mqtt, Transport::Coap] {
            if !self.transports.contains(&t) {
                out.push(format!("transport {}", t.as_str()));
            }
        }
        for f in CONTRACT_FAMILIES {
            if !self.families.contains(f) {
                out.push(format!("contract family {f}"));
            }
        }
        out
    }
}
