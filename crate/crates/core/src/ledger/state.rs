use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cas::ContentAddress;
use crate::contracts::AlertEvent;
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::observation::MeasurementKind;
use crate::principal::Action;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessGrant {
    pub grantee: String,
    pub patient: PatientKey,
    pub scope: Action,
}

/// Body of an access_grant / access_revoke transaction, stored in CAS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessGrantDoc {
    pub grantee: String,
    pub scope: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObsRef {
    pub effective_time: Timestamp,
    pub address: ContentAddress,
    pub code: String,
    pub kind: MeasurementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub dedup_key: Digest32,
    pub tx_id: Digest32,
    pub event: AlertEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tip {
    pub height: u64,
    pub hash: Digest32,
    pub timestamp: Timestamp,
}

/// State reached by applying blocks in order from genesis.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LedgerState {
    pub tip: Option<Tip>,
    pub access: BTreeSet<AccessGrant>,
    pub summaries: BTreeMap<PatientKey, ContentAddress>,
    pub alerts: Vec<AlertRecord>,
    pub transfers: BTreeMap<PatientKey, Vec<ContentAddress>>,
    /// Per patient, sorted by (effective_time, address).
    pub observations: BTreeMap<PatientKey, Vec<ObsRef>>,
    /// Day boundary up to which compliance has been evaluated.
    pub compliance_cursor: BTreeMap<PatientKey, Timestamp>,
    pub tx_count: u64,
    #[serde(skip)]
    pub(crate) alert_keys: BTreeSet<Digest32>,
}

impl LedgerState {
    pub fn has_grant(&self, grantee: &str, patient: &PatientKey, scope: Action) -> bool {
        self.access.contains(&AccessGrant { grantee: grantee.to_string(), patient: *patient, scope })
    }

    pub fn next_height(&self) -> u64 {
        self.tip.map_or(0, |t| t.height + 1)
    }

    pub fn tip_hash(&self) -> Digest32 {
        self.tip.map_or(Digest32::ZERO, |t| t.hash)
    }

    pub fn patient_observations(&self, patient: &PatientKey) -> &[ObsRef] {
        self.observations.get(patient).map_or(&[], Vec::as_slice)
    }

    pub fn alerts_for(&self, patient: &PatientKey) -> impl Iterator<Item = &AlertRecord> {
        let p = *patient;
        self.alerts.iter().filter(move |a| a.event.patient_key == p)
    }

    pub fn has_alert(&self, key: &Digest32) -> bool {
        self.alert_keys.contains(key)
    }

    /// Records an alert unless its dedup key was seen before.
    pub(crate) fn record_alert(&mut self, event: AlertEvent, tx_id: Digest32) -> bool {
        let key = event.dedup_key();
        if !self.alert_keys.insert(key) {
            return false;
        }
        self.alerts.push(AlertRecord { dedup_key: key, tx_id, event });
        true
    }

    /// Inserts a reference, keeping order; returns false if already present.
    pub(crate) fn index_observation(&mut self, patient: PatientKey, r: ObsRef) -> bool {
        let v = self.observations.entry(patient).or_default();
        let probe = (r.effective_time, r.address);
        match v.binary_search_by(|x| (x.effective_time, x.address).cmp(&probe)) {
            Ok(_) => false,
            Err(i) => {
                v.insert(i, r);
                true
            }
        }
    }

    pub fn canonical_encoding(&self) -> Vec<u8> {
        crate::canonical::to_canonical_json(self)
    }

    pub fn state_digest(&self) -> Digest32 {
        Digest32::of(&self.canonical_encoding())
    }
}
