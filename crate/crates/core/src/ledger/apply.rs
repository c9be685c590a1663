use std::collections::HashMap;

use super::block::Block;
use super::state::{AccessGrant, AccessGrantDoc, LedgerState, ObsRef, Tip};
use super::tx::{TransferTransaction, TxKind};
use crate::batch;
use crate::cas::{CasError, CasStore, ContentAddress};
use crate::contracts::{
    audit_statistics, eval_adverse_condition, eval_drug_compliance, eval_emergency, eval_guidelines, summarize,
    AlertEvent, ContractKind, ContractSet, Observed, SummaryReport, Window,
};
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::observation::CanonicalObservation;
use crate::time::{Timestamp, MILLIS_PER_DAY};

/// Read access to stored objects; implementations must verify content addresses.
pub trait ObjectSource {
    fn fetch(&self, addr: &ContentAddress) -> Result<Vec<u8>, String>;
}

impl ObjectSource for CasStore {
    fn fetch(&self, addr: &ContentAddress) -> Result<Vec<u8>, String> {
        self.get(addr).map_err(|e: CasError| e.to_string())
    }
}

/// In-memory object map, for tests and tools.
#[derive(Debug, Clone, Default)]
pub struct MemoryObjects(pub HashMap<ContentAddress, Vec<u8>>);

impl MemoryObjects {
    pub fn put(&mut self, bytes: Vec<u8>) -> ContentAddress {
        let a = ContentAddress::of(&bytes);
        self.0.insert(a, bytes);
        a
    }
}

impl ObjectSource for MemoryObjects {
    fn fetch(&self, addr: &ContentAddress) -> Result<Vec<u8>, String> {
        let b = self.0.get(addr).ok_or_else(|| format!("object {addr} not found"))?;
        if !addr.verify(b) {
            return Err(format!("object {addr} does not match its digest"));
        }
        Ok(b.clone())
    }
}

pub struct ApplyEnv<'a> {
    pub objects: &'a dyn ObjectSource,
    pub contracts: &'a ContractSet,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("block {height} does not chain onto the current tip")]
    Linkage { height: u64 },
    #[error("tx {tx_id}: stored object unavailable: {reason}")]
    Object { tx_id: Digest32, reason: String },
}

#[derive(Debug, Clone, Default)]
pub struct ApplyOutcome {
    pub state: LedgerState,
    /// Alerts first recorded by this block, for outbound delivery.
    pub new_alerts: Vec<AlertEvent>,
    /// Transactions that were valid on chain but had no effect, with the reason.
    pub ignored: Vec<(Digest32, String)>,
}

/// Applies a validated block, evaluating contracts for every data transfer.
pub fn apply_block(state: &LedgerState, block: &Block, env: &ApplyEnv<'_>) -> Result<ApplyOutcome, ApplyError> {
    if block.height != state.next_height() || block.prev_hash != state.tip_hash() {
        return Err(ApplyError::Linkage { height: block.height });
    }
    let mut out = ApplyOutcome { state: state.clone(), ..Default::default() };
    for tx in &block.transactions {
        let obj = |addr: &ContentAddress| {
            env.objects.fetch(addr).map_err(|reason| ApplyError::Object { tx_id: tx.tx_id, reason })
        };
        let result = match tx.kind {
            TxKind::DataTransfer => apply_transfer(&mut out, tx, env)?,
            TxKind::AccessGrant | TxKind::AccessRevoke => {
                match serde_json::from_slice::<AccessGrantDoc>(&obj(&tx.payload_address)?) {
                    Ok(doc) => {
                        let g = AccessGrant { grantee: doc.grantee, patient: tx.patient_key, scope: doc.scope };
                        if tx.kind == TxKind::AccessGrant {
                            out.state.access.insert(g);
                        } else {
                            out.state.access.remove(&g);
                        }
                        Ok(())
                    }
                    Err(e) => Err(format!("grant document: {e}")),
                }
            }
            TxKind::AlertEvent => match serde_json::from_slice::<AlertEvent>(&obj(&tx.payload_address)?) {
                Ok(ev) if ev.patient_key != tx.patient_key => Err("alert is for another patient".into()),
                Ok(ev) if ev.triggering.is_empty() => Err("alert has no triggering observations".into()),
                Ok(ev) => {
                    if out.state.record_alert(ev.clone(), tx.tx_id) {
                        out.new_alerts.push(ev);
                    }
                    Ok(())
                }
                Err(e) => Err(format!("alert document: {e}")),
            },
            TxKind::SummaryPublished => {
                let bytes = obj(&tx.payload_address)?;
                match verify_summary(&out.state, tx, &bytes, env)? {
                    Ok(()) => {
                        out.state.summaries.insert(tx.patient_key, tx.payload_address);
                        Ok(())
                    }
                    Err(e) => Err(e),
                }
            }
        };
        if let Err(reason) = result {
            out.ignored.push((tx.tx_id, reason));
        }
        out.state.tx_count += 1;
    }
    out.state.tip = Some(Tip { height: block.height, hash: block.hash, timestamp: block.timestamp });
    Ok(out)
}

fn apply_transfer(out: &mut ApplyOutcome, tx: &TransferTransaction, env: &ApplyEnv<'_>) -> Result<Result<(), String>, ApplyError> {
    let fail = |reason: String| ApplyError::Object { tx_id: tx.tx_id, reason };
    let observations = batch::read_observations(env.objects, &tx.payload_address).map_err(fail)?;
    if observations.iter().any(|o| o.obs.subject != tx.patient_key) {
        return Ok(Err("batch holds observations for another patient".into()));
    }
    let patient = tx.patient_key;
    let transfers = out.state.transfers.entry(patient).or_default();
    if !transfers.contains(&tx.payload_address) {
        transfers.push(tx.payload_address);
    }
    let fresh: Vec<Observed> = observations
        .into_iter()
        .filter(|o| {
            out.state.index_observation(
                patient,
                ObsRef {
                    effective_time: o.obs.effective_time,
                    address: o.address,
                    code: o.obs.code_binding.clone(),
                    kind: o.obs.kind,
                },
            )
        })
        .collect();
    if fresh.is_empty() {
        return Ok(Ok(()));
    }

    let mut alerts = Vec::new();
    for spec in env.contracts.for_patient(&patient) {
        alerts.extend(eval_guidelines(&fresh, &spec.parameters, spec.contract_kind, patient));
        match spec.contract_kind {
            ContractKind::AdverseCondition => {
                if let Some(r) = &spec.rhythm {
                    alerts.extend(eval_adverse_condition(&fresh, r, patient));
                }
            }
            ContractKind::EmergencyAlert => {
                if let Some(e) = &spec.escalation {
                    alerts.extend(eval_emergency(&fresh, e, patient));
                }
            }
            ContractKind::DrugCompliance => {
                if let Some(sched) = &spec.dose_schedule {
                    let latest = fresh.iter().map(|o| o.obs.effective_time).max().expect("non-empty");
                    alerts.extend(compliance_on_day_close(out, patient, sched, latest, env, tx)?);
                }
            }
            ContractKind::AccessControl | ContractKind::Summarization => {}
        }
    }
    for ev in alerts {
        if out.state.record_alert(ev.clone(), tx.tx_id) {
            out.new_alerts.push(ev);
        }
    }
    Ok(Ok(()))
}

// Evaluates the trailing window once each time a patient's data crosses into a new UTC day.
fn compliance_on_day_close(
    out: &mut ApplyOutcome,
    patient: PatientKey,
    sched: &crate::contracts::DoseSchedule,
    latest: Timestamp,
    env: &ApplyEnv<'_>,
    tx: &TransferTransaction,
) -> Result<Option<AlertEvent>, ApplyError> {
    let boundary = Timestamp::start_of_day(latest.date());
    if out.state.compliance_cursor.get(&patient).is_some_and(|c| *c >= boundary) {
        return Ok(None);
    }
    let refs: Vec<ObsRef> = out
        .state
        .patient_observations(&patient)
        .iter()
        .filter(|r| r.code == sched.opening_code)
        .cloned()
        .collect();
    let Some(first) = refs.first() else { return Ok(None) };
    out.state.compliance_cursor.insert(patient, boundary);
    let end = boundary.plus_millis(-1);
    let mut start = boundary.plus_millis(-(i64::from(sched.window_days) * MILLIS_PER_DAY) - 1);
    start = start.max(Timestamp::start_of_day(first.effective_time.date()).plus_millis(-1));
    if let Some(d) = sched.start_date {
        start = start.max(Timestamp::start_of_day(d).plus_millis(-1));
    }
    if start >= end {
        return Ok(None);
    }
    let window = Window::new(start, end);
    let tol = sched.tolerance_ms();
    let wanted = refs.iter().filter(|r| {
        r.effective_time.millis() > start.millis() - tol && r.effective_time.millis() <= end.millis() + tol
    });
    let obs = load_refs(env, wanted, tx)?;
    Ok(eval_drug_compliance(&obs, sched, window, patient).1)
}

fn load_refs<'a>(
    env: &ApplyEnv<'_>,
    refs: impl Iterator<Item = &'a ObsRef>,
    tx: &TransferTransaction,
) -> Result<Vec<Observed>, ApplyError> {
    refs.map(|r| {
        let bytes = env
            .objects
            .fetch(&r.address)
            .map_err(|reason| ApplyError::Object { tx_id: tx.tx_id, reason })?;
        let obs: CanonicalObservation = serde_json::from_slice(&bytes)
            .map_err(|e| ApplyError::Object { tx_id: tx.tx_id, reason: format!("observation {}: {e}", r.address) })?;
        Ok(Observed { address: r.address, obs })
    })
    .collect()
}

/// A published summary must be the exact report this state would produce.
fn verify_summary(
    state: &LedgerState,
    tx: &TransferTransaction,
    bytes: &[u8],
    env: &ApplyEnv<'_>,
) -> Result<Result<(), String>, ApplyError> {
    let report: SummaryReport = match serde_json::from_slice(bytes) {
        Ok(r) => r,
        Err(e) => return Ok(Err(format!("summary document: {e}"))),
    };
    if report.patient_key != tx.patient_key {
        return Ok(Err("summary is for another patient".into()));
    }
    if let Err(e) = audit_statistics(&report) {
        return Ok(Err(e));
    }
    let refs = state.patient_observations(&tx.patient_key).iter().filter(|r| report.window.contains(r.effective_time));
    let obs = load_refs(env, refs, tx)?;
    let expected = summarize(&obs, &report.spec, report.window, tx.patient_key);
    if expected.to_canonical_json() != bytes {
        return Ok(Err("summary does not match the recorded observations".into()));
    }
    Ok(Ok(()))
}

/// Folds blocks from genesis.
pub fn replay(blocks: &[Block], env: &ApplyEnv<'_>) -> Result<LedgerState, ApplyError> {
    let mut state = LedgerState::default();
    for b in blocks {
        state = apply_block(&state, b, env)?.state;
    }
    Ok(state)
}
