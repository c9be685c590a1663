//! Batch intake shared by every transport: authentication, template mapping,
//! storage of the batch in the content store, and the ledger transaction.

mod auth;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use auth::{
    device_principal_id, AuthError, Authenticated, Credentials, DeviceBinding, DeviceRegistration, PatientFixture,
    RegistrationTable, Registrations, UserRegistration,
};

use crate::batch::{self, BatchManifest};
use crate::canonical::canonical_json;
use crate::cas::{CasError, CasStore, ContentAddress};
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::ledger::{Ledger, SubmitError, TransferTransaction, TxKind};
use crate::observation::CanonicalObservation;
use crate::signing::SigningKey;
use crate::template::{map_payload, MappingContext, TemplateRegistry};
use crate::time::Timestamp;

pub const RECEIPTS_FILE: &str = "receipts.log";
pub const DEFAULT_MAX_BATCH: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Http,
    Mqtt,
    Coap,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Http => "http",
            Transport::Mqtt => "mqtt",
            Transport::Coap => "coap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("payloads non-empty")]
    EmptyBatch,
    #[error("batch of {size} payloads exceeds the limit of {max}")]
    TooLarge { size: usize, max: usize },
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("authentication failed: {0}")]
    Unauthenticated(#[from] AuthError),
    #[error("authorization error: {0}")]
    Forbidden(String),
    #[error("busy, retry later")]
    Busy,
    #[error("storage error: {0}")]
    Storage(String),
    #[error("ledger error: {0}")]
    Ledger(String),
}

impl IngestError {
    /// Whether the sender should retry the same batch unchanged.
    pub fn is_retryable(&self) -> bool {
        matches!(self, IngestError::Busy | IngestError::Storage(_) | IngestError::Ledger(_))
    }
}

/// An authenticated batch. The constructor enforces the non-empty invariant.
#[derive(Debug, Clone)]
pub struct IngestBatch {
    pub transport: Transport,
    pub sender: Authenticated,
    pub payloads: Vec<Value>,
    pub received_at: Timestamp,
}

impl IngestBatch {
    pub fn new(
        transport: Transport,
        sender: Authenticated,
        payloads: Vec<Value>,
        received_at: Timestamp,
    ) -> Result<Self, IngestError> {
        if payloads.is_empty() {
            return Err(IngestError::EmptyBatch);
        }
        Ok(IngestBatch { transport, sender, payloads, received_at })
    }

    /// Digest over the sender and the canonical form of each payload, so that
    /// framing differences between transports do not change it.
    pub fn batch_id(&self) -> Digest32 {
        batch_id(&self.sender.principal().id, &self.payloads)
    }
}

pub fn batch_id(principal: &str, payloads: &[Value]) -> Digest32 {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"blockiot-batch\0");
    buf.extend_from_slice(principal.as_bytes());
    buf.push(0);
    for p in payloads {
        buf.extend_from_slice(&canonical_json(p));
        buf.push(b'\n');
    }
    Digest32::of(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub batch_id: Digest32,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_tx: Option<Digest32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_address: Option<ContentAddress>,
}

/// Checks that a transport route (MQTT topic, CoAP path) names the sender's own patient and device.
pub fn check_route(sender: &Authenticated, patient_id: &str, device_id: &str) -> Result<(), IngestError> {
    let d = sender.device().ok_or_else(|| IngestError::Forbidden("only devices may submit observations".into()))?;
    if d.patient_id != patient_id || d.device_id != device_id {
        return Err(IngestError::Forbidden(format!(
            "route {patient_id}/{device_id} does not match the credential's registration"
        )));
    }
    Ok(())
}

struct Accepted {
    raw: Vec<u8>,
    observations: Vec<CanonicalObservation>,
}

pub struct IngestPipeline {
    cas: Arc<CasStore>,
    templates: Arc<TemplateRegistry>,
    ledger: Arc<RwLock<Ledger>>,
    signer: String,
    key: SigningKey,
    name_keys: HashMap<PatientKey, SigningKey>,
    max_batch: usize,
    skew_budget_ms: Option<u64>,
    receipts: Mutex<HashMap<Digest32, IngestReceipt>>,
    receipts_path: Option<PathBuf>,
    // Serializes the write phase so patient roots and name sequences advance one batch at a time.
    write: Mutex<()>,
}

impl IngestPipeline {
    pub fn new(
        cas: Arc<CasStore>,
        templates: Arc<TemplateRegistry>,
        ledger: Arc<RwLock<Ledger>>,
        signer: impl Into<String>,
        key: SigningKey,
    ) -> Self {
        IngestPipeline {
            cas,
            templates,
            ledger,
            signer: signer.into(),
            key,
            name_keys: HashMap::new(),
            max_batch: DEFAULT_MAX_BATCH,
            skew_budget_ms: None,
            receipts: Mutex::new(HashMap::new()),
            receipts_path: None,
            write: Mutex::new(()),
        }
    }

    pub fn with_max_batch(mut self, max: usize) -> Self {
        self.max_batch = max;
        self
    }

    /// Per-patient keys for signing name records. Patients without one fall back to the gateway key.
    pub fn with_name_keys(mut self, keys: HashMap<PatientKey, SigningKey>) -> Self {
        self.name_keys = keys;
        self
    }

    pub fn name_key(&self, patient: &PatientKey) -> &SigningKey {
        self.name_keys.get(patient).unwrap_or(&self.key)
    }

    /// Accepts device timestamps up to `ms` away from arrival regardless of template accuracy.
    pub fn with_skew_budget(mut self, ms: Option<u64>) -> Self {
        self.skew_budget_ms = ms;
        self
    }

    /// Keeps the dedup set in `dir`, loading what an earlier run recorded.
    pub fn with_receipt_log(mut self, dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RECEIPTS_FILE);
        let mut map = HashMap::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                // A torn last line from a crash is skipped; that batch is simply processed again.
                for line in text.lines() {
                    if let Ok(r) = serde_json::from_str::<IngestReceipt>(line) {
                        map.insert(r.batch_id, r);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        self.receipts = Mutex::new(map);
        self.receipts_path = Some(path);
        Ok(self)
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn signer(&self) -> &str {
        &self.signer
    }

    pub(crate) fn key(&self) -> &SigningKey {
        &self.key
    }

    pub fn seen(&self, id: &Digest32) -> Option<IngestReceipt> {
        self.receipts.lock().expect("receipts lock").get(id).cloned()
    }

    pub fn receipt_count(&self) -> usize {
        self.receipts.lock().expect("receipts lock").len()
    }

    pub fn ingest(&self, batch: &IngestBatch) -> Result<IngestReceipt, IngestError> {
        if batch.payloads.len() > self.max_batch {
            return Err(IngestError::TooLarge { size: batch.payloads.len(), max: self.max_batch });
        }
        let binding = batch
            .sender
            .device()
            .ok_or_else(|| IngestError::Forbidden("only devices may submit observations".into()))?;
        let id = batch.batch_id();
        if let Some(r) = self.seen(&id) {
            return Ok(r);
        }
        let template = self
            .templates
            .get(&binding.template)
            .ok_or_else(|| IngestError::Forbidden(format!("template {} is not loaded", binding.template)))?;
        let ctx = MappingContext {
            received_at: batch.received_at,
            subject: binding.patient.patient_key,
            clock_skew_budget_ms: self.skew_budget_ms,
        };

        let mut rejected = Vec::new();
        let mut accepted = Vec::new();
        for (index, payload) in batch.payloads.iter().enumerate() {
            let reject = |reason: String| Rejection { index, reason };
            let Some(obj) = payload.as_object() else {
                rejected.push(reject("payload is not a JSON object".into()));
                continue;
            };
            match map_payload(&template, obj, &ctx) {
                Err(e) => rejected.push(reject(e.to_string())),
                Ok(out) if out.device.patient_id != binding.patient_id || out.device.device_id != binding.device_id => {
                    rejected.push(reject(format!(
                        "authorization error: payload claims {}/{}, credential is registered to {}/{}",
                        out.device.patient_id, out.device.device_id, binding.patient_id, binding.device_id
                    )))
                }
                Ok(out) if out.observations.is_empty() => {
                    let why: Vec<String> =
                        out.field_errors.iter().map(|f| format!("{}: {}", f.source_key, f.message)).collect();
                    rejected.push(reject(if why.is_empty() {
                        "no mapped fields".into()
                    } else {
                        format!("no mapped fields ({})", why.join("; "))
                    }))
                }
                Ok(out) => accepted.push(Accepted { raw: canonical_json(payload), observations: out.observations }),
            }
        }

        let _guard = self.write.lock().expect("ingest write lock");
        if let Some(r) = self.seen(&id) {
            return Ok(r);
        }
        let mut receipt =
            IngestReceipt { batch_id: id, accepted: accepted.len(), rejected, ledger_tx: None, batch_address: None };
        if !accepted.is_empty() {
            let (addr, tx) = self.persist(id, batch, binding, &template.key().to_string(), accepted)?;
            receipt.batch_address = Some(addr);
            receipt.ledger_tx = Some(tx);
        }
        self.record(&receipt)?;
        Ok(receipt)
    }

    fn persist(
        &self,
        id: Digest32,
        batch: &IngestBatch,
        binding: &DeviceBinding,
        template: &str,
        accepted: Vec<Accepted>,
    ) -> Result<(ContentAddress, Digest32), IngestError> {
        let storage = |e: CasError| IngestError::Storage(e.to_string());
        let patient = binding.patient.patient_key;
        let raw: Vec<Vec<u8>> = accepted.iter().map(|a| a.raw.clone()).collect();
        let observations: Vec<CanonicalObservation> = accepted.into_iter().flat_map(|a| a.observations).collect();
        let issued_at = observations.iter().map(|o| o.effective_time).max().unwrap_or(batch.received_at);
        let manifest = BatchManifest {
            batch_id: id,
            principal: batch.sender.principal().id.clone(),
            patient_key: patient,
            device_id: binding.device_id.clone(),
            template: template.to_string(),
            payloads: raw.len(),
            observations: observations.len(),
        };
        let mut addr = batch::store_batch(&self.cas, &manifest, &raw, &observations).map_err(storage)?;

        let name = batch::patient_entry_name(&id);
        let name_key = self.name_key(&patient);
        let current = match self.cas.resolve_name(&patient, &name_key.public_key()) {
            Ok(r) => Some(r),
            Err(CasError::NameNotFound(_)) => None,
            Err(e) => return Err(storage(e)),
        };
        let root = match self.cas.add_entry(current.as_ref(), &name, addr) {
            Ok(r) => r,
            // An earlier attempt stored this batch with a different receive time; keep the first.
            Err(CasError::Conflict(_)) => {
                let root = current.expect("conflict implies a root");
                addr = self.cas.get_directory(&root).map_err(storage)?.get(&name).expect("entry exists").address;
                root
            }
            Err(e) => return Err(storage(e)),
        };
        if current != Some(root) {
            self.cas.publish_name(patient, root, name_key).map_err(storage)?;
        }

        let tx = TransferTransaction::new_signed(TxKind::DataTransfer, patient, addr, issued_at, &self.signer, &self.key);
        let ledger = self.ledger.read().expect("ledger lock");
        match ledger.submit_tx(tx.clone()) {
            Ok(()) | Err(SubmitError::Duplicate) => Ok((addr, tx.tx_id)),
            Err(e) => Err(IngestError::Ledger(e.to_string())),
        }
    }

    fn record(&self, receipt: &IngestReceipt) -> Result<(), IngestError> {
        if let Some(path) = &self.receipts_path {
            let mut line = serde_json::to_vec(receipt).expect("receipt serializes");
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| IngestError::Storage(format!("receipt log: {e}")))?;
            f.write_all(&line).and_then(|_| f.sync_data()).map_err(|e| IngestError::Storage(format!("receipt log: {e}")))?;
        }
        self.receipts.lock().expect("receipts lock").insert(receipt.batch_id, receipt.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::auth::tests::fixture_table;
    use super::*;
    use crate::contracts::ContractSet;
    use crate::ledger::{LedgerConfig, SignerEntry, SignerRegistry};
    use crate::principal::Role;
    use crate::template::tests::bp_template;
    use serde_json::json;

    struct Rig {
        _dir: tempfile::TempDir,
        cas: Arc<CasStore>,
        ledger: Arc<RwLock<Ledger>>,
        pipeline: IngestPipeline,
        regs: Registrations,
    }

    fn rig() -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let cas = Arc::new(CasStore::open(dir.path().join("cas")).unwrap());
        let key = SigningKey::from_seed([7; 32]);
        let signers = SignerRegistry::new([SignerEntry {
            principal: "gateway".into(),
            public_key: key.public_key(),
            role: Role::Gateway,
            patient_key: None,
        }]);
        let ledger = Arc::new(RwLock::new(Ledger::in_memory(
            LedgerConfig { difficulty_bits: 4, ..LedgerConfig::default() },
            signers,
            ContractSet::default(),
            cas.clone(),
        )));
        let templates = Arc::new(TemplateRegistry::from_templates([bp_template()]));
        let pipeline = IngestPipeline::new(cas.clone(), templates, ledger.clone(), "gateway", key)
            .with_receipt_log(&dir.path().join("ingest"))
            .unwrap();
        Rig { _dir: dir, cas, ledger, pipeline, regs: Registrations::new(fixture_table()).unwrap() }
    }

    fn bp(pid: &str, did: &str, i: i64) -> Value {
        json!({"pid": pid, "did": did, "sys": 120 + i, "dia": 80, "map": 93, "pr": 61,
               "ts": 1_704_067_200_000i64 + i * 60_000})
    }

    fn batch(r: &Rig, token: &str, t: Transport, payloads: Vec<Value>) -> IngestBatch {
        let who = r.regs.authenticate(&Credentials::Bearer(token.into()), Timestamp::from_millis(1_704_067_200_000)).unwrap();
        IngestBatch::new(t, who, payloads, Timestamp::from_millis(1_704_067_200_000)).unwrap()
    }

    #[test]
    fn accepted_and_rejected_add_up() {
        let r = rig();
        let mut missing = bp("P1", "BP9", 2);
        missing.as_object_mut().unwrap().remove("did");
        let b = batch(&r, "tok-bp9", Transport::Http, vec![bp("P1", "BP9", 0), bp("P1", "BP9", 1), missing]);
        let rc = r.pipeline.ingest(&b).unwrap();
        assert_eq!(rc.accepted, 2);
        assert_eq!(rc.rejected.len(), 1);
        assert_eq!(rc.rejected[0].index, 2);
        assert!(rc.rejected[0].reason.starts_with("identity error"), "{}", rc.rejected[0].reason);
        assert_eq!(r.ledger.read().unwrap().pending_len(), 1);
        let obs = batch::read_observations(r.cas.as_ref(), &rc.batch_address.unwrap()).unwrap();
        assert_eq!(obs.len(), 4);
    }

    #[test]
    fn redelivery_is_a_no_op() {
        let r = rig();
        let b = batch(&r, "tok-bp9", Transport::Mqtt, vec![bp("P1", "BP9", 0)]);
        let first = r.pipeline.ingest(&b).unwrap();
        let digest = r.cas.store_digest();
        let names = r.cas.name_history(&b.sender.device().unwrap().patient.patient_key).unwrap().len();
        let again = IngestBatch { transport: Transport::Coap, received_at: Timestamp::from_millis(0), ..b.clone() };
        assert_eq!(r.pipeline.ingest(&again).unwrap(), first);
        assert_eq!(r.cas.store_digest(), digest);
        assert_eq!(r.cas.name_history(&b.sender.device().unwrap().patient.patient_key).unwrap().len(), names);
        assert_eq!(r.ledger.read().unwrap().pending_len(), 1);
    }

    #[test]
    fn payload_for_another_patient_is_refused() {
        let r = rig();
        let b = batch(&r, "tok-bp7", Transport::Http, vec![bp("P1", "BP7", 0)]);
        let rc = r.pipeline.ingest(&b).unwrap();
        assert_eq!(rc.accepted, 0);
        assert!(rc.rejected[0].reason.starts_with("authorization error"));
        assert_eq!(r.cas.store_digest(), CasStore::open(tempfile::tempdir().unwrap().path()).unwrap().store_digest());
        assert_eq!(rc.ledger_tx, None);
    }

    #[test]
    fn routes_and_limits() {
        let r = rig();
        let who = r.regs.authenticate(&Credentials::Bearer("tok-bp9".into()), Timestamp::from_millis(0)).unwrap();
        assert!(check_route(&who, "P1", "BP9").is_ok());
        assert!(matches!(check_route(&who, "P2", "BP9"), Err(IngestError::Forbidden(_))));
        let dr = r.regs.authenticate(&Credentials::Bearer("tok-dr".into()), Timestamp::from_millis(0)).unwrap();
        assert!(check_route(&dr, "P1", "BP9").is_err());
        assert_eq!(
            IngestBatch::new(Transport::Http, who.clone(), vec![], Timestamp::from_millis(0)).unwrap_err().to_string(),
            "payloads non-empty"
        );
        let big = batch(&r, "tok-bp9", Transport::Http, (0..5).map(|i| bp("P1", "BP9", i)).collect());
        let p = IngestPipeline::new(r.cas.clone(), Arc::new(TemplateRegistry::new()), r.ledger.clone(), "gateway", SigningKey::from_seed([7; 32]))
            .with_max_batch(4);
        assert!(matches!(p.ingest(&big), Err(IngestError::TooLarge { size: 5, max: 4 })));
    }

    #[test]
    fn successive_batches_extend_the_patient_root() {
        let r = rig();
        let b1 = batch(&r, "tok-bp9", Transport::Http, vec![bp("P1", "BP9", 0)]);
        let b2 = batch(&r, "tok-bp9", Transport::Http, vec![bp("P1", "BP9", 1)]);
        r.pipeline.ingest(&b1).unwrap();
        r.pipeline.ingest(&b2).unwrap();
        let key = b1.sender.device().unwrap().patient.patient_key;
        let root = r.cas.resolve_name(&key, &SigningKey::from_seed([7; 32]).public_key()).unwrap();
        let dir = r.cas.get_directory(&root).unwrap();
        assert!(dir.get(&batch::patient_entry_name(&b1.batch_id())).is_some());
        assert!(dir.get(&batch::patient_entry_name(&b2.batch_id())).is_some());
        assert_eq!(r.cas.name_history(&key).unwrap().len(), 2);
    }

    #[test]
    fn receipts_survive_restart() {
        let r = rig();
        let b = batch(&r, "tok-bp9", Transport::Http, vec![bp("P1", "BP9", 0)]);
        let first = r.pipeline.ingest(&b).unwrap();
        let reopened = IngestPipeline::new(
            r.cas.clone(),
            Arc::new(TemplateRegistry::from_templates([bp_template()])),
            r.ledger.clone(),
            "gateway",
            SigningKey::from_seed([7; 32]),
        )
        .with_receipt_log(&r._dir.path().join("ingest"))
        .unwrap();
        assert_eq!(reopened.seen(&b.batch_id()), Some(first));
    }
}
