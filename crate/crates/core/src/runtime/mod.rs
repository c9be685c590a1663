//! Composition root: configuration, keys, and the node that wires store,
//! templates, contracts, ledger, ingest and FHIR together.

mod config;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use serde_json::Value;

pub use config::{ConfigError, GatewayConfig, KeySection, LedgerSection, ListenConfig, ENV_PREFIX, MAX_CONFIG_DIFFICULTY};

use crate::cas::CasStore;
use crate::contracts::{summarize, AlertEvent, ContractKind, ContractSet, Observed, Window};
use crate::digest::Digest32;
use crate::fhir::{Directory, FhirService, SearchError, SearchQuery};
use crate::identity::PatientKey;
use crate::ingest::{IngestBatch, IngestError, IngestPipeline, IngestReceipt, Registrations};
use crate::ledger::{AccessGrantDoc, Ledger, LedgerError, LedgerState, SealOutcome, SignerEntry, SignerRegistry, SubmitError, TransferTransaction, TxKind};
use crate::observation::CanonicalObservation;
use crate::principal::{Action, Principal, Role};
use crate::signing::{PublicKey, SigningKey};
use crate::template::TemplateRegistry;
use crate::time::{Timestamp, MILLIS_PER_DAY};

pub const GATEWAY_SIGNER: &str = "gateway";
pub const ADMIN_SIGNER: &str = "admin";

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Manually driven clock for deterministic runs.
#[derive(Debug, Default)]
pub struct SimClock(AtomicI64);

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock(AtomicI64::new(start.millis()))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.millis(), Ordering::SeqCst);
    }

    pub fn advance(&self, ms: i64) -> Timestamp {
        Timestamp::from_millis(self.0.fetch_add(ms, Ordering::SeqCst) + ms)
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Integrity,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{component}: {message}")]
pub struct StartupError {
    pub component: &'static str,
    pub message: String,
    pub kind: FailureKind,
}

impl StartupError {
    fn config(component: &'static str, message: impl ToString) -> Self {
        StartupError { component, message: message.to_string(), kind: FailureKind::Config }
    }

    /// Process exit code: 1 for configuration problems, 2 for integrity failures.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Config => 1,
            FailureKind::Integrity => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NodeError {
    #[error("ledger: {0}")]
    Ledger(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("rejected: {0}")]
    Rejected(String),
}

impl From<LedgerError> for NodeError {
    fn from(e: LedgerError) -> Self {
        NodeError::Ledger(e.to_string())
    }
}

/// Loads a hex seed from `path`, creating one on first use.
pub fn load_or_create_key(path: &Path) -> std::io::Result<SigningKey> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_seed(text.trim())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let key = SigningKey::generate();
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, hex::encode(key.seed()))?;
            std::fs::rename(tmp, path)?;
            Ok(key)
        }
        Err(e) => Err(e),
    }
}

pub fn parse_seed(s: &str) -> Result<SigningKey, String> {
    let bytes = hex::decode(s).map_err(|e| format!("seed is not hex: {e}"))?;
    let seed: [u8; 32] = bytes.try_into().map_err(|_| "seed must be 32 bytes".to_string())?;
    Ok(SigningKey::from_seed(seed))
}

/// The gateway and admin keys: fixed seeds from the config, else the keystore
/// under the data directory. With `create`, missing keystore files are generated.
pub fn node_keys(config: &GatewayConfig, create: bool) -> Result<(SigningKey, SigningKey), StartupError> {
    let keys_dir = config.data_dir.join("keys");
    let key = |seed: &Option<String>, file: &str| match seed {
        Some(s) => parse_seed(s).map_err(|e| StartupError::config("keystore", e)),
        None if create => load_or_create_key(&keys_dir.join(file)).map_err(|e| StartupError::config("keystore", e)),
        None => {
            let path = keys_dir.join(file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| StartupError::config("keystore", format!("{}: {e}", path.display())))?;
            parse_seed(text.trim()).map_err(|e| StartupError::config("keystore", format!("{}: {e}", path.display())))
        }
    };
    Ok((key(&config.keys.gateway_seed, "gateway.seed")?, key(&config.keys.admin_seed, "admin.seed")?))
}

/// A patient's name-record key from `<data_dir>/keys/patients/<key>.seed`. With
/// `create`, a missing key is generated; this happens when the patient is first registered.
pub fn patient_name_key(config: &GatewayConfig, patient: &PatientKey, create: bool) -> Result<SigningKey, StartupError> {
    let path = config.data_dir.join("keys").join("patients").join(format!("{}.seed", patient.to_hex()));
    let loaded = if create {
        load_or_create_key(&path)
    } else {
        std::fs::read_to_string(&path).and_then(|text| {
            parse_seed(text.trim()).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    };
    loaded.map_err(|e| StartupError::config("keystore", format!("{}: {e}", path.display())))
}

/// Signers accepted on chain: the gateway (observations, alerts, summaries) and the admin (access).
pub fn signer_registry(gateway: &SigningKey, admin: &SigningKey) -> SignerRegistry {
    SignerRegistry::new([
        SignerEntry { principal: GATEWAY_SIGNER.into(), public_key: gateway.public_key(), role: Role::Gateway, patient_key: None },
        SignerEntry { principal: ADMIN_SIGNER.into(), public_key: admin.public_key(), role: Role::Admin, patient_key: None },
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeStatus {
    pub ready: bool,
    pub height: u64,
    pub tip: Digest32,
    pub pending: usize,
    pub state_digest: Digest32,
    pub store_digest: Digest32,
    pub objects: usize,
    pub alerts: usize,
}

/// One running gateway: every layer in a single process.
pub struct Node {
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    cas: Arc<CasStore>,
    templates: Arc<TemplateRegistry>,
    registrations: Arc<Registrations>,
    ledger: Arc<RwLock<Ledger>>,
    pipeline: IngestPipeline,
    directory: Directory,
    admin_key: SigningKey,
    outbox: Mutex<Vec<AlertEvent>>,
    ready: AtomicBool,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("data_dir", &self.config.data_dir).finish_non_exhaustive()
    }
}

impl Node {
    /// Opens every component in dependency order and replays the chain. A fresh
    /// data directory gets an empty genesis block.
    pub fn open(config: GatewayConfig, clock: Arc<dyn Clock>) -> Result<Node, StartupError> {
        config.validate().map_err(|e| StartupError::config("config", e.0))?;
        let templates = Arc::new(TemplateRegistry::new());
        templates
            .reload_dir(&config.template_dir)
            .map_err(|e| StartupError::config("templates", e))?;
        let contracts = if config.contract_dir.exists() {
            ContractSet::load_dir(&config.contract_dir).map_err(|e| StartupError::config("contracts", e))?
        } else {
            return Err(StartupError::config(
                "contracts",
                format!("{} does not exist", config.contract_dir.display()),
            ));
        };
        let registrations =
            Arc::new(Registrations::load(&config.registrations).map_err(|e| StartupError::config("registrations", e))?);
        for (_, b) in registrations.devices() {
            if templates.get(&b.template).is_none() {
                return Err(StartupError::config(
                    "registrations",
                    format!("device {} uses unknown template {}", b.device_id, b.template),
                ));
            }
        }

        let (gateway_key, admin_key) = node_keys(&config, true)?;
        let cas = Arc::new(CasStore::open(config.data_dir.join("cas")).map_err(|e| StartupError::config("store", e))?);
        let signers = signer_registry(&gateway_key, &admin_key);
        let mut ledger = Ledger::open(&config.data_dir.join("ledger"), config.ledger_config(), signers, contracts, cas.clone())
            .map_err(|e| StartupError {
                component: "ledger",
                kind: if e.is_integrity() { FailureKind::Integrity } else { FailureKind::Config },
                message: e.to_string(),
            })?;
        if ledger.blocks().is_empty() {
            ledger
                .seal(clock.now(), true)
                .map_err(|e| StartupError::config("ledger", format!("writing genesis block: {e}")))?;
        }
        let ledger = Arc::new(RwLock::new(ledger));

        let mut name_keys = HashMap::new();
        for (_, b) in registrations.devices() {
            let key = b.patient.patient_key;
            if !name_keys.contains_key(&key) {
                name_keys.insert(key, patient_name_key(&config, &key, true)?);
            }
        }
        let pipeline = IngestPipeline::new(cas.clone(), templates.clone(), ledger.clone(), GATEWAY_SIGNER, gateway_key)
            .with_name_keys(name_keys)
            .with_max_batch(config.max_batch)
            .with_skew_budget(config.clock_skew_budget_ms)
            .with_receipt_log(&config.data_dir.join("ingest"))
            .map_err(|e| StartupError::config("ingest", e))?;

        let mut directory = Directory::default();
        for (_, b) in registrations.devices() {
            let template = templates.get(&b.template).expect("checked above");
            directory.add_patient(b.patient.patient_key, Some(b.patient.clone()), Some(&b.patient_id));
            let identity = crate::identity::DeviceIdentity {
                patient_id: b.patient_id.clone(),
                device_id: b.device_id.clone(),
                nomenclature_code: template.identifiers.nomenclature_code,
            };
            directory.add_device(b.patient.patient_key, identity, (*template).clone());
        }

        let node = Node {
            config,
            clock,
            cas,
            templates,
            registrations,
            ledger,
            pipeline,
            directory,
            admin_key,
            outbox: Mutex::new(Vec::new()),
            ready: AtomicBool::new(false),
        };
        node.ready.store(true, Ordering::SeqCst);
        Ok(node)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::SeqCst)
    }

    pub fn cas(&self) -> &Arc<CasStore> {
        &self.cas
    }

    pub fn templates(&self) -> &Arc<TemplateRegistry> {
        &self.templates
    }

    pub fn registrations(&self) -> &Arc<Registrations> {
        &self.registrations
    }

    /// Key that verifies the patient's name records.
    pub fn name_public_key(&self, patient: &PatientKey) -> PublicKey {
        self.pipeline.name_key(patient).public_key()
    }

    pub fn ledger(&self) -> &Arc<RwLock<Ledger>> {
        &self.ledger
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn state(&self) -> Arc<LedgerState> {
        self.ledger.read().expect("ledger lock").state()
    }

    pub fn ingest(&self, batch: &IngestBatch) -> Result<IngestReceipt, IngestError> {
        if !self.is_ready() {
            return Err(IngestError::Busy);
        }
        self.pipeline.ingest(batch)
    }

    pub fn pipeline(&self) -> &IngestPipeline {
        &self.pipeline
    }

    /// Seals when the pending count or the interval on the node clock says so.
    pub fn tick(&self) -> Result<Option<SealOutcome>, NodeError> {
        let now = self.now();
        if !self.ledger.read().expect("ledger lock").should_seal(now) {
            return Ok(None);
        }
        self.seal_pending()
    }

    /// Seals whatever is pending now; no block when nothing is.
    pub fn seal_pending(&self) -> Result<Option<SealOutcome>, NodeError> {
        let now = self.now();
        let out = self.ledger.write().expect("ledger lock").seal(now, false)?;
        if let Some(o) = &out {
            tracing::info!(height = o.block.height, txs = o.block.transactions.len(), alerts = o.new_alerts.len(), "sealed block");
            self.outbox.lock().expect("outbox lock").extend(o.new_alerts.iter().cloned());
        }
        Ok(out)
    }

    /// Alerts recorded since the last call, for outbound delivery.
    pub fn take_alerts(&self) -> Vec<AlertEvent> {
        std::mem::take(&mut *self.outbox.lock().expect("outbox lock"))
    }

    /// Final seal; returns the store digest and state digest of committed data.
    pub fn drain(&self) -> Result<(Digest32, Digest32), NodeError> {
        self.ready.store(false, Ordering::SeqCst);
        let result = self.seal_pending();
        let digests = self.digests();
        result.map(|_| digests)
    }

    pub fn digests(&self) -> (Digest32, Digest32) {
        (self.cas.store_digest(), self.ledger.read().expect("ledger lock").state_digest())
    }

    pub fn status(&self) -> NodeStatus {
        let ledger = self.ledger.read().expect("ledger lock");
        let state = ledger.state();
        NodeStatus {
            ready: self.is_ready(),
            height: state.tip.as_ref().map_or(0, |t| t.height),
            tip: state.tip_hash(),
            pending: ledger.pending_len(),
            state_digest: state.state_digest(),
            store_digest: self.cas.store_digest(),
            objects: self.cas.addresses().len(),
            alerts: state.alerts.len(),
        }
    }

    pub fn fhir_search(&self, resource: &str, query: &SearchQuery, principal: &Principal) -> Result<Value, SearchError> {
        let state = self.state();
        let svc = FhirService { state: &state, objects: self.cas.as_ref(), directory: &self.directory };
        svc.search(resource, query, principal)
    }

    /// Records an access grant or revocation, signed by the node's admin key.
    pub fn set_access(&self, grant: bool, grantee: &str, patient: PatientKey, scope: Action) -> Result<Digest32, NodeError> {
        let doc = AccessGrantDoc { grantee: grantee.to_string(), scope };
        let addr = self.cas.put_json(&doc).map_err(|e| NodeError::Storage(e.to_string()))?;
        let kind = if grant { TxKind::AccessGrant } else { TxKind::AccessRevoke };
        let tx = TransferTransaction::new_signed(kind, patient, addr, self.now(), ADMIN_SIGNER, &self.admin_key);
        self.submit(tx)
    }

    fn submit(&self, tx: TransferTransaction) -> Result<Digest32, NodeError> {
        let id = tx.tx_id;
        match self.ledger.read().expect("ledger lock").submit_tx(tx) {
            Ok(()) | Err(SubmitError::Duplicate) => Ok(id),
            Err(e) => Err(NodeError::Rejected(e.to_string())),
        }
    }

    /// Builds and submits a summary for every patient with a summarization
    /// contract. The window ends at the last millisecond of `day_end`'s day,
    /// or of the day of the patient's latest observation.
    pub fn publish_summaries(&self, day_end: Option<chrono::NaiveDate>) -> Result<Vec<(PatientKey, Digest32)>, NodeError> {
        let state = self.state();
        let ledger = self.ledger.read().expect("ledger lock");
        let mut out = Vec::new();
        for patient in ledger.contracts().patients().copied().collect::<Vec<_>>() {
            let Some(spec) = ledger.contracts().find(&patient, ContractKind::Summarization) else { continue };
            let Some(sspec) = &spec.summarization else { continue };
            let refs = state.patient_observations(&patient);
            let Some(day) = day_end.or_else(|| refs.last().map(|r| r.effective_time.date())) else { continue };
            let end = Timestamp::start_of_day(day).plus_millis(MILLIS_PER_DAY - 1);
            let window = Window::new(end.plus_millis(-(i64::from(sspec.window_days) * MILLIS_PER_DAY)), end);
            let mut obs = Vec::new();
            for r in refs.iter().filter(|r| window.contains(r.effective_time)) {
                let bytes = self.cas.get(&r.address).map_err(|e| NodeError::Storage(e.to_string()))?;
                let o: CanonicalObservation =
                    serde_json::from_slice(&bytes).map_err(|e| NodeError::Storage(e.to_string()))?;
                obs.push(Observed { address: r.address, obs: o });
            }
            let report = summarize(&obs, sspec, window, patient);
            let addr = self.cas.put(&report.to_canonical_json()).map_err(|e| NodeError::Storage(e.to_string()))?;
            let tx = TransferTransaction::new_signed(
                TxKind::SummaryPublished,
                patient,
                addr,
                end,
                GATEWAY_SIGNER,
                self.pipeline_key(),
            );
            let id = tx.tx_id;
            match ledger.submit_tx(tx) {
                Ok(()) | Err(SubmitError::Duplicate) => out.push((patient, id)),
                Err(e) => return Err(NodeError::Rejected(e.to_string())),
            }
        }
        Ok(out)
    }

    fn pipeline_key(&self) -> &SigningKey {
        self.pipeline.key()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock() {
        let c = SimClock::new(Timestamp::from_millis(10));
        assert_eq!(c.advance(5), Timestamp::from_millis(15));
        c.set(Timestamp::from_millis(3));
        assert_eq!(c.now(), Timestamp::from_millis(3));
    }

    #[test]
    fn keystore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("keys/gateway.seed");
        let a = load_or_create_key(&p).unwrap();
        let b = load_or_create_key(&p).unwrap();
        assert_eq!(a.public_key(), b.public_key());
        std::fs::write(&p, "zz").unwrap();
        assert!(load_or_create_key(&p).is_err());
    }

    #[test]
    fn patient_name_keys_are_separate_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GatewayConfig { data_dir: dir.path().to_path_buf(), ..GatewayConfig::default() };
        let (p1, p2) = (PatientKey(Digest32::of(b"one")), PatientKey(Digest32::of(b"two")));
        assert!(patient_name_key(&cfg, &p1, false).is_err());
        let k1 = patient_name_key(&cfg, &p1, true).unwrap();
        let k2 = patient_name_key(&cfg, &p2, true).unwrap();
        assert_ne!(k1.public_key(), k2.public_key());
        assert_eq!(patient_name_key(&cfg, &p1, false).unwrap().public_key(), k1.public_key());
    }
}
