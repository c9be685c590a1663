use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::apply::{apply_block, ApplyEnv, ApplyError, ObjectSource};
use super::block::{prefer_candidate, seal_block, validate_block, validate_chain, Block, ChainError};
use super::signers::SignerRegistry;
use super::state::LedgerState;
use super::tx::TransferTransaction;
use crate::contracts::{AlertEvent, ContractSet};
use crate::digest::Digest32;
use crate::time::Timestamp;

pub const CHAIN_FILE: &str = "chain.dat";
pub const MEMPOOL_FILE: &str = "mempool.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerConfig {
    pub difficulty_bits: u32,
    /// Seal once this many transactions are pending.
    pub seal_threshold: usize,
    /// Seal pending transactions once this long has passed since the last seal.
    pub seal_interval_ms: i64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig { difficulty_bits: 12, seal_threshold: 10, seal_interval_ms: 5_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("rejected: {0}")]
    Invalid(String),
    #[error("rejected: bad signature")]
    BadSignature,
    #[error("rejected: duplicate")]
    Duplicate,
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger I/O: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Chain(#[from] ChainError),
    #[error("{0}")]
    Apply(#[from] ApplyError),
}

impl LedgerError {
    pub fn is_integrity(&self) -> bool {
        !matches!(self, LedgerError::Io(_))
    }
}

#[derive(Debug, Clone)]
pub struct SealOutcome {
    pub block: Block,
    pub new_alerts: Vec<AlertEvent>,
    pub ignored: Vec<(Digest32, String)>,
}

/// Chain writer: holds the chain, the replayed state and the mempool. Submissions
/// take `&self`; sealing and fork adoption take `&mut self`.
pub struct Ledger {
    config: LedgerConfig,
    signers: SignerRegistry,
    contracts: ContractSet,
    objects: Arc<dyn ObjectSource + Send + Sync>,
    blocks: Vec<Block>,
    chain_ids: HashSet<Digest32>,
    state: Arc<LedgerState>,
    mempool: Mutex<BTreeMap<Digest32, TransferTransaction>>,
    dir: Option<PathBuf>,
    last_seal: Mutex<Option<Timestamp>>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger")
            .field("height", &self.blocks.len())
            .field("pending", &self.pending_len())
            .finish_non_exhaustive()
    }
}

impl Ledger {
    pub fn in_memory(
        config: LedgerConfig,
        signers: SignerRegistry,
        contracts: ContractSet,
        objects: Arc<dyn ObjectSource + Send + Sync>,
    ) -> Self {
        Ledger {
            config,
            signers,
            contracts,
            objects,
            blocks: Vec::new(),
            chain_ids: HashSet::new(),
            state: Arc::new(LedgerState::default()),
            mempool: Mutex::new(BTreeMap::new()),
            dir: None,
            last_seal: Mutex::new(None),
        }
    }

    /// Opens the chain under `dir`, validating and replaying it. A torn final record
    /// (crash during append) is cut off; any other defect is an error.
    pub fn open(
        dir: &Path,
        config: LedgerConfig,
        signers: SignerRegistry,
        contracts: ContractSet,
        objects: Arc<dyn ObjectSource + Send + Sync>,
    ) -> Result<Self, LedgerError> {
        fs::create_dir_all(dir)?;
        let mut ledger = Self::in_memory(config, signers, contracts, objects);
        ledger.dir = Some(dir.to_path_buf());
        let path = dir.join(CHAIN_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (blocks, good_len) = read_records(&bytes)?;
        if good_len < bytes.len() {
            tracing::warn!(dropped = bytes.len() - good_len, "truncating torn tail of chain file");
            OpenOptions::new().write(true).open(&path)?.set_len(good_len as u64)?;
        }
        validate_chain(&blocks, &ledger.signers)?;
        let env = ApplyEnv { objects: ledger.objects.as_ref(), contracts: &ledger.contracts };
        let mut state = LedgerState::default();
        for b in &blocks {
            state = apply_block(&state, b, &env)?.state;
        }
        ledger.chain_ids = blocks.iter().flat_map(|b| b.tx_ids()).collect();
        ledger.blocks = blocks;
        ledger.state = Arc::new(state);

        // Pending transactions that survived a crash.
        if let Ok(text) = fs::read_to_string(dir.join(MEMPOOL_FILE)) {
            let mut pool = ledger.mempool.lock().expect("mempool lock");
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let Ok(raw) = hex::decode(line.trim()) else { continue };
                let Ok(tx) = TransferTransaction::decode(&raw) else { continue };
                if tx.computed_id() == tx.tx_id
                    && ledger.signers.check(&tx).is_ok()
                    && !ledger.chain_ids.contains(&tx.tx_id)
                {
                    pool.insert(tx.tx_id, tx);
                }
            }
        }
        Ok(ledger)
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn signers(&self) -> &SignerRegistry {
        &self.signers
    }

    pub fn contracts(&self) -> &ContractSet {
        &self.contracts
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn state(&self) -> Arc<LedgerState> {
        Arc::clone(&self.state)
    }

    pub fn state_digest(&self) -> Digest32 {
        self.state.state_digest()
    }

    pub fn contains_tx(&self, id: &Digest32) -> bool {
        self.chain_ids.contains(id) || self.mempool.lock().expect("mempool lock").contains_key(id)
    }

    pub fn pending_len(&self) -> usize {
        self.mempool.lock().expect("mempool lock").len()
    }

    pub fn pending(&self) -> Vec<TransferTransaction> {
        self.mempool.lock().expect("mempool lock").values().cloned().collect()
    }

    /// Admits a signed transaction into the mempool exactly once.
    pub fn submit_tx(&self, tx: TransferTransaction) -> Result<(), SubmitError> {
        if tx.computed_id() != tx.tx_id {
            return Err(SubmitError::Invalid("tx_id does not match content".into()));
        }
        match self.signers.check(&tx) {
            Ok(()) => {}
            Err(e) if e == "bad signature" => return Err(SubmitError::BadSignature),
            Err(e) => return Err(SubmitError::Invalid(e)),
        }
        let mut pool = self.mempool.lock().expect("mempool lock");
        if self.chain_ids.contains(&tx.tx_id) || pool.contains_key(&tx.tx_id) {
            return Err(SubmitError::Duplicate);
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(MEMPOOL_FILE))
                .map_err(|e| SubmitError::Invalid(format!("mempool log: {e}")))?;
            writeln!(f, "{}", hex::encode(tx.encode())).map_err(|e| SubmitError::Invalid(format!("mempool log: {e}")))?;
        }
        pool.insert(tx.tx_id, tx);
        Ok(())
    }

    pub fn should_seal(&self, now: Timestamp) -> bool {
        let pending = self.pending_len();
        if pending == 0 {
            return false;
        }
        if pending >= self.config.seal_threshold {
            return true;
        }
        let mut last = self.last_seal.lock().expect("seal clock lock");
        match *last {
            Some(t) => now.millis() - t.millis() >= self.config.seal_interval_ms,
            None => {
                // Start the interval at the first pending check.
                *last = Some(now);
                false
            }
        }
    }

    /// Seals every pending transaction into one block and applies it.
    /// Returns `None` when the mempool is empty and `allow_empty` is false.
    pub fn seal(&mut self, now: Timestamp, allow_empty: bool) -> Result<Option<SealOutcome>, LedgerError> {
        let txs = self.pending();
        if txs.is_empty() && !allow_empty {
            return Ok(None);
        }
        let block = seal_block(txs, self.blocks.last(), self.config.difficulty_bits, 0);
        let outcome = self.append(block)?;
        *self.last_seal.lock().expect("seal clock lock") = Some(now);
        Ok(Some(outcome))
    }

    /// Validates, applies and persists a block on top of the current tip.
    pub fn append(&mut self, block: Block) -> Result<SealOutcome, LedgerError> {
        let mut seen = self.chain_ids.clone();
        validate_block(&block, self.blocks.last(), &self.signers, &mut seen)?;
        let env = ApplyEnv { objects: self.objects.as_ref(), contracts: &self.contracts };
        let applied = apply_block(&self.state, &block, &env)?;
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(CHAIN_FILE))?;
            let bytes = block.encode();
            let mut rec = Vec::with_capacity(bytes.len() + 4);
            rec.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            rec.extend_from_slice(&bytes);
            f.write_all(&rec)?;
            f.sync_data()?;
        }
        self.chain_ids = seen;
        {
            let mut pool = self.mempool.lock().expect("mempool lock");
            for id in block.tx_ids() {
                pool.remove(&id);
            }
            self.rewrite_mempool_log(&pool)?;
        }
        for (id, why) in &applied.ignored {
            tracing::warn!(tx = %id, reason = %why, "transaction had no effect");
        }
        self.state = Arc::new(applied.state);
        self.blocks.push(block.clone());
        Ok(SealOutcome { block, new_alerts: applied.new_alerts, ignored: applied.ignored })
    }

    fn rewrite_mempool_log(&self, pool: &BTreeMap<Digest32, TransferTransaction>) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let tmp = dir.join(format!("{MEMPOOL_FILE}.tmp"));
        let mut f = File::create(&tmp)?;
        for tx in pool.values() {
            writeln!(f, "{}", hex::encode(tx.encode()))?;
        }
        f.sync_data()?;
        fs::rename(tmp, dir.join(MEMPOOL_FILE))
    }

    /// Adopts `candidate` if it is valid and preferred by fork choice. Transactions
    /// from abandoned blocks that are not on the new chain return to the mempool.
    pub fn consider_chain(&mut self, candidate: &[Block]) -> Result<bool, LedgerError> {
        if !prefer_candidate(&self.blocks, candidate) {
            return Ok(false);
        }
        validate_chain(candidate, &self.signers)?;
        let env = ApplyEnv { objects: self.objects.as_ref(), contracts: &self.contracts };
        let mut state = LedgerState::default();
        for b in candidate {
            state = apply_block(&state, b, &env)?.state;
        }
        let new_ids: HashSet<Digest32> = candidate.iter().flat_map(|b| b.tx_ids()).collect();
        let orphans: Vec<TransferTransaction> = self
            .blocks
            .iter()
            .flat_map(|b| b.transactions.iter())
            .filter(|t| !new_ids.contains(&t.tx_id))
            .cloned()
            .collect();
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!("{CHAIN_FILE}.tmp"));
            fs::write(&tmp, super::block::encode_chain(candidate))?;
            fs::rename(tmp, dir.join(CHAIN_FILE))?;
        }
        self.blocks = candidate.to_vec();
        self.chain_ids = new_ids;
        self.state = Arc::new(state);
        let mut pool = self.mempool.lock().expect("mempool lock");
        pool.retain(|id, _| !self.chain_ids.contains(id));
        for tx in orphans {
            pool.insert(tx.tx_id, tx);
        }
        self.rewrite_mempool_log(&pool)?;
        Ok(true)
    }
}

/// Splits a chain file into blocks, returning how many bytes formed complete records.
/// Reads a chain file without validating it. The flag reports a torn final record.
pub fn read_chain_file(path: &Path) -> Result<(Vec<Block>, bool), LedgerError> {
    let bytes = fs::read(path)?;
    let (blocks, good) = read_records(&bytes)?;
    Ok((blocks, good < bytes.len()))
}

fn read_records(bytes: &[u8]) -> Result<(Vec<Block>, usize), ChainError> {
    let mut blocks = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let h = blocks.len() as u64;
        if bytes.len() - off < 4 {
            break;
        }
        let len = u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        if bytes.len() - off - 4 < len {
            break;
        }
        let block = Block::decode(&bytes[off + 4..off + 4 + len]).map_err(|e| ChainError::new(h, e.to_string()))?;
        blocks.push(block);
        off += 4 + len;
    }
    Ok((blocks, off))
}
