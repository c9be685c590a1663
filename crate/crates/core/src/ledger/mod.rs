//! Append-only proof-of-work chain of signed transfer transactions, and the
//! deterministic state obtained by replaying it.

mod apply;
mod block;
mod chain;
mod codec;
mod signers;
mod state;
mod tx;

pub use apply::{apply_block, replay, ApplyEnv, ApplyError, ApplyOutcome, MemoryObjects, ObjectSource};
pub use block::{
    cumulative_work, decode_chain, encode_chain, meets_difficulty, merkle_root, prefer_candidate, seal_block,
    validate_block, validate_chain, validate_encoded, Block, ChainError, MAX_DIFFICULTY_BITS,
};
pub use chain::{read_chain_file, Ledger, LedgerConfig, LedgerError, SealOutcome, SubmitError, CHAIN_FILE, MEMPOOL_FILE};
pub use codec::DecodeError;
pub use signers::{SignerEntry, SignerRegistry};
pub use state::{AccessGrant, AccessGrantDoc, AlertRecord, LedgerState, ObsRef, Tip};
pub use tx::{TransferTransaction, TxKind};
