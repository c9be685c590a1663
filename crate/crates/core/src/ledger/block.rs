use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::codec::{DecodeError, Reader};
use super::signers::SignerRegistry;
use super::tx::TransferTransaction;
use crate::digest::Digest32;
use crate::time::Timestamp;

pub const BLOCK_MAGIC: &[u8; 8] = b"BIOTBLK\x01";
pub const MAX_DIFFICULTY_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest32,
    pub merkle_root: Digest32,
    pub timestamp: Timestamp,
    pub nonce: u64,
    pub difficulty_bits: u32,
    pub transactions: Vec<TransferTransaction>,
    /// Seal recorded with the block; must equal the recomputed header hash.
    pub hash: Digest32,
}

fn header_bytes(
    height: u64,
    prev: &Digest32,
    merkle: &Digest32,
    timestamp: Timestamp,
    bits: u32,
    tx_count: u32,
    nonce: u64,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 + 32 + 32 + 8 + 1 + 4 + 8);
    out.extend_from_slice(BLOCK_MAGIC);
    out.extend_from_slice(&height.to_be_bytes());
    out.extend_from_slice(prev.as_bytes());
    out.extend_from_slice(merkle.as_bytes());
    out.extend_from_slice(&timestamp.millis().to_be_bytes());
    out.push(bits as u8);
    out.extend_from_slice(&tx_count.to_be_bytes());
    out.extend_from_slice(&nonce.to_be_bytes());
    out
}

/// Binary Merkle root over tx ids. Interior nodes hash `0x01 || left || right`;
/// an odd node is paired with itself. Empty list gives all-zeros.
pub fn merkle_root(ids: &[Digest32]) -> Digest32 {
    if ids.is_empty() {
        return Digest32::ZERO;
    }
    let mut level: Vec<Digest32> = ids.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                Digest32::of_parts([&[1u8][..], pair[0].as_bytes(), right.as_bytes()])
            })
            .collect();
    }
    level[0]
}

pub fn meets_difficulty(hash: &Digest32, bits: u32) -> bool {
    hash.leading_zero_bits() >= bits
}

impl Block {
    pub fn header(&self) -> Vec<u8> {
        header_bytes(
            self.height,
            &self.prev_hash,
            &self.merkle_root,
            self.timestamp,
            self.difficulty_bits,
            self.transactions.len() as u32,
            self.nonce,
        )
    }

    pub fn compute_hash(&self) -> Digest32 {
        Digest32::of(&self.header())
    }

    pub fn tx_ids(&self) -> Vec<Digest32> {
        self.transactions.iter().map(|t| t.tx_id).collect()
    }

    pub fn work(&self) -> u128 {
        1u128 << self.difficulty_bits.min(MAX_DIFFICULTY_BITS)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header();
        for tx in &self.transactions {
            let bytes = tx.encode();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out.extend_from_slice(self.hash.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.expect(BLOCK_MAGIC)?;
        let height = r.u64()?;
        let prev_hash = Digest32(r.array()?);
        let merkle_root = Digest32(r.array()?);
        let timestamp = Timestamp::from_millis(r.i64()?);
        let difficulty_bits = u32::from(r.u8()?);
        let count = r.u32()? as usize;
        let nonce = r.u64()?;
        let mut transactions = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            transactions.push(TransferTransaction::decode(r.take(len)?)?);
        }
        let hash = Digest32(r.array()?);
        r.finish()?;
        Ok(Block { height, prev_hash, merkle_root, timestamp, nonce, difficulty_bits, transactions, hash })
    }
}

/// Orders `txs`, fixes the header and searches nonces upward from `nonce_start`
/// until the hash has `difficulty_bits` leading zero bits. The timestamp is the
/// latest of the previous block's timestamp and the transactions' issue times.
pub fn seal_block(
    mut txs: Vec<TransferTransaction>,
    prev: Option<&Block>,
    difficulty_bits: u32,
    nonce_start: u64,
) -> Block {
    txs.sort_by_key(|t| t.order_key());
    txs.dedup_by_key(|t| t.tx_id);
    let height = prev.map_or(0, |p| p.height + 1);
    let prev_hash = prev.map_or(Digest32::ZERO, |p| p.hash);
    let prev_ts = prev.map_or(Timestamp::from_millis(0), |p| p.timestamp);
    let timestamp = txs.iter().map(|t| t.issued_at).max().map_or(prev_ts, |m| m.max(prev_ts));
    let merkle = merkle_root(&txs.iter().map(|t| t.tx_id).collect::<Vec<_>>());
    let mut header = header_bytes(height, &prev_hash, &merkle, timestamp, difficulty_bits, txs.len() as u32, 0);
    let nonce_at = header.len() - 8;
    let mut nonce = nonce_start;
    let hash = loop {
        header[nonce_at..].copy_from_slice(&nonce.to_be_bytes());
        let h = Digest32::of(&header);
        if meets_difficulty(&h, difficulty_bits) {
            break h;
        }
        nonce = nonce.wrapping_add(1);
    };
    Block { height, prev_hash, merkle_root: merkle, timestamp, nonce, difficulty_bits, transactions: txs, hash }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainError {
    pub height: u64,
    pub reason: String,
}

impl ChainError {
    pub fn new(height: u64, reason: impl Into<String>) -> Self {
        ChainError { height, reason: reason.into() }
    }
}

impl fmt::Display for ChainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid block at height {}: {}", self.height, self.reason)
    }
}

impl std::error::Error for ChainError {}

/// Checks one block against its predecessor. `seen` holds tx ids already on the
/// chain and is extended on success.
pub fn validate_block(
    block: &Block,
    prev: Option<&Block>,
    signers: &SignerRegistry,
    seen: &mut HashSet<Digest32>,
) -> Result<(), ChainError> {
    let h = block.height;
    let err = |reason: String| Err(ChainError::new(h, reason));
    let expected_height = prev.map_or(0, |p| p.height + 1);
    if h != expected_height {
        return err(format!("height {h} follows {expected_height}"));
    }
    let expected_prev = prev.map_or(Digest32::ZERO, |p| p.hash);
    if block.prev_hash != expected_prev {
        return err("prev_hash does not link to the previous block".into());
    }
    if block.difficulty_bits > MAX_DIFFICULTY_BITS {
        return err(format!("difficulty {} out of range", block.difficulty_bits));
    }
    if block.compute_hash() != block.hash {
        return err("recorded hash does not match header".into());
    }
    if !meets_difficulty(&block.hash, block.difficulty_bits) {
        return err(format!("hash does not meet {} bits of work", block.difficulty_bits));
    }
    if merkle_root(&block.tx_ids()) != block.merkle_root {
        return err("merkle root mismatch".into());
    }
    if let Some(p) = prev {
        if block.timestamp < p.timestamp {
            return err("timestamp precedes previous block".into());
        }
    }
    let mut prev_key = None;
    let mut added = HashSet::with_capacity(block.transactions.len());
    for tx in &block.transactions {
        let fail = |reason: String| Err(ChainError::new(h, reason));
        if tx.computed_id() != tx.tx_id {
            return fail(format!("tx {} id does not match its content", tx.tx_id));
        }
        if let Err(e) = signers.check(tx) {
            return fail(format!("tx {}: {e}", tx.tx_id));
        }
        if tx.issued_at > block.timestamp {
            return fail(format!("tx {} issued after its block", tx.tx_id));
        }
        let key = tx.order_key();
        if prev_key.is_some_and(|p| p >= key) {
            return fail("transactions not ordered by (issued_at, tx_id)".into());
        }
        prev_key = Some(key);
        if seen.contains(&tx.tx_id) || !added.insert(tx.tx_id) {
            return fail(format!("tx {} appears twice", tx.tx_id));
        }
    }
    seen.extend(added);
    Ok(())
}

pub fn validate_chain(blocks: &[Block], signers: &SignerRegistry) -> Result<(), ChainError> {
    let mut seen = HashSet::new();
    let mut prev = None;
    for b in blocks {
        validate_block(b, prev, signers, &mut seen)?;
        prev = Some(b);
    }
    Ok(())
}

/// Chain file body: each block as a u32 length followed by its encoding.
pub fn encode_chain(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blocks {
        let bytes = b.encode();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

/// Strict decode; the error height is the index of the first unreadable record.
pub fn decode_chain(bytes: &[u8]) -> Result<Vec<Block>, ChainError> {
    let mut r = Reader::new(bytes);
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let h = blocks.len() as u64;
        let len = r.u32().map_err(|e| ChainError::new(h, e.to_string()))? as usize;
        let rec = r.take(len).map_err(|e| ChainError::new(h, e.to_string()))?;
        blocks.push(Block::decode(rec).map_err(|e| ChainError::new(h, e.to_string()))?);
    }
    Ok(blocks)
}

/// Decodes and validates a chain file body, returning the block count.
pub fn validate_encoded(bytes: &[u8], signers: &SignerRegistry) -> Result<usize, ChainError> {
    let blocks = decode_chain(bytes)?;
    validate_chain(&blocks, signers)?;
    Ok(blocks.len())
}

pub fn cumulative_work(blocks: &[Block]) -> u128 {
    blocks.iter().map(Block::work).sum()
}

/// Fork choice: more cumulative work wins; equal work goes to the lower tip hash.
pub fn prefer_candidate(current: &[Block], candidate: &[Block]) -> bool {
    let (cw, nw) = (cumulative_work(current), cumulative_work(candidate));
    if nw != cw {
        return nw > cw;
    }
    match (current.last(), candidate.last()) {
        (Some(c), Some(n)) => n.hash < c.hash,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cas::ContentAddress;
    use crate::identity::PatientKey;
    use crate::ledger::signers::SignerEntry;
    use crate::ledger::tx::TxKind;
    use crate::principal::Role;
    use crate::signing::{Signature, SigningKey};

    fn gateway() -> (SigningKey, SignerRegistry) {
        let k = SigningKey::from_seed([9; 32]);
        let reg = SignerRegistry::new([SignerEntry {
            principal: "gw".into(),
            public_key: k.public_key(),
            role: Role::Gateway,
            patient_key: None,
        }]);
        (k, reg)
    }

    fn tx(k: &SigningKey, i: u64) -> TransferTransaction {
        TransferTransaction::new_signed(
            TxKind::DataTransfer,
            PatientKey(Digest32::of(&i.to_be_bytes())),
            ContentAddress::of(&i.to_le_bytes()),
            Timestamp::from_millis(1_000_000 + (i as i64 % 7) * 1000),
            "gw",
            k,
        )
    }

    fn chain(k: &SigningKey, n: usize, bits: u32) -> Vec<Block> {
        let mut blocks: Vec<Block> = Vec::new();
        for b in 0..n {
            let txs = (0..3).map(|j| tx(k, (b * 3 + j) as u64)).collect();
            let blk = seal_block(txs, blocks.last(), bits, 0);
            blocks.push(blk);
        }
        blocks
    }

    #[test]
    fn sealed_block_meets_difficulty() {
        let (k, reg) = gateway();
        let b = seal_block(vec![tx(&k, 1), tx(&k, 2)], None, 8, 0);
        assert!(b.compute_hash().leading_zero_bits() >= 8);
        assert_eq!(b.compute_hash(), b.hash);
        validate_chain(std::slice::from_ref(&b), &reg).unwrap();
        let zero = seal_block(vec![tx(&k, 1)], None, 0, 0);
        assert_eq!(zero.nonce, 0);
    }

    #[test]
    fn sealing_is_deterministic() {
        let (k, _) = gateway();
        let a = seal_block(vec![tx(&k, 2), tx(&k, 1)], None, 10, 0);
        let b = seal_block(vec![tx(&k, 1), tx(&k, 2)], None, 10, 0);
        assert_eq!(a, b);
        assert!(a.transactions.windows(2).all(|w| w[0].order_key() < w[1].order_key()));
    }

    #[test]
    fn honest_chain_validates_and_round_trips() {
        let (k, reg) = gateway();
        let blocks = chain(&k, 10, 6);
        validate_chain(&blocks, &reg).unwrap();
        let bytes = encode_chain(&blocks);
        assert_eq!(decode_chain(&bytes).unwrap(), blocks);
        assert_eq!(validate_encoded(&bytes, &reg).unwrap(), 10);
    }

    #[test]
    fn zeroed_nonce_is_caught_at_its_height() {
        let (k, reg) = gateway();
        let mut blocks = chain(&k, 10, 6);
        assert_ne!(blocks[5].nonce, 0, "fixture should need a search");
        blocks[5].nonce = 0;
        assert_eq!(validate_chain(&blocks, &reg).unwrap_err().height, 5);
    }

    #[test]
    fn stripped_signature_is_caught() {
        let (k, reg) = gateway();
        let mut blocks = chain(&k, 4, 4);
        blocks[2].transactions[1].signature = Signature::EMPTY;
        assert_eq!(validate_chain(&blocks, &reg).unwrap_err().height, 2);
    }

    #[test]
    fn unregistered_signer_rejected() {
        let (k, _) = gateway();
        let blocks = chain(&k, 2, 2);
        assert!(validate_chain(&blocks, &SignerRegistry::default()).is_err());
    }

    #[test]
    fn duplicate_tx_across_blocks_rejected() {
        let (k, reg) = gateway();
        let b0 = seal_block(vec![tx(&k, 1)], None, 2, 0);
        let b1 = seal_block(vec![tx(&k, 1)], Some(&b0), 2, 0);
        assert_eq!(validate_chain(&[b0, b1], &reg).unwrap_err().height, 1);
    }

    #[test]
    fn merkle_root_values() {
        let a = Digest32::of(b"a");
        let b = Digest32::of(b"b");
        assert_eq!(merkle_root(&[]), Digest32::ZERO);
        assert_eq!(merkle_root(&[a]), a);
        let ab = Digest32::of_parts([&[1u8][..], a.as_bytes(), b.as_bytes()]);
        assert_eq!(merkle_root(&[a, b]), ab);
        let cc = Digest32::of_parts([&[1u8][..], b.as_bytes(), b.as_bytes()]);
        assert_eq!(merkle_root(&[a, b, b]), Digest32::of_parts([&[1u8][..], ab.as_bytes(), cc.as_bytes()]));
    }

    #[test]
    fn fork_choice() {
        let (k, _) = gateway();
        let base = chain(&k, 3, 4);
        let mut heavy = base.clone();
        heavy.push(seal_block(vec![tx(&k, 100)], heavy.last(), 6, 0));
        let mut light = base.clone();
        light.push(seal_block(vec![tx(&k, 101)], light.last(), 4, 0));
        light.push(seal_block(vec![tx(&k, 102)], light.last(), 4, 0));
        // 64 > 16 + 16
        assert!(prefer_candidate(&light, &heavy));
        assert!(!prefer_candidate(&heavy, &light));
        let mut twin = base.clone();
        twin.push(seal_block(vec![tx(&k, 103)], twin.last(), 6, 0));
        let lower_wins = heavy.last().unwrap().hash > twin.last().unwrap().hash;
        assert_eq!(prefer_candidate(&heavy, &twin), lower_wins);
        assert_eq!(prefer_candidate(&twin, &heavy), !lower_wins);
        assert!(!prefer_candidate(&heavy, &heavy));
    }
}
