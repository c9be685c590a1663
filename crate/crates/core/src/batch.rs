//! Layout of an ingest batch inside the content store.
//!
//! ```text
//! <batch dir>/manifest   canonical JSON BatchManifest
//!            /raw/000000 canonical JSON of each accepted payload
//!            /obs/000000 canonical JSON of each observation
//! ```

use serde::{Deserialize, Serialize};

use crate::cas::{CasError, CasStore, ContentAddress, DirEntry, FolderNode, NodeKind};
use crate::contracts::Observed;
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::ledger::ObjectSource;
use crate::observation::CanonicalObservation;

pub const MANIFEST: &str = "manifest";
pub const RAW_DIR: &str = "raw";
pub const OBS_DIR: &str = "obs";

pub fn entry_name(i: usize) -> String {
    format!("{i:06}")
}

/// Name of a batch under its patient's root folder.
pub fn patient_entry_name(batch_id: &Digest32) -> String {
    format!("batch-{}", batch_id.to_hex())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batch_id: Digest32,
    pub principal: String,
    pub patient_key: PatientKey,
    pub device_id: String,
    pub template: String,
    pub payloads: usize,
    pub observations: usize,
}

/// Writes payloads and observations and returns the batch directory address.
pub fn store_batch(
    cas: &CasStore,
    manifest: &BatchManifest,
    raw_payloads: &[Vec<u8>],
    observations: &[CanonicalObservation],
) -> Result<ContentAddress, CasError> {
    let leaf_dir = |items: Vec<Vec<u8>>| -> Result<(ContentAddress, u64), CasError> {
        let mut node = FolderNode::default();
        for (i, bytes) in items.into_iter().enumerate() {
            let address = cas.put(&bytes)?;
            node.insert(DirEntry { name: entry_name(i), address, size: bytes.len() as u64, kind: NodeKind::Leaf })?;
        }
        let enc = node.encode();
        Ok((cas.put(&enc)?, enc.len() as u64))
    };
    let (raw_addr, raw_size) = leaf_dir(raw_payloads.to_vec())?;
    let (obs_addr, obs_size) = leaf_dir(observations.iter().map(CanonicalObservation::to_canonical_json).collect())?;
    let manifest_bytes = crate::canonical::to_canonical_json(manifest);
    let manifest_addr = cas.put(&manifest_bytes)?;
    let root = FolderNode::new(vec![
        DirEntry { name: MANIFEST.into(), address: manifest_addr, size: manifest_bytes.len() as u64, kind: NodeKind::Leaf },
        DirEntry { name: RAW_DIR.into(), address: raw_addr, size: raw_size, kind: NodeKind::Directory },
        DirEntry { name: OBS_DIR.into(), address: obs_addr, size: obs_size, kind: NodeKind::Directory },
    ])?;
    cas.put_directory(&root)
}

fn read_dir(objects: &dyn ObjectSource, addr: &ContentAddress) -> Result<FolderNode, String> {
    let bytes = objects.fetch(addr)?;
    FolderNode::decode(&bytes).map_err(|_| format!("{addr} is not a directory"))
}

pub fn read_manifest(objects: &dyn ObjectSource, batch: &ContentAddress) -> Result<BatchManifest, String> {
    let root = read_dir(objects, batch)?;
    let entry = root.get(MANIFEST).ok_or_else(|| format!("batch {batch} has no manifest"))?;
    serde_json::from_slice(&objects.fetch(&entry.address)?).map_err(|e| format!("manifest of {batch}: {e}"))
}

/// Observations of a batch, in stored order.
pub fn read_observations(objects: &dyn ObjectSource, batch: &ContentAddress) -> Result<Vec<Observed>, String> {
    let root = read_dir(objects, batch)?;
    let entry = root.get(OBS_DIR).ok_or_else(|| format!("batch {batch} has no {OBS_DIR} folder"))?;
    let dir = read_dir(objects, &entry.address)?;
    dir.entries()
        .iter()
        .map(|e| {
            let bytes = objects.fetch(&e.address)?;
            let obs: CanonicalObservation =
                serde_json::from_slice(&bytes).map_err(|err| format!("observation {}: {err}", e.address))?;
            Ok(Observed { address: e.address, obs })
        })
        .collect()
}

/// Raw payload bytes of a batch, in stored order.
pub fn read_raw(objects: &dyn ObjectSource, batch: &ContentAddress) -> Result<Vec<Vec<u8>>, String> {
    let root = read_dir(objects, batch)?;
    let entry = root.get(RAW_DIR).ok_or_else(|| format!("batch {batch} has no {RAW_DIR} folder"))?;
    let dir = read_dir(objects, &entry.address)?;
    dir.entries().iter().map(|e| objects.fetch(&e.address)).collect()
}
