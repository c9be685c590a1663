//! Content-addressed object store with Merkle directories and signed names.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! objects/<address>      immutable object bytes, file name = text address
//! names/<patient-key>.log  append-only JSON lines of NameRecord
//! ```

mod address;
mod folder;
mod names;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

pub use address::{AddressParseError, ContentAddress};
pub use folder::{DirEntry, FolderError, FolderNode, NodeKind};
pub use names::NameRecord;

use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::signing::{PublicKey, SigningKey};

#[derive(Debug, thiserror::Error)]
pub enum CasError {
    #[error("storage I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("object {0} not found")]
    NotFound(ContentAddress),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("name {0} not found")]
    NameNotFound(PatientKey),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("stale sequence {got} for {key}: current is {current}")]
    StaleSequence { key: PatientKey, got: u64, current: u64 },
    #[error("{0}")]
    Folder(#[from] FolderError),
}

impl CasError {
    /// Stale-sequence races can be retried with a fresh sequence.
    pub fn is_retryable(&self) -> bool {
        matches!(self, CasError::StaleSequence { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub objects: usize,
    pub directories: usize,
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

#[derive(Debug)]
pub struct CasStore {
    root: PathBuf,
    index: Mutex<BTreeSet<ContentAddress>>,
    // Serializes name publishes; one log per key, compare-and-set on sequence.
    names: Mutex<()>,
}

impl CasStore {
    /// Opens (creating if needed) a store, rebuilding the address index by rescanning `objects/`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CasError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("names"))?;
        let mut index = BTreeSet::new();
        for entry in fs::read_dir(root.join("objects"))? {
            let entry = entry?;
            if let Some(addr) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
                index.insert(addr);
            }
        }
        Ok(CasStore { root, index: Mutex::new(index), names: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, addr: &ContentAddress) -> PathBuf {
        self.root.join("objects").join(addr.to_string())
    }

    fn name_log_path(&self, key: &PatientKey) -> PathBuf {
        self.root.join("names").join(format!("{}.log", key.to_hex()))
    }

    pub fn put(&self, content: &[u8]) -> Result<ContentAddress, CasError> {
        let addr = ContentAddress::of(content);
        let path = self.object_path(&addr);
        if !path.exists() {
            let tmp = self.root.join("objects").join(format!(".tmp-{}-{}", addr, std::process::id()));
            fs::write(&tmp, content)?;
            fs::rename(&tmp, &path)?;
        }
        self.index.lock().expect("index lock").insert(addr);
        Ok(addr)
    }

    pub fn get(&self, addr: &ContentAddress) -> Result<Vec<u8>, CasError> {
        let bytes = match fs::read(self.object_path(addr)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CasError::NotFound(*addr)),
            Err(e) => return Err(e.into()),
        };
        if !addr.verify(&bytes) {
            return Err(CasError::Integrity(format!("object {addr} does not match its digest")));
        }
        Ok(bytes)
    }

    pub fn contains(&self, addr: &ContentAddress) -> bool {
        self.index.lock().expect("index lock").contains(addr)
    }

    pub fn size(&self, addr: &ContentAddress) -> Result<u64, CasError> {
        match fs::metadata(self.object_path(addr)) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CasError::NotFound(*addr)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<ContentAddress, CasError> {
        self.put(&crate::canonical::to_canonical_json(value))
    }

    pub fn put_directory(&self, node: &FolderNode) -> Result<ContentAddress, CasError> {
        self.put(&node.encode())
    }

    pub fn get_directory(&self, addr: &ContentAddress) -> Result<FolderNode, CasError> {
        let bytes = self.get(addr)?;
        FolderNode::decode(&bytes).map_err(|_| CasError::Integrity(format!("{addr} is not a directory node")))
    }

    /// Builds an entry pointing at an existing object.
    pub fn entry_for(&self, name: &str, child: ContentAddress) -> Result<DirEntry, CasError> {
        let bytes = self.get(&child)?;
        let kind = if FolderNode::decode(&bytes).is_ok() { NodeKind::Directory } else { NodeKind::Leaf };
        Ok(DirEntry { name: name.to_string(), address: child, size: bytes.len() as u64, kind })
    }

    /// Returns a new root holding the old entries plus `name -> child`. The old root stays
    /// resolvable. Re-adding an identical entry returns the root unchanged; a different
    /// child under an existing name is a conflict.
    pub fn add_entry(
        &self,
        root: Option<&ContentAddress>,
        name: &str,
        child: ContentAddress,
    ) -> Result<ContentAddress, CasError> {
        let mut node = match root {
            Some(r) => self.get_directory(r)?,
            None => FolderNode::default(),
        };
        if let Some(existing) = node.get(name) {
            if existing.address == child {
                return Ok(*root.expect("entry came from a root"));
            }
            return Err(CasError::Conflict(format!("entry {name:?} already bound to {}", existing.address)));
        }
        node.insert(self.entry_for(name, child)?)?;
        self.put_directory(&node)
    }

    /// Every stored address, sorted.
    pub fn addresses(&self) -> Vec<ContentAddress> {
        self.index.lock().expect("index lock").iter().copied().collect()
    }

    /// Fingerprint of the object set: SHA-256 over the sorted text addresses, one per line.
    pub fn store_digest(&self) -> Digest32 {
        let index = self.index.lock().expect("index lock");
        let mut h = Vec::with_capacity(index.len() * 70);
        for a in index.iter() {
            h.extend_from_slice(a.to_string().as_bytes());
            h.push(b'\n');
        }
        Digest32::of(&h)
    }

    /// Recomputes every object digest and every directory's entries.
    pub fn audit(&self) -> Result<AuditReport, CasError> {
        let mut report = AuditReport::default();
        for addr in self.addresses() {
            report.objects += 1;
            let bytes = match self.get(&addr) {
                Ok(b) => b,
                Err(e) => {
                    report.problems.push(e.to_string());
                    continue;
                }
            };
            if !FolderNode::is_directory_bytes(&bytes) {
                continue;
            }
            let node = match FolderNode::decode(&bytes) {
                Ok(n) => n,
                Err(_) => continue, // a leaf that happens to share the prefix
            };
            report.directories += 1;
            if node.address() != addr {
                report.problems.push(format!("directory {addr} does not re-encode to its address"));
            }
            for e in node.entries() {
                match self.get(&e.address) {
                    Ok(child) if child.len() as u64 != e.size => report
                        .problems
                        .push(format!("{addr}/{}: size {} recorded, {} stored", e.name, e.size, child.len())),
                    Ok(_) => {}
                    Err(err) => report.problems.push(format!("{addr}/{}: {err}", e.name)),
                }
            }
        }
        Ok(report)
    }

    fn read_name_log(&self, key: &PatientKey) -> Result<Vec<NameRecord>, CasError> {
        let file = match fs::File::open(self.name_log_path(key)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for line in io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: NameRecord = serde_json::from_str(&line)
                .map_err(|e| CasError::Integrity(format!("name log for {key}: {e}")))?;
            out.push(rec);
        }
        Ok(out)
    }

    /// All records for a name, in log order.
    pub fn name_history(&self, key: &PatientKey) -> Result<Vec<NameRecord>, CasError> {
        self.read_name_log(key)
    }

    fn latest_record(&self, key: &PatientKey) -> Result<Option<NameRecord>, CasError> {
        Ok(self.read_name_log(key)?.into_iter().max_by_key(|r| r.sequence))
    }

    /// Appends an externally signed record. The sequence must exceed the current one.
    pub fn publish_record(&self, record: &NameRecord, key: &PublicKey) -> Result<(), CasError> {
        if !record.verify(key) {
            return Err(CasError::Integrity(format!("bad signature on record for {}", record.name_key)));
        }
        let _guard = self.names.lock().expect("names lock");
        self.append_if_newer(record)
    }

    fn append_if_newer(&self, record: &NameRecord) -> Result<(), CasError> {
        let current = self.latest_record(&record.name_key)?.map_or(0, |r| r.sequence);
        if record.sequence <= current {
            return Err(CasError::StaleSequence { key: record.name_key, got: record.sequence, current });
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.name_log_path(&record.name_key))?;
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    /// Signs and appends the next record for `name_key`, pointing at `root`.
    pub fn publish_name(
        &self,
        name_key: PatientKey,
        root: ContentAddress,
        key: &SigningKey,
    ) -> Result<NameRecord, CasError> {
        let _guard = self.names.lock().expect("names lock");
        let next = self.latest_record(&name_key)?.map_or(1, |r| r.sequence + 1);
        let record = NameRecord::sign(name_key, root, next, key);
        self.append_if_newer(&record)?;
        Ok(record)
    }

    /// Root of the highest-sequence record, after checking its signature.
    pub fn resolve_name(&self, name_key: &PatientKey, key: &PublicKey) -> Result<ContentAddress, CasError> {
        let latest = self.latest_record(name_key)?.ok_or(CasError::NameNotFound(*name_key))?;
        if !latest.verify(key) {
            return Err(CasError::Integrity(format!(
                "record {} for {name_key} has an invalid signature",
                latest.sequence
            )));
        }
        Ok(latest.root)
    }

    /// Names with at least one record.
    pub fn names(&self) -> Result<Vec<PatientKey>, CasError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("names"))? {
            let name = entry?.file_name();
            if let Some(k) = name.to_str().and_then(|s| s.strip_suffix(".log")).and_then(|s| s.parse().ok()) {
                out.push(k);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Walks a directory tree depth-first, returning `path -> entry` for every reachable node.
    pub fn walk(&self, root: &ContentAddress) -> Result<BTreeMap<String, DirEntry>, CasError> {
        let mut out = BTreeMap::new();
        let mut stack = vec![(String::new(), *root)];
        while let Some((prefix, addr)) = stack.pop() {
            for e in self.get_directory(&addr)?.entries() {
                let path = format!("{prefix}/{}", e.name);
                if e.kind == NodeKind::Directory {
                    stack.push((path.clone(), e.address));
                }
                out.insert(path, e.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest32;

    fn store() -> (tempfile::TempDir, CasStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = CasStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn put_get_and_determinism() {
        let (_d, s) = store();
        let a = s.put(b"hello").unwrap();
        assert_eq!(s.put(b"hello").unwrap(), a);
        assert_eq!(s.get(&a).unwrap(), b"hello");
        assert_ne!(s.put(b"hellp").unwrap(), a);
        let e = s.put(b"").unwrap();
        assert_eq!(e, ContentAddress::of(b""));
        assert_eq!(s.get(&e).unwrap(), b"");
    }

    #[test]
    fn unknown_address_not_found() {
        let (_d, s) = store();
        assert!(matches!(s.get(&ContentAddress::of(b"nope")), Err(CasError::NotFound(_))));
    }

    #[test]
    fn tampered_object_is_an_integrity_error() {
        let (_d, s) = store();
        let a = s.put(b"payload bytes").unwrap();
        let path = s.object_path(&a);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(s.get(&a), Err(CasError::Integrity(_))));
        assert!(!s.audit().unwrap().is_clean());
    }

    #[test]
    fn add_entry_builds_directories() {
        let (_d, s) = store();
        let c = s.put(b"child").unwrap();
        let r1 = s.add_entry(None, "a", c).unwrap();
        let node = s.get_directory(&r1).unwrap();
        assert_eq!(node.entries().len(), 1);
        assert_eq!(node.entries()[0].size, 5);
        assert_eq!(s.add_entry(None, "a", c).unwrap(), r1);
        let c2 = s.put(b"other").unwrap();
        let r2 = s.add_entry(Some(&r1), "b", c2).unwrap();
        assert_eq!(s.get_directory(&r1).unwrap().entries().len(), 1);
        assert_eq!(s.get_directory(&r2).unwrap().entries().len(), 2);
        assert!(matches!(s.add_entry(Some(&r2), "a", c2), Err(CasError::Conflict(_))));
        assert_eq!(s.add_entry(Some(&r2), "a", c).unwrap(), r2);
        let report = s.audit().unwrap();
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(report.directories, 2);
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn insertion_order_does_not_change_root() {
        let (_d, s) = store();
        let children: Vec<_> = (0..5).map(|i| s.put(format!("child {i}").as_bytes()).unwrap()).collect();
        let orders = permutations(&[0, 1, 2, 3, 4]);
        assert_eq!(orders.len(), 120);
        let roots: BTreeSet<_> = orders
            .iter()
            .map(|order| {
                order.iter().fold(None, |root: Option<ContentAddress>, &i| {
                    Some(s.add_entry(root.as_ref(), &format!("e{i}"), children[i]).unwrap())
                })
            })
            .collect();
        assert_eq!(roots.len(), 1);
    }

    #[test]
    fn names_publish_and_resolve() {
        let (_d, s) = store();
        let key = PatientKey(Digest32::of(b"ada"));
        let sk = SigningKey::from_seed([1; 32]);
        let r1 = s.put(b"r1").unwrap();
        let r2 = s.put(b"r2").unwrap();
        assert!(matches!(s.resolve_name(&key, &sk.public_key()), Err(CasError::NameNotFound(_))));
        let rec1 = s.publish_name(key, r1, &sk).unwrap();
        assert_eq!(rec1.sequence, 1);
        let rec2 = s.publish_name(key, r2, &sk).unwrap();
        assert_eq!(rec2.sequence, 2);
        assert_eq!(rec2.name_key, rec1.name_key);
        assert_eq!(s.resolve_name(&key, &sk.public_key()).unwrap(), r2);

        // Replaying the first record is stale.
        let err = s.publish_record(&rec1, &sk.public_key()).unwrap_err();
        assert!(err.is_retryable());
        assert_eq!(s.resolve_name(&key, &sk.public_key()).unwrap(), r2);
    }

    #[test]
    fn forged_record_is_an_integrity_error() {
        let (_d, s) = store();
        let key = PatientKey(Digest32::of(b"ada"));
        let sk = SigningKey::from_seed([1; 32]);
        let mallory = SigningKey::from_seed([2; 32]);
        let r1 = s.put(b"r1").unwrap();
        s.publish_name(key, r1, &sk).unwrap();
        let forged = NameRecord::sign(key, s.put(b"evil").unwrap(), 2, &mallory);
        // Injected straight into the backend log.
        let mut f = OpenOptions::new().append(true).open(s.name_log_path(&key)).unwrap();
        writeln!(f, "{}", serde_json::to_string(&forged).unwrap()).unwrap();
        assert!(matches!(s.resolve_name(&key, &sk.public_key()), Err(CasError::Integrity(_))));
        // Through the API it is refused outright.
        assert!(s.publish_record(&forged, &sk.public_key()).is_err());
    }

    #[test]
    fn reopen_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        let digest = {
            let s = CasStore::open(dir.path()).unwrap();
            s.put(b"a").unwrap();
            s.put(b"b").unwrap();
            s.store_digest()
        };
        let s = CasStore::open(dir.path()).unwrap();
        assert_eq!(s.store_digest(), digest);
        assert_eq!(s.addresses().len(), 2);
    }
}
