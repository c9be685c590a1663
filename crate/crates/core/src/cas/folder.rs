use serde::{Deserialize, Serialize};

use super::ContentAddress;

/// Magic prefix of an encoded directory node.
pub const DIR_MAGIC: &[u8; 8] = b"BIOTDIR\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub address: ContentAddress,
    pub size: u64,
    pub kind: NodeKind,
}

/// A directory node. Entries are kept sorted by name; the encoding is
/// length-prefixed so the address depends only on the entry set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FolderNode {
    entries: Vec<DirEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FolderError {
    #[error("entry name {0:?} already present")]
    Duplicate(String),
    #[error("entry names must be non-empty and at most 65535 bytes")]
    BadName,
    #[error("not a directory node")]
    Malformed,
}

impl FolderNode {
    pub fn new(entries: Vec<DirEntry>) -> Result<Self, FolderError> {
        let mut node = FolderNode { entries: Vec::with_capacity(entries.len()) };
        for e in entries {
            node.insert(e)?;
        }
        Ok(node)
    }

    pub fn entries(&self) -> &[DirEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&DirEntry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn insert(&mut self, entry: DirEntry) -> Result<(), FolderError> {
        if entry.name.is_empty() || entry.name.len() > u16::MAX as usize {
            return Err(FolderError::BadName);
        }
        match self.entries.binary_search_by(|e| e.name.cmp(&entry.name)) {
            Ok(_) => Err(FolderError::Duplicate(entry.name)),
            Err(i) => {
                self.entries.insert(i, entry);
                Ok(())
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * 64);
        out.extend_from_slice(DIR_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_be_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.address.to_bytes());
            out.extend_from_slice(&e.size.to_be_bytes());
            out.push(match e.kind {
                NodeKind::Leaf => 0,
                NodeKind::Directory => 1,
            });
        }
        out
    }

    pub fn address(&self) -> ContentAddress {
        ContentAddress::of(&self.encode())
    }

    pub fn is_directory_bytes(bytes: &[u8]) -> bool {
        bytes.starts_with(DIR_MAGIC)
    }

    /// Strict decoder: rejects unsorted or duplicate names and trailing bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, FolderError> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != DIR_MAGIC {
            return Err(FolderError::Malformed);
        }
        let n = u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut entries: Vec<DirEntry> = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| FolderError::Malformed)?.to_string();
            let address = ContentAddress::from_bytes(r.take(34)?).ok_or(FolderError::Malformed)?;
            let size = u64::from_be_bytes(r.take(8)?.try_into().unwrap());
            let kind = match r.take(1)?[0] {
                0 => NodeKind::Leaf,
                1 => NodeKind::Directory,
                _ => return Err(FolderError::Malformed),
            };
            if name.is_empty() || entries.last().is_some_and(|p| p.name >= name) {
                return Err(FolderError::Malformed);
            }
            entries.push(DirEntry { name, address, size, kind });
        }
        if !r.buf.is_empty() {
            return Err(FolderError::Malformed);
        }
        Ok(FolderNode { entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FolderError> {
        if self.buf.len() < n {
            return Err(FolderError::Malformed);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
}
