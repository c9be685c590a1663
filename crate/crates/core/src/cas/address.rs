use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::digest::{decode_lower_hex, Digest32};

/// Multihash-style tag for SHA-256: algorithm code 0x12, digest length 0x20.
pub const SHA256_TAG: [u8; 2] = [0x12, 0x20];
/// Text prefix marking lowercase base16, followed by the hex of tag and digest.
pub const TEXT_PREFIX: &str = "f";

/// Address of an immutable object: a tagged SHA-256 of its bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentAddress {
    digest: Digest32,
}

impl ContentAddress {
    pub fn of(content: &[u8]) -> Self {
        ContentAddress { digest: Digest32::of(content) }
    }

    pub fn from_digest(digest: Digest32) -> Self {
        ContentAddress { digest }
    }

    pub fn digest(&self) -> &Digest32 {
        &self.digest
    }

    /// Tag followed by digest, 34 bytes.
    pub fn to_bytes(&self) -> [u8; 34] {
        let mut out = [0u8; 34];
        out[..2].copy_from_slice(&SHA256_TAG);
        out[2..].copy_from_slice(&self.digest.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 34 || bytes[..2] != SHA256_TAG {
            return None;
        }
        let mut d = [0u8; 32];
        d.copy_from_slice(&bytes[2..]);
        Some(ContentAddress { digest: Digest32(d) })
    }

    pub fn verify(&self, content: &[u8]) -> bool {
        Digest32::of(content) == self.digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid content address: {0}")]
pub struct AddressParseError(pub String);

impl FromStr for ContentAddress {
    type Err = AddressParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddressParseError(s.to_string());
        let hex = s.strip_prefix(TEXT_PREFIX).ok_or_else(err)?;
        let bytes = decode_lower_hex(hex).map_err(|_| err())?;
        ContentAddress::from_bytes(&bytes).ok_or_else(err)
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{TEXT_PREFIX}{}", hex::encode(self.to_bytes()))
    }
}

impl fmt::Debug for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentAddress({self})")
    }
}

impl Serialize for ContentAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let a = ContentAddress::of(b"hello");
        let s = a.to_string();
        assert!(s.starts_with("f1220"));
        assert_eq!(s.len(), 1 + 68);
        assert_eq!(s.parse::<ContentAddress>().unwrap(), a);
    }

    #[test]
    fn rejects_wrong_tag_and_case() {
        let a = ContentAddress::of(b"hello").to_string();
        assert!(a.replacen("f1220", "f1320", 1).parse::<ContentAddress>().is_err());
        assert!(a.to_uppercase().parse::<ContentAddress>().is_err());
        assert!(a[1..].parse::<ContentAddress>().is_err());
    }
}
