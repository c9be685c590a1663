//! SHA-256 digests with a strict lowercase-hex text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest32(Sha256::digest(bytes).into())
    }

    /// Digest over several byte slices, equivalent to hashing their concatenation.
    pub fn of_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        Digest32(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Number of leading zero bits, reading the digest as a big-endian integer.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut n = 0;
        for b in self.0 {
            if b == 0 {
                n += 8;
            } else {
                n += b.leading_zeros();
                break;
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid hex digest: {0}")]
pub struct HexError(pub String);

/// Decodes lowercase hex only; uppercase digits are rejected so every value has one text form.
pub fn decode_lower_hex(s: &str) -> Result<Vec<u8>, HexError> {
    if s.bytes().any(|b| !matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(HexError(s.to_string()));
    }
    hex::decode(s).map_err(|_| HexError(s.to_string()))
}

impl FromStr for Digest32 {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = decode_lower_hex(s)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| HexError(s.to_string()))?;
        Ok(Digest32(arr))
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl Serialize for Digest32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_digest() {
        assert_eq!(
            Digest32::of(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn uppercase_hex_rejected() {
        let d = Digest32::of(b"x");
        assert!(d.to_hex().to_uppercase().parse::<Digest32>().is_err());
        assert_eq!(d.to_hex().parse::<Digest32>().unwrap(), d);
    }

    #[test]
    fn leading_zero_bits() {
        let mut d = Digest32([0xff; 32]);
        assert_eq!(d.leading_zero_bits(), 0);
        d.0[0] = 0;
        d.0[1] = 0x1f;
        assert_eq!(d.leading_zero_bits(), 11);
        assert_eq!(Digest32::ZERO.leading_zero_bits(), 256);
    }

    #[test]
    fn parts_equal_concatenation() {
        assert_eq!(Digest32::of_parts([&b"ab"[..], b"cd"]), Digest32::of(b"abcd"));
    }
}
