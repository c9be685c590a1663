use serde::{Deserialize, Serialize};

use super::ContentAddress;
use crate::identity::PatientKey;
use crate::signing::{PublicKey, Signature, SigningKey};

/// Signed mutable pointer from a patient key to that patient's latest folder root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name_key: PatientKey,
    pub root: ContentAddress,
    pub sequence: u64,
    pub signature: Signature,
}

impl NameRecord {
    pub fn signing_bytes(name_key: &PatientKey, root: &ContentAddress, sequence: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 32 + 34 + 8);
        out.extend_from_slice(b"blockiot-name\0");
        out.extend_from_slice(name_key.0.as_bytes());
        out.extend_from_slice(&root.to_bytes());
        out.extend_from_slice(&sequence.to_be_bytes());
        out
    }

    pub fn sign(name_key: PatientKey, root: ContentAddress, sequence: u64, key: &SigningKey) -> Self {
        let signature = key.sign(&Self::signing_bytes(&name_key, &root, sequence));
        NameRecord { name_key, root, sequence, signature }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&Self::signing_bytes(&self.name_key, &self.root, self.sequence), &self.signature)
    }
}
