use std::fmt;

use serde::{Deserialize, Serialize};

use super::codec::{DecodeError, Reader};
use crate::cas::ContentAddress;
use crate::digest::Digest32;
use crate::identity::PatientKey;
use crate::signing::{PublicKey, Signature, SigningKey};
use crate::time::Timestamp;

pub const TX_MAGIC: &[u8; 8] = b"BIOTTX\x00\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    DataTransfer,
    AccessGrant,
    AccessRevoke,
    AlertEvent,
    SummaryPublished,
}

impl TxKind {
    pub const ALL: [TxKind; 5] =
        [TxKind::DataTransfer, TxKind::AccessGrant, TxKind::AccessRevoke, TxKind::AlertEvent, TxKind::SummaryPublished];

    fn code(self) -> u8 {
        match self {
            TxKind::DataTransfer => 1,
            TxKind::AccessGrant => 2,
            TxKind::AccessRevoke => 3,
            TxKind::AlertEvent => 4,
            TxKind::SummaryPublished => 5,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        TxKind::ALL.into_iter().find(|k| k.code() == c)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxKind::DataTransfer => "data_transfer",
            TxKind::AccessGrant => "access_grant",
            TxKind::AccessRevoke => "access_revoke",
            TxKind::AlertEvent => "alert_event",
            TxKind::SummaryPublished => "summary_published",
        }
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A signed ledger record. The signature covers the body; `tx_id` is the digest of
/// body and signature together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTransaction {
    pub tx_id: Digest32,
    pub kind: TxKind,
    pub patient_key: PatientKey,
    pub payload_address: ContentAddress,
    pub issued_at: Timestamp,
    pub signer: String,
    pub signature: Signature,
}

impl TransferTransaction {
    pub fn new_signed(
        kind: TxKind,
        patient_key: PatientKey,
        payload_address: ContentAddress,
        issued_at: Timestamp,
        signer: impl Into<String>,
        key: &SigningKey,
    ) -> Self {
        let signer = signer.into();
        let body = body_bytes(kind, &patient_key, &payload_address, issued_at, &signer);
        let signature = key.sign(&body);
        let tx_id = id_of(&body, &signature);
        TransferTransaction { tx_id, kind, patient_key, payload_address, issued_at, signer, signature }
    }

    pub fn body(&self) -> Vec<u8> {
        body_bytes(self.kind, &self.patient_key, &self.payload_address, self.issued_at, &self.signer)
    }

    pub fn computed_id(&self) -> Digest32 {
        id_of(&self.body(), &self.signature)
    }

    pub fn verify_signature(&self, key: &PublicKey) -> bool {
        key.verify(&self.body(), &self.signature)
    }

    /// Ordering key inside a block.
    pub fn order_key(&self) -> (Timestamp, Digest32) {
        (self.issued_at, self.tx_id)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.signature.0);
        out.extend_from_slice(self.tx_id.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tx = Self::read(&mut r)?;
        r.finish()?;
        Ok(tx)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect(TX_MAGIC)?;
        let kind = TxKind::from_code(r.u8()?).ok_or(DecodeError::new("unknown tx kind"))?;
        let patient_key = PatientKey(Digest32(r.array()?));
        let payload_address =
            ContentAddress::from_bytes(r.take(34)?).ok_or(DecodeError::new("bad payload address"))?;
        let issued_at = Timestamp::from_millis(r.i64()?);
        let len = r.u16()? as usize;
        let signer = std::str::from_utf8(r.take(len)?).map_err(|_| DecodeError::new("signer is not UTF-8"))?.to_string();
        let signature = Signature(r.array()?);
        let tx_id = Digest32(r.array()?);
        Ok(TransferTransaction { tx_id, kind, patient_key, payload_address, issued_at, signer, signature })
    }
}

fn body_bytes(kind: TxKind, patient: &PatientKey, addr: &ContentAddress, issued_at: Timestamp, signer: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 1 + 32 + 34 + 8 + 2 + signer.len());
    out.extend_from_slice(TX_MAGIC);
    out.push(kind.code());
    out.extend_from_slice(patient.0.as_bytes());
    out.extend_from_slice(&addr.to_bytes());
    out.extend_from_slice(&issued_at.millis().to_be_bytes());
    let signer = &signer.as_bytes()[..signer.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(signer.len() as u16).to_be_bytes());
    out.extend_from_slice(signer);
    out
}

fn id_of(body: &[u8], sig: &Signature) -> Digest32 {
    Digest32::of_parts([body, &sig.0[..]])
}
