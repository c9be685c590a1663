use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tx::{TransferTransaction, TxKind};
use crate::identity::PatientKey;
use crate::principal::Role;
use crate::signing::PublicKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignerEntry {
    pub principal: String,
    pub public_key: PublicKey,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_key: Option<PatientKey>,
}

/// Principals allowed to sign ledger transactions, with their keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignerRegistry {
    entries: BTreeMap<String, SignerEntry>,
}

impl SignerRegistry {
    pub fn new(entries: impl IntoIterator<Item = SignerEntry>) -> Self {
        let mut r = SignerRegistry::default();
        for e in entries {
            r.insert(e);
        }
        r
    }

    pub fn insert(&mut self, entry: SignerEntry) {
        self.entries.insert(entry.principal.clone(), entry);
    }

    pub fn get(&self, principal: &str) -> Option<&SignerEntry> {
        self.entries.get(principal)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SignerEntry> {
        self.entries.values()
    }

    /// Registered, correctly signed, and permitted to issue this kind for this patient.
    pub fn check(&self, tx: &TransferTransaction) -> Result<(), String> {
        let entry = self.get(&tx.signer).ok_or_else(|| format!("signer {:?} is not registered", tx.signer))?;
        if !tx.verify_signature(&entry.public_key) {
            return Err("bad signature".into());
        }
        let permitted = match tx.kind {
            TxKind::DataTransfer | TxKind::AlertEvent | TxKind::SummaryPublished => {
                matches!(entry.role, Role::Gateway | Role::Admin)
            }
            TxKind::AccessGrant | TxKind::AccessRevoke => {
                entry.role == Role::Admin
                    || (entry.role == Role::Patient && entry.patient_key == Some(tx.patient_key))
            }
        };
        if permitted {
            Ok(())
        } else {
            Err(format!("{} may not sign {} transactions for this patient", tx.signer, tx.kind))
        }
    }
}
