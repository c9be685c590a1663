use std::fmt;

use serde::{Deserialize, Serialize};

use crate::identity::PatientKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Device,
    Patient,
    Provider,
    Gateway,
    Admin,
}

/// An authenticated party. Devices and patients are bound to one patient key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_key: Option<PatientKey>,
}

impl Principal {
    pub fn new(id: impl Into<String>, role: Role, patient_key: Option<PatientKey>) -> Self {
        Principal { id: id.into(), role, patient_key }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// Permission requested against a patient's data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Read,
    Write,
    Publish,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Publish => "publish",
        }
    }
}
