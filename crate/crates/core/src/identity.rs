//! Patient and device identities.
//!
//! A patient's stable key is the SHA-256 digest of the normalized string
//! `first|last|YYYY-MM-DD`, where each name is NFC-normalized, trimmed and
//! lowercased. The key selects the patient's name record in the content
//! store; it is not a secret and does not authenticate anything by itself.

use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, Utc};
use icu_normalizer::ComposingNormalizerBorrowed;
use serde::{Deserialize, Serialize};

use crate::digest::{Digest32, HexError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentityError {
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("date of birth {0} is in the future")]
    FutureDate(NaiveDate),
    #[error("invalid date of birth: {0}")]
    InvalidDate(String),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientKey(pub Digest32);

impl PatientKey {
    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }
}

impl fmt::Display for PatientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for PatientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PatientKey({})", self.0)
    }
}

impl FromStr for PatientKey {
    type Err = HexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(PatientKey)
    }
}

fn normalize_name(s: &str) -> String {
    let nfc = ComposingNormalizerBorrowed::new_nfc().normalize(s);
    nfc.trim().to_lowercase()
}

/// The exact byte string hashed into a patient key.
pub fn canonical_biometric_string(
    first: &str,
    last: &str,
    dob: NaiveDate,
) -> Result<String, IdentityError> {
    let first = normalize_name(first);
    let last = normalize_name(last);
    if first.is_empty() {
        return Err(IdentityError::EmptyField("first_name"));
    }
    if last.is_empty() {
        return Err(IdentityError::EmptyField("last_name"));
    }
    if dob > Utc::now().date_naive() {
        return Err(IdentityError::FutureDate(dob));
    }
    Ok(format!("{first}|{last}|{}", dob.format("%Y-%m-%d")))
}

pub fn patient_key(first: &str, last: &str, dob: NaiveDate) -> Result<PatientKey, IdentityError> {
    let s = canonical_biometric_string(first, last, dob)?;
    Ok(PatientKey(Digest32::of(s.as_bytes())))
}

/// Parses a `YYYY-MM-DD` date of birth.
pub fn parse_dob(s: &str) -> Result<NaiveDate, IdentityError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| IdentityError::InvalidDate(s.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientIdentity {
    pub first_name: String,
    pub last_name: String,
    pub date_of_birth: NaiveDate,
    pub patient_key: PatientKey,
}

impl PatientIdentity {
    pub fn new(first: &str, last: &str, dob: NaiveDate) -> Result<Self, IdentityError> {
        Ok(PatientIdentity {
            first_name: first.to_string(),
            last_name: last.to_string(),
            date_of_birth: dob,
            patient_key: patient_key(first, last, dob)?,
        })
    }

    /// Re-derives the key and checks it against the stored one.
    pub fn verify(&self) -> Result<bool, IdentityError> {
        Ok(patient_key(&self.first_name, &self.last_name, self.date_of_birth)? == self.patient_key)
    }
}

/// Manufacturer-assigned identifiers carried by a device payload.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub patient_id: String,
    pub device_id: String,
    /// IEEE 11073-10101 term code; metadata only.
    pub nomenclature_code: u32,
}

impl DeviceIdentity {
    pub fn validate(&self) -> Result<(), IdentityError> {
        if self.patient_id.is_empty() {
            return Err(IdentityError::EmptyField("patient_id"));
        }
        if self.device_id.is_empty() {
            return Err(IdentityError::EmptyField("device_id"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ada_dob() -> NaiveDate {
        NaiveDate::from_ymd_opt(1815, 12, 10).unwrap()
    }

    // sha256("ada|lovelace|1815-12-10"), computed with Python's hashlib.
    const ADA_KEY: &str = "cc069b9f896365adf8a4bfdb707ca8d36b3407900b623a4475a2eb37dc294db5";

    #[test]
    fn key_matches_independent_digest() {
        let k = patient_key("Ada", "Lovelace", ada_dob()).unwrap();
        assert_eq!(k.to_hex(), ADA_KEY);
        assert_eq!(k, patient_key("Ada", "Lovelace", ada_dob()).unwrap());
    }

    #[test]
    fn case_and_whitespace_are_normalized() {
        let k = patient_key("ADA ", " lovelace", ada_dob()).unwrap();
        assert_eq!(k.to_hex(), ADA_KEY);
    }

    #[test]
    fn decomposed_unicode_is_composed() {
        let dob = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        // sha256("zoë|ga|2000-01-01") with precomposed ë.
        let expected = "bce7dd74562f7e4f77a2d3577695ef9a81a69c291e44ad0c4b04d4ffec1ee75d";
        assert_eq!(patient_key("Zoe\u{0308}", "Ga", dob).unwrap().to_hex(), expected);
        assert_eq!(patient_key("Zo\u{00eb}", "GA", dob).unwrap().to_hex(), expected);
    }

    #[test]
    fn empty_names_and_future_dates_rejected() {
        assert_eq!(
            patient_key("  ", "x", ada_dob()),
            Err(IdentityError::EmptyField("first_name"))
        );
        assert_eq!(patient_key("a", "", ada_dob()), Err(IdentityError::EmptyField("last_name")));
        let future = Utc::now().date_naive() + chrono::Days::new(2);
        assert!(matches!(patient_key("a", "b", future), Err(IdentityError::FutureDate(_))));
        assert!(parse_dob("1815-02-30").is_err());
    }

    #[test]
    fn distinct_triples_give_distinct_keys() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut triples = HashSet::new();
        while triples.len() < 10_000 {
            let first: String = (0..rng.random_range(1..8))
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            let last: String = (0..rng.random_range(1..8))
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            let dob = NaiveDate::from_ymd_opt(rng.random_range(1900..2020), 1, 1).unwrap()
                + chrono::Days::new(rng.random_range(0..365));
            triples.insert((first, last, dob));
        }
        let keys: HashSet<_> = triples
            .iter()
            .map(|(f, l, d)| patient_key(f, l, *d).unwrap())
            .collect();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn device_identity_requires_ids() {
        let mut d = DeviceIdentity {
            patient_id: "P1".into(),
            device_id: "BP9".into(),
            nomenclature_code: 4,
        };
        assert!(d.validate().is_ok());
        d.device_id.clear();
        assert!(d.validate().is_err());
    }
}
