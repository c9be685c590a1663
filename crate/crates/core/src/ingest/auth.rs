use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::identity::{IdentityError, PatientIdentity};
use crate::principal::{Principal, Role};
use crate::template::TemplateKey;
use crate::time::Timestamp;

/// What a sender presents, per transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Credentials {
    Bearer(String),
    UserPassword { username: String, password: String },
    PskId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("unknown credential")]
    Unknown,
    #[error("credential revoked")]
    Revoked,
    #[error("credential expired")]
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientFixture {
    pub first_name: String,
    pub last_name: String,
    pub date_of_birth: NaiveDate,
}

impl PatientFixture {
    pub fn identity(&self) -> Result<PatientIdentity, IdentityError> {
        PatientIdentity::new(&self.first_name, &self.last_name, self.date_of_birth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceRegistration {
    pub device_id: String,
    /// Manufacturer's id for the patient, as it appears in payloads.
    pub patient_id: String,
    pub patient: PatientFixture,
    /// Template key, `manufacturer/model@firmware-major`.
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_username: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_password: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coap_psk_id: Option<String>,
    #[serde(default)]
    pub revoked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRegistration {
    pub id: String,
    pub role: Role,
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<PatientFixture>,
    #[serde(default)]
    pub revoked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<Timestamp>,
}

/// The static registration table: devices that may send data, and people or
/// services that may read it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationTable {
    #[serde(default)]
    pub devices: Vec<DeviceRegistration>,
    #[serde(default)]
    pub users: Vec<UserRegistration>,
}

/// The registration a device principal is bound to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceBinding {
    pub device_id: String,
    pub patient_id: String,
    pub patient: PatientIdentity,
    pub template: TemplateKey,
}

/// Result of a successful authentication. Only [`Registrations::authenticate`] builds one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authenticated {
    principal: Principal,
    device: Option<DeviceBinding>,
}

impl Authenticated {
    pub fn principal(&self) -> &Principal {
        &self.principal
    }

    pub fn device(&self) -> Option<&DeviceBinding> {
        self.device.as_ref()
    }
}

pub fn device_principal_id(device_id: &str) -> String {
    format!("device/{device_id}")
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Device(usize),
    User(usize),
}

#[derive(Debug, Clone, Default)]
pub struct Registrations {
    table: RegistrationTable,
    devices: Vec<(Principal, DeviceBinding)>,
    users: Vec<Principal>,
    tokens: HashMap<String, Slot>,
    mqtt: HashMap<String, (String, usize)>,
    psk: HashMap<String, usize>,
}

impl Registrations {
    pub fn new(table: RegistrationTable) -> Result<Self, String> {
        let mut r = Registrations { table: table.clone(), ..Default::default() };
        let mut seen_devices = HashMap::new();
        for (i, d) in table.devices.iter().enumerate() {
            let patient = d.patient.identity().map_err(|e| format!("device {}: {e}", d.device_id))?;
            let template = TemplateKey::parse(&d.template)
                .ok_or_else(|| format!("device {}: bad template key {:?}", d.device_id, d.template))?;
            if d.device_id.is_empty() || d.patient_id.is_empty() {
                return Err(format!("device registration {i}: empty device or patient id"));
            }
            if seen_devices.insert(d.device_id.clone(), i).is_some() {
                return Err(format!("device {} registered twice", d.device_id));
            }
            let principal = Principal::new(device_principal_id(&d.device_id), Role::Device, Some(patient.patient_key));
            r.devices.push((
                principal,
                DeviceBinding { device_id: d.device_id.clone(), patient_id: d.patient_id.clone(), patient, template },
            ));
            if let Some(t) = &d.token {
                if r.tokens.insert(t.clone(), Slot::Device(i)).is_some() {
                    return Err(format!("token of device {} is not unique", d.device_id));
                }
            }
            match (&d.mqtt_username, &d.mqtt_password) {
                (Some(u), Some(p)) => {
                    if r.mqtt.insert(u.clone(), (p.clone(), i)).is_some() {
                        return Err(format!("mqtt username {u:?} is not unique"));
                    }
                }
                (None, None) => {}
                _ => return Err(format!("device {}: mqtt username and password go together", d.device_id)),
            }
            if let Some(id) = &d.coap_psk_id {
                if r.psk.insert(id.clone(), i).is_some() {
                    return Err(format!("psk id {id:?} is not unique"));
                }
            }
        }
        for (i, u) in table.users.iter().enumerate() {
            let key = match &u.patient {
                Some(p) => Some(p.identity().map_err(|e| format!("user {}: {e}", u.id))?.patient_key),
                None => None,
            };
            if u.role == Role::Device {
                return Err(format!("user {}: devices belong in the device table", u.id));
            }
            r.users.push(Principal::new(u.id.clone(), u.role, key));
            if r.tokens.insert(u.token.clone(), Slot::User(i)).is_some() {
                return Err(format!("token of user {} is not unique", u.id));
            }
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let table: RegistrationTable =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::new(table)
    }

    pub fn table(&self) -> &RegistrationTable {
        &self.table
    }

    pub fn devices(&self) -> impl Iterator<Item = (&Principal, &DeviceBinding)> {
        self.devices.iter().map(|(p, b)| (p, b))
    }

    pub fn authenticate(&self, creds: &Credentials, now: Timestamp) -> Result<Authenticated, AuthError> {
        let slot = match creds {
            Credentials::Bearer(t) => *self.tokens.get(t).ok_or(AuthError::Unknown)?,
            Credentials::UserPassword { username, password } => {
                let (expected, i) = self.mqtt.get(username).ok_or(AuthError::Unknown)?;
                if !constant_time_eq(expected.as_bytes(), password.as_bytes()) {
                    return Err(AuthError::Unknown);
                }
                Slot::Device(*i)
            }
            Credentials::PskId(id) => Slot::Device(*self.psk.get(id).ok_or(AuthError::Unknown)?),
        };
        let (revoked, expires) = match slot {
            Slot::Device(i) => (self.table.devices[i].revoked, self.table.devices[i].expires_at),
            Slot::User(i) => (self.table.users[i].revoked, self.table.users[i].expires_at),
        };
        if revoked {
            return Err(AuthError::Revoked);
        }
        if expires.is_some_and(|t| now >= t) {
            return Err(AuthError::Expired);
        }
        Ok(match slot {
            Slot::Device(i) => {
                let (principal, binding) = self.devices[i].clone();
                Authenticated { principal, device: Some(binding) }
            }
            Slot::User(i) => Authenticated { principal: self.users[i].clone(), device: None },
        })
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn fixture_table() -> RegistrationTable {
        let patient = |first: &str| PatientFixture {
            first_name: first.into(),
            last_name: "Tester".into(),
            date_of_birth: NaiveDate::from_ymd_opt(1950, 2, 3).unwrap(),
        };
        RegistrationTable {
            devices: vec![
                DeviceRegistration {
                    device_id: "BP9".into(),
                    patient_id: "P1".into(),
                    patient: patient("Ada"),
                    template: "Acme Medical/BP-200@1".into(),
                    token: Some("tok-bp9".into()),
                    mqtt_username: Some("bp9".into()),
                    mqtt_password: Some("secret".into()),
                    coap_psk_id: Some("psk-bp9".into()),
                    revoked: false,
                    expires_at: None,
                },
                DeviceRegistration {
                    device_id: "BP7".into(),
                    patient_id: "P2".into(),
                    patient: patient("Grace"),
                    template: "Acme Medical/BP-200@1".into(),
                    token: Some("tok-bp7".into()),
                    mqtt_username: None,
                    mqtt_password: None,
                    coap_psk_id: None,
                    revoked: false,
                    expires_at: None,
                },
                DeviceRegistration {
                    device_id: "OLD".into(),
                    patient_id: "P1".into(),
                    patient: patient("Ada"),
                    template: "Acme Medical/BP-200@1".into(),
                    token: Some("tok-old".into()),
                    mqtt_username: None,
                    mqtt_password: None,
                    coap_psk_id: None,
                    revoked: true,
                    expires_at: None,
                },
            ],
            users: vec![UserRegistration {
                id: "dr-lee".into(),
                role: Role::Provider,
                token: "tok-dr".into(),
                patient: None,
                revoked: false,
                expires_at: None,
            }],
        }
    }

    fn now() -> Timestamp {
        Timestamp::from_ymd_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn same_principal_on_every_transport() {
        let r = Registrations::new(fixture_table()).unwrap();
        let a = r.authenticate(&Credentials::Bearer("tok-bp9".into()), now()).unwrap();
        let b = r
            .authenticate(&Credentials::UserPassword { username: "bp9".into(), password: "secret".into() }, now())
            .unwrap();
        let c = r.authenticate(&Credentials::PskId("psk-bp9".into()), now()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(a.principal().id, "device/BP9");
        assert_eq!(a.device().unwrap().patient_id, "P1");
    }

    #[test]
    fn rejected_credentials() {
        let r = Registrations::new(fixture_table()).unwrap();
        assert_eq!(r.authenticate(&Credentials::Bearer("tok-old".into()), now()), Err(AuthError::Revoked));
        assert_eq!(r.authenticate(&Credentials::Bearer("nope".into()), now()), Err(AuthError::Unknown));
        let bad = Credentials::UserPassword { username: "bp9".into(), password: "secreT".into() };
        assert_eq!(r.authenticate(&bad, now()), Err(AuthError::Unknown));
        let mut t = fixture_table();
        t.devices[0].expires_at = Some(now());
        let r = Registrations::new(t).unwrap();
        assert_eq!(r.authenticate(&Credentials::Bearer("tok-bp9".into()), now()), Err(AuthError::Expired));
    }

    #[test]
    fn duplicate_credentials_refused() {
        let mut t = fixture_table();
        t.devices[1].token = Some("tok-bp9".into());
        assert!(Registrations::new(t).is_err());
    }
}
