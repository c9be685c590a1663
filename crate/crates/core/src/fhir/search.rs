use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{device_id, patient_id, to_fhir_device, to_fhir_observation, to_fhir_patient};
use crate::contracts::{check_access, AccessDecision};
use crate::identity::{DeviceIdentity, PatientIdentity, PatientKey};
use crate::ledger::{LedgerState, ObjectSource, ObsRef};
use crate::observation::CanonicalObservation;
use crate::principal::{Action, Principal};
use crate::template::DeviceTemplate;
use crate::time::{Timestamp, MILLIS_PER_DAY};

pub const DEFAULT_COUNT: usize = 50;
pub const MAX_COUNT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SearchError {
    /// Carries nothing about the target on purpose.
    #[error("forbidden")]
    Forbidden,
    #[error("unsupported search parameter: {0}")]
    UnsupportedParam(String),
    #[error("invalid value for {name}: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("unknown resource type: {0}")]
    UnknownResource(String),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone)]
pub struct PatientEntry {
    pub key: PatientKey,
    pub identity: Option<PatientIdentity>,
    /// Identifiers manufacturers use for this patient.
    pub manufacturer_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DeviceEntry {
    pub patient: PatientKey,
    pub identity: DeviceIdentity,
    pub template: DeviceTemplate,
}

/// Registered patients and devices, used for Patient and Device resources.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    pub patients: BTreeMap<PatientKey, PatientEntry>,
    pub devices: Vec<DeviceEntry>,
}

impl Directory {
    pub fn add_patient(&mut self, key: PatientKey, identity: Option<PatientIdentity>, manufacturer_id: Option<&str>) {
        let e = self.patients.entry(key).or_insert_with(|| PatientEntry { key, identity: None, manufacturer_ids: vec![] });
        if identity.is_some() {
            e.identity = identity;
        }
        if let Some(id) = manufacturer_id {
            if !e.manufacturer_ids.iter().any(|x| x == id) {
                e.manufacturer_ids.push(id.to_string());
                e.manufacturer_ids.sort();
            }
        }
    }

    pub fn add_device(&mut self, patient: PatientKey, identity: DeviceIdentity, template: DeviceTemplate) {
        self.add_patient(patient, None, Some(&identity.patient_id));
        if !self.devices.iter().any(|d| device_id(&d.identity) == device_id(&identity)) {
            self.devices.push(DeviceEntry { patient, identity, template });
            self.devices.sort_by_key(|d| device_id(&d.identity));
        }
    }

    /// Accepts `Patient/<key>`, a bare key, or a manufacturer patient id.
    pub fn resolve_patient(&self, reference: &str) -> Option<PatientKey> {
        let r = reference.strip_prefix("Patient/").unwrap_or(reference);
        if let Ok(k) = r.parse::<PatientKey>() {
            return Some(k);
        }
        self.patients.values().find(|p| p.manufacturer_ids.iter().any(|id| id == r)).map(|p| p.key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatePrefix {
    Eq,
    Ge,
    Gt,
    Le,
    Lt,
}

/// One `date` parameter; the value denotes the half-open range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateBound {
    pub prefix: DatePrefix,
    pub lo: Timestamp,
    pub hi: Timestamp,
}

impl DateBound {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let (prefix, rest) = match raw.get(..2) {
            Some("eq") => (DatePrefix::Eq, &raw[2..]),
            Some("ge") => (DatePrefix::Ge, &raw[2..]),
            Some("gt") => (DatePrefix::Gt, &raw[2..]),
            Some("le") => (DatePrefix::Le, &raw[2..]),
            Some("lt") => (DatePrefix::Lt, &raw[2..]),
            _ => (DatePrefix::Eq, raw),
        };
        let (lo, hi) = if rest.len() == 10 {
            let d = chrono::NaiveDate::parse_from_str(rest, "%Y-%m-%d").map_err(|e| format!("{rest}: {e}"))?;
            let lo = Timestamp::start_of_day(d);
            (lo, lo.plus_millis(MILLIS_PER_DAY))
        } else {
            let t: Timestamp = rest.parse().map_err(|_| format!("{rest}: not a date or dateTime"))?;
            (t, t.plus_millis(1))
        };
        Ok(DateBound { prefix, lo, hi })
    }

    pub fn matches(&self, t: Timestamp) -> bool {
        match self.prefix {
            DatePrefix::Eq => t >= self.lo && t < self.hi,
            DatePrefix::Ge => t >= self.lo,
            DatePrefix::Gt => t >= self.hi,
            DatePrefix::Le => t < self.hi,
            DatePrefix::Lt => t < self.lo,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchQuery {
    pub patient: Option<String>,
    /// Any-of list; a `system|code` token matches on the code part.
    pub codes: Vec<String>,
    pub dates: Vec<DateBound>,
    pub identifier: Option<String>,
    pub count: Option<usize>,
    pub offset: usize,
    raw: Vec<(String, String)>,
}

impl SearchQuery {
    pub fn parse(resource: &str, query: &str) -> Result<Self, SearchError> {
        let pairs: Vec<(String, String)> =
            form_urlencoded::parse(query.as_bytes()).map(|(k, v)| (k.into_owned(), v.into_owned())).collect();
        Self::from_pairs(resource, pairs)
    }

    pub fn from_pairs(resource: &str, pairs: Vec<(String, String)>) -> Result<Self, SearchError> {
        let allowed: &[&str] = match resource {
            "Observation" => &["patient", "subject", "code", "date", "_count", "_offset"],
            "Device" => &["patient", "_count", "_offset"],
            "Patient" => &["identifier", "_id", "_count", "_offset"],
            other => return Err(SearchError::UnknownResource(other.to_string())),
        };
        let invalid = |name: &str, reason: String| SearchError::InvalidParam { name: name.to_string(), reason };
        let mut q = SearchQuery::default();
        for (k, v) in &pairs {
            if !allowed.contains(&k.as_str()) {
                return Err(SearchError::UnsupportedParam(k.clone()));
            }
            match k.as_str() {
                "patient" | "subject" | "_id" => q.patient = Some(v.clone()),
                "code" => q.codes.extend(
                    v.split(',').map(|c| c.rsplit_once('|').map_or(c, |(_, code)| code).to_string()),
                ),
                "date" => q.dates.push(DateBound::parse(v).map_err(|e| invalid(k, e))?),
                "identifier" => q.identifier = Some(v.rsplit_once('|').map_or(v.as_str(), |(_, id)| id).to_string()),
                "_count" => {
                    let n: usize = v.parse().map_err(|_| invalid(k, format!("{v:?} is not a count")))?;
                    if n == 0 || n > MAX_COUNT {
                        return Err(invalid(k, format!("must be between 1 and {MAX_COUNT}")));
                    }
                    q.count = Some(n);
                }
                "_offset" => q.offset = v.parse().map_err(|_| invalid(k, format!("{v:?} is not an offset")))?,
                _ => unreachable!(),
            }
        }
        q.raw = pairs.into_iter().filter(|(k, _)| k != "_offset").collect();
        Ok(q)
    }

    fn link(&self, resource: &str, offset: usize) -> String {
        let mut ser = form_urlencoded::Serializer::new(String::new());
        for (k, v) in &self.raw {
            ser.append_pair(k, v);
        }
        if offset > 0 {
            ser.append_pair("_offset", &offset.to_string());
        }
        let qs = ser.finish();
        if qs.is_empty() {
            resource.to_string()
        } else {
            format!("{resource}?{qs}")
        }
    }

    pub fn matches_ref(&self, r: &ObsRef) -> bool {
        (self.codes.is_empty() || self.codes.iter().any(|c| *c == r.code))
            && self.dates.iter().all(|d| d.matches(r.effective_time))
    }
}

/// Read-only view used to answer searches from one immutable state snapshot.
pub struct FhirService<'a> {
    pub state: &'a LedgerState,
    pub objects: &'a dyn ObjectSource,
    pub directory: &'a Directory,
}

impl FhirService<'_> {
    pub fn search(&self, resource: &str, query: &SearchQuery, principal: &Principal) -> Result<Value, SearchError> {
        match resource {
            "Observation" => self.search_observations(query, principal),
            "Device" => {
                let key = self.target_patient(query.patient.as_deref(), principal)?;
                let all: Vec<&DeviceEntry> = self.directory.devices.iter().filter(|d| d.patient == key).collect();
                let total = all.len();
                let page = self.page(query, total);
                let entries = all[page.clone()]
                    .iter()
                    .map(|d| (format!("Device/{}", device_id(&d.identity)), to_fhir_device(&d.template, &d.identity)))
                    .collect();
                Ok(bundle(query, "Device", total, page.start, entries))
            }
            "Patient" => {
                let reference = query.patient.as_deref().or(query.identifier.as_deref());
                let key = self.target_patient(reference, principal)?;
                let (identity, ids) = match self.directory.patients.get(&key) {
                    Some(p) => (p.identity.as_ref(), p.manufacturer_ids.as_slice()),
                    None if self.state.observations.contains_key(&key) => (None, &[][..]),
                    None => return Ok(bundle(query, "Patient", 0, 0, vec![])),
                };
                let entry = (format!("Patient/{}", patient_id(&key)), to_fhir_patient(&key, identity, ids));
                let page = self.page(query, 1);
                let entries = if page.is_empty() { vec![] } else { vec![entry] };
                Ok(bundle(query, "Patient", 1, page.start, entries))
            }
            other => Err(SearchError::UnknownResource(other.to_string())),
        }
    }

    fn target_patient(&self, reference: Option<&str>, principal: &Principal) -> Result<PatientKey, SearchError> {
        let key = match reference {
            Some(r) => self.directory.resolve_patient(r).ok_or(SearchError::Forbidden)?,
            None => principal.patient_key.ok_or_else(|| SearchError::InvalidParam {
                name: "patient".into(),
                reason: "required for this principal".into(),
            })?,
        };
        match check_access(self.state, principal, &key, Action::Read) {
            AccessDecision::Allow => Ok(key),
            AccessDecision::Deny => Err(SearchError::Forbidden),
        }
    }

    fn page(&self, query: &SearchQuery, total: usize) -> std::ops::Range<usize> {
        let count = query.count.unwrap_or(DEFAULT_COUNT);
        let start = query.offset.min(total);
        start..(start + count).min(total)
    }

    fn search_observations(&self, query: &SearchQuery, principal: &Principal) -> Result<Value, SearchError> {
        let key = self.target_patient(query.patient.as_deref(), principal)?;
        let matched: Vec<&ObsRef> =
            self.state.patient_observations(&key).iter().filter(|r| query.matches_ref(r)).collect();
        let total = matched.len();
        let page = self.page(query, total);
        let mut entries = Vec::with_capacity(page.len());
        for r in &matched[page.clone()] {
            let bytes = self.objects.fetch(&r.address).map_err(SearchError::Storage)?;
            let obs: CanonicalObservation =
                serde_json::from_slice(&bytes).map_err(|e| SearchError::Storage(format!("{}: {e}", r.address)))?;
            let res = to_fhir_observation(&obs);
            entries.push((format!("Observation/{}", res["id"].as_str().unwrap_or_default()), res));
        }
        Ok(bundle(query, "Observation", total, page.start, entries))
    }
}

fn bundle(query: &SearchQuery, resource: &str, total: usize, start: usize, entries: Vec<(String, Value)>) -> Value {
    let mut links = vec![json!({"relation": "self", "url": query.link(resource, start)})];
    let end = start + entries.len();
    if end < total {
        links.push(json!({"relation": "next", "url": query.link(resource, end)}));
    }
    let entry: Vec<Value> = entries
        .into_iter()
        .map(|(url, resource)| json!({"fullUrl": url, "resource": resource, "search": {"mode": "match"}}))
        .collect();
    json!({
        "resourceType": "Bundle",
        "type": "searchset",
        "total": total,
        "link": links,
        "entry": entry,
    })
}

pub fn capability_statement() -> Value {
    let param = |name: &str, ty: &str| json!({"name": name, "type": ty});
    json!({
        "resourceType": "CapabilityStatement",
        "status": "active",
        "kind": "instance",
        "fhirVersion": "4.0.1",
        "format": ["json"],
        "rest": [{
            "mode": "server",
            "resource": [
                {
                    "type": "Observation",
                    "interaction": [{"code": "search-type"}],
                    "searchParam": [param("patient", "reference"), param("code", "token"), param("date", "date"),
                                    param("_count", "number"), param("_offset", "number")],
                },
                {
                    "type": "Device",
                    "interaction": [{"code": "search-type"}],
                    "searchParam": [param("patient", "reference")],
                },
                {
                    "type": "Patient",
                    "interaction": [{"code": "search-type"}],
                    "searchParam": [param("identifier", "token")],
                },
            ],
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fhir::from_fhir_observation;
    use crate::ledger::MemoryObjects;
    use crate::observation::tests::glucose_reading;
    use crate::principal::Role;
    use proptest::prelude::*;

    struct Fixture {
        state: LedgerState,
        objects: MemoryObjects,
        directory: Directory,
        key: PatientKey,
    }

    // Two readings a day for a week, alternating codes.
    fn fixture() -> Fixture {
        let mut objects = MemoryObjects::default();
        let mut state = LedgerState::default();
        let base = glucose_reading();
        let key = base.subject;
        for day in 0..7 {
            for (h, code) in [(8, "blood-glucose"), (20, "body-weight")] {
                let mut o = base.clone();
                o.code_binding = code.into();
                o.effective_time = Timestamp::from_ymd_hms(2021, 1, 1 + day, h, 0, 0).unwrap();
                let address = objects.put(o.to_canonical_json());
                state.index_observation(
                    key,
                    ObsRef { effective_time: o.effective_time, address, code: o.code_binding.clone(), kind: o.kind },
                );
            }
        }
        let mut directory = Directory::default();
        directory.add_patient(key, None, Some("P1"));
        Fixture { state, objects, directory, key }
    }

    impl Fixture {
        fn svc(&self) -> FhirService<'_> {
            FhirService { state: &self.state, objects: &self.objects, directory: &self.directory }
        }
        fn me(&self) -> Principal {
            Principal::new("patient-p1", Role::Patient, Some(self.key))
        }
    }

    fn times(bundle: &Value) -> Vec<Timestamp> {
        bundle["entry"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| from_fhir_observation(&e["resource"]).unwrap().effective_time)
            .collect()
    }

    #[test]
    fn week_window_is_time_sorted() {
        let f = fixture();
        let q = SearchQuery::parse("Observation", "patient=P1&date=ge2021-01-02&date=le2021-01-04").unwrap();
        let b = f.svc().search("Observation", &q, &f.me()).unwrap();
        assert_eq!(b["total"], json!(6));
        let ts = times(&b);
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ts[0], Timestamp::from_ymd_hms(2021, 1, 2, 8, 0, 0).unwrap());
        assert_eq!(ts[5], Timestamp::from_ymd_hms(2021, 1, 4, 20, 0, 0).unwrap());
    }

    #[test]
    fn denied_principal_gets_nothing() {
        let f = fixture();
        let other = Principal::new("provider-x", Role::Provider, None);
        let q = SearchQuery::parse("Observation", "patient=P1").unwrap();
        assert_eq!(f.svc().search("Observation", &q, &other), Err(SearchError::Forbidden));
        let q = SearchQuery::parse("Observation", "patient=nobody").unwrap();
        assert_eq!(f.svc().search("Observation", &q, &other), Err(SearchError::Forbidden));
    }

    #[test]
    fn grant_opens_access() {
        let mut f = fixture();
        let other = Principal::new("provider-x", Role::Provider, None);
        f.state.access.insert(crate::ledger::AccessGrant {
            grantee: "provider-x".into(),
            patient: f.key,
            scope: Action::Read,
        });
        let q = SearchQuery::parse("Observation", &format!("patient=Patient/{}", f.key.to_hex())).unwrap();
        assert_eq!(f.svc().search("Observation", &q, &other).unwrap()["total"], json!(14));
    }

    #[test]
    fn unsupported_param_is_named() {
        let e = SearchQuery::parse("Observation", "patient=P1&value-quantity=5").unwrap_err();
        assert_eq!(e, SearchError::UnsupportedParam("value-quantity".into()));
        assert!(e.to_string().contains("value-quantity"));
        assert!(matches!(SearchQuery::parse("Encounter", ""), Err(SearchError::UnknownResource(_))));
    }

    #[test]
    fn paging_covers_every_match_once() {
        let f = fixture();
        let q = SearchQuery::parse("Observation", "patient=P1&code=blood-glucose&date=le2021-01-05&_count=2").unwrap();
        let full = f.svc().search("Observation", &SearchQuery { count: Some(MAX_COUNT), ..q.clone() }, &f.me()).unwrap();
        assert_eq!(full["total"], json!(5));
        let mut pages = vec![f.svc().search("Observation", &q, &f.me()).unwrap()];
        while let Some(next) = pages.last().unwrap()["link"]
            .as_array()
            .unwrap()
            .iter()
            .find(|l| l["relation"] == "next")
            .map(|l| l["url"].as_str().unwrap().to_string())
        {
            let (_, qs) = next.split_once('?').unwrap();
            let q = SearchQuery::parse("Observation", qs).unwrap();
            pages.push(f.svc().search("Observation", &q, &f.me()).unwrap());
        }
        assert_eq!(pages.len(), 3);
        assert_eq!(pages[0]["entry"].as_array().unwrap().len(), 2);
        let union: Vec<Timestamp> = pages.iter().flat_map(times).collect();
        assert_eq!(union, times(&full));
    }

    #[test]
    fn date_prefixes() {
        let t = |d, h| Timestamp::from_ymd_hms(2021, 1, d, h, 0, 0).unwrap();
        let b = DateBound::parse("2021-01-02").unwrap();
        assert!(b.matches(t(2, 0)) && b.matches(t(2, 23)) && !b.matches(t(3, 0)) && !b.matches(t(1, 23)));
        assert!(DateBound::parse("gt2021-01-02").unwrap().matches(t(3, 0)));
        assert!(!DateBound::parse("gt2021-01-02").unwrap().matches(t(2, 23)));
        assert!(DateBound::parse("lt2021-01-02").unwrap().matches(t(1, 23)));
        assert!(!DateBound::parse("lt2021-01-02").unwrap().matches(t(2, 0)));
        assert!(DateBound::parse("le2021-01-02T08:00:00Z").unwrap().matches(t(2, 8)));
        assert!(DateBound::parse("ge2021-13-01").is_err());
    }

    #[test]
    fn patient_and_device_search() {
        let mut f = fixture();
        let ident = DeviceIdentity { patient_id: "P1".into(), device_id: "BP9".into(), nomenclature_code: 4 };
        f.directory.add_device(f.key, ident, crate::template::tests::bp_template());
        let q = SearchQuery::parse("Device", "patient=P1").unwrap();
        let b = f.svc().search("Device", &q, &f.me()).unwrap();
        assert_eq!(b["total"], json!(1));
        assert_eq!(b["entry"][0]["resource"]["resourceType"], json!("Device"));
        let q = SearchQuery::parse("Patient", "identifier=urn:blockiot:patient-id|P1").unwrap();
        let b = f.svc().search("Patient", &q, &f.me()).unwrap();
        assert_eq!(b["entry"][0]["resource"]["id"], json!(f.key.to_hex()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        // Search against a brute-force filter over every stored observation.
        #[test]
        fn matches_brute_force(
            code in prop::option::of(prop::sample::select(vec!["blood-glucose", "body-weight", "none"])),
            lo in prop::option::of((0u32..9, any::<bool>())),
            hi in prop::option::of((0u32..9, any::<bool>())),
            count in 1usize..20,
        ) {
            let f = fixture();
            let mut qs = vec!["patient=P1".to_string()];
            if let Some(c) = code { qs.push(format!("code={c}")); }
            if let Some((d, strict)) = lo { qs.push(format!("date={}2021-01-{:02}", if strict {"gt"} else {"ge"}, d + 1)); }
            if let Some((d, strict)) = hi { qs.push(format!("date={}2021-01-{:02}", if strict {"lt"} else {"le"}, d + 1)); }
            qs.push(format!("_count={count}"));
            let q = SearchQuery::parse("Observation", &qs.join("&")).unwrap();
            let got = times(&f.svc().search("Observation", &q, &f.me()).unwrap());

            let mut expect: Vec<Timestamp> = f.objects.0.values()
                .map(|b| serde_json::from_slice::<CanonicalObservation>(b).unwrap())
                .filter(|o| code.is_none_or(|c| o.code_binding == c))
                .filter(|o| {
                    let day = |d: u32| Timestamp::from_ymd_hms(2021, 1, d + 1, 0, 0, 0).unwrap();
                    let t = o.effective_time;
                    lo.is_none_or(|(d, s)| if s { t >= day(d + 1) } else { t >= day(d) })
                        && hi.is_none_or(|(d, s)| if s { t < day(d) } else { t < day(d + 1) })
                })
                .map(|o| o.effective_time)
                .collect();
            expect.sort();
            expect.truncate(count);
            prop_assert_eq!(got, expect);
        }
    }
}
