//! FHIR search output for each corpus case, compared byte for byte with the
//! bundles under golden/ (written by tools/fhir_oracle.py).

use std::path::{Path, PathBuf};

use blockiot_core::fhir::{Directory, FhirService, SearchQuery};
use blockiot_core::ledger::{LedgerState, MemoryObjects, ObsRef};
use blockiot_core::observation::CanonicalObservation;
use blockiot_core::principal::{Principal, Role};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn render(expected_jsonl: &str) -> String {
    let mut objects = MemoryObjects::default();
    let mut state = LedgerState::default();
    let mut subject = None;
    for line in expected_jsonl.lines().filter(|l| !l.is_empty()) {
        let obs: CanonicalObservation = serde_json::from_str(line).unwrap();
        assert_eq!(obs.to_canonical_json(), line.as_bytes(), "corpus line is not canonical");
        let address = objects.put(line.as_bytes().to_vec());
        subject = Some(obs.subject);
        state.observations.entry(obs.subject).or_default().push(ObsRef {
            effective_time: obs.effective_time,
            address,
            code: obs.code_binding.clone(),
            kind: obs.kind,
        });
    }
    let key = subject.expect("empty case");
    for refs in state.observations.values_mut() {
        refs.sort_by_key(|r| (r.effective_time, r.address));
    }
    let directory = Directory::default();
    let svc = FhirService { state: &state, objects: &objects, directory: &directory };
    let q = SearchQuery::parse("Observation", &format!("patient=Patient/{}", key.to_hex())).unwrap();
    let me = Principal::new("ada", Role::Patient, Some(key));
    let bundle = svc.search("Observation", &q, &me).unwrap();
    serde_json::to_string_pretty(&bundle).unwrap() + "\n"
}

#[test]
fn search_bundles_match_golden_files() {
    let root = root();
    let mut cases: Vec<_> = std::fs::read_dir(root.join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    cases.sort();
    assert_eq!(cases.len(), 12);
    for case in cases {
        let name = case.file_name().unwrap().to_str().unwrap().to_string();
        let got = render(&std::fs::read_to_string(case.join("expected.jsonl")).unwrap());
        let golden = root.join("golden").join(format!("{name}.json"));
        let want = std::fs::read_to_string(&golden).unwrap_or_else(|e| panic!("{}: {e}", golden.display()));
        assert!(got == want, "{name}: bundle differs from golden\n--- got ---\n{got}");
    }
}
