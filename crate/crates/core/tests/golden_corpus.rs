//! Maps each sample payload in corpus/ with the shipped templates and compares
//! the canonical bytes against the frozen expectations from tools/corpus_oracle.py.

use std::path::{Path, PathBuf};

use blockiot_core::identity::{parse_dob, patient_key};
use blockiot_core::template::{load_template, map_payload, MappingContext};
use blockiot_core::time::Timestamp;
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn corpus_matches_reference_bytes() {
    let root = root();
    let ctx_doc = read_json(&root.join("corpus/context.json"));
    let p = &ctx_doc["patient"];
    let subject = patient_key(
        p["first_name"].as_str().unwrap(),
        p["last_name"].as_str().unwrap(),
        parse_dob(p["date_of_birth"].as_str().unwrap()).unwrap(),
    )
    .unwrap();
    let ctx = MappingContext {
        received_at: ctx_doc["received_at"].as_str().unwrap().parse::<Timestamp>().unwrap(),
        subject,
        clock_skew_budget_ms: None,
    };

    let mut cases: Vec<_> = std::fs::read_dir(root.join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    cases.sort();
    assert_eq!(cases.len(), 12, "one case per shipped template");

    let mut kinds = std::collections::BTreeSet::new();
    for case in cases {
        let name = case.file_name().unwrap().to_str().unwrap().to_string();
        let template = load_template(&std::fs::read(root.join(format!("templates/{name}.json"))).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let payload = read_json(&case.join("payload.json"));
        let out = map_payload(&template, payload.as_object().unwrap(), &ctx).unwrap();
        assert!(out.field_errors.is_empty(), "{name}: {:?}", out.field_errors);
        let expected = std::fs::read_to_string(case.join("expected.jsonl")).unwrap();
        let expected: Vec<&str> = expected.lines().collect();
        let got: Vec<String> = out
            .observations
            .iter()
            .map(|o| String::from_utf8(o.to_canonical_json()).unwrap())
            .collect();
        assert_eq!(got, expected, "{name}");
        kinds.extend(out.observations.iter().map(|o| o.kind));
    }
    assert_eq!(kinds.len(), 6, "every measurement kind appears in the corpus");
}

#[test]
fn shipped_templates_all_load() {
    let dir = root().join("templates");
    let reg = blockiot_core::template::TemplateRegistry::new();
    assert_eq!(reg.reload_dir(&dir).unwrap(), 12);
}
