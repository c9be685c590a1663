//! Shipped scenarios against an in-process gateway.

mod common;

use blockiot_core::observation::MeasurementKind;
use blockiot_devsim::scenario::ScenarioError;
use blockiot_devsim::{run_scenario, Coverage, RunOptions, Scenario};
use common::*;
use proptest::prelude::*;
use serde_json::json;

fn fast() -> RunOptions {
    RunOptions { speed: 50.0, ..RunOptions::default() }
}

#[tokio::test(flavor = "multi_thread")]
async fn shipped_suite_is_clean_and_covers_everything() {
    let mut reports = Vec::new();
    for name in SCENARIOS {
        let ls = shipped(name);
        let data = tempfile::tempdir().unwrap();
        let gw = start_at(config(data.path()), ls.scenario.start).await;
        let report = run_scenario(&ls, &endpoints(&gw, true), &fast()).await.unwrap();
        assert!(report.clean(), "{name}: {:?} {:?}", report.rejections, report.delivery_failures);
        assert!(report.contract_families.contains("summarization"), "{name}");
        gw.drain_and_stop().await.unwrap();
        reports.push(report);
    }
    let coverage = Coverage::of(&reports);
    assert!(coverage.missing().is_empty(), "missing: {:?}", coverage.missing());
    assert_eq!(coverage.kinds.len(), MeasurementKind::ALL.len());

    let by_name = |n: &str| reports.iter().find(|r| r.scenario == n).unwrap();
    let ada = by_name("comorbidity");
    assert!(ada.alerts.contains_key("drug_compliance"));
    assert!(ada.alerts.contains_key("emergency_alert"));
    assert!(by_name("heart_failure").alerts.contains_key("adverse_condition"));
    assert!(by_name("diabetes").alerts.contains_key("emergency_alert"));
    assert!(by_name("copd").alerts.contains_key("emergency_alert"));
}

fn tiny(timeline: serde_json::Value) -> Scenario {
    serde_json::from_value(json!({
        "name": "tiny",
        "patient": {"first_name": "Ada", "last_name": "Tester", "date_of_birth": "1950-02-03"},
        "start": "2021-03-01T00:00:00.000Z",
        "time_compression": 1.0e9,
        "devices": [{
            "name": "cuff", "template": "blood_pressure_monitor", "transport": "http",
            "patient_id": "P1", "device_id": "BP9", "credentials": {"token": "tok-bp9"}
        }],
        "timeline": timeline,
    }))
    .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_payload_is_reported_with_the_gateway_reason() {
    let ls = tiny(json!([
        {"offset_s": 0, "device": "cuff", "payload": {"sys": 120, "dia": 80, "map": 93, "pr": 70}},
        {"offset_s": 60, "device": "cuff", "payload": {"sys": "high", "dia": 80, "map": 93}},
        {"offset_s": 120, "device": "cuff", "payload": {"sys": 121, "dia": 81, "map": 94}},
    ]))
    .resolve(&repo_root().join("templates"))
    .unwrap();
    let data = tempfile::tempdir().unwrap();
    let gw = start_at(config(data.path()), ls.scenario.start).await;
    let report = run_scenario(&ls, &endpoints(&gw, false), &RunOptions::default()).await.unwrap();
    assert_eq!((report.sends, report.accepted, report.rejections.len()), (3, 2, 1));
    assert_eq!(report.rejections[0].seq, 1);
    assert!(report.rejections[0].reason.contains("sys"), "{}", report.rejections[0].reason);
    assert!(report.delivery_failures.is_empty());
    gw.drain_and_stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn empty_timeline_sends_nothing() {
    let ls = tiny(json!([])).resolve(&repo_root().join("templates")).unwrap();
    let data = tempfile::tempdir().unwrap();
    let gw = start_at(config(data.path()), ls.scenario.start).await;
    let before = gw.node().digests();
    let report = run_scenario(&ls, &endpoints(&gw, false), &RunOptions::default()).await.unwrap();
    assert_eq!((report.sends, report.accepted), (0, 0));
    assert_eq!(gw.node().digests(), before);
    gw.drain_and_stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_gateway_becomes_delivery_failures() {
    let ls = tiny(json!([{"offset_s": 0, "device": "cuff", "payload": {"sys": 120, "dia": 80, "map": 93}}]))
        .resolve(&repo_root().join("templates"))
        .unwrap();
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let ep = blockiot_devsim::Endpoints { http: Some(format!("http://{closed}")), ..Default::default() };
    let opts = RunOptions { max_attempts: 2, ..RunOptions::default() };
    let report = run_scenario(&ls, &ep, &opts).await.unwrap();
    assert_eq!(report.delivery_failures.len(), 1);
    assert_eq!(report.delivery_failures[0].attempts, 2);
}

#[test]
fn invalid_scenarios_are_refused() {
    let templates = repo_root().join("templates");
    let out_of_order = tiny(json!([
        {"offset_s": 10, "device": "cuff", "payload": {"sys": 1}},
        {"offset_s": 5, "device": "cuff", "payload": {"sys": 1}},
    ]));
    assert!(matches!(out_of_order.resolve(&templates), Err(ScenarioError::Invalid(m)) if m.contains("non-decreasing")));

    let mut unknown = tiny(json!([]));
    unknown.devices[0].template = "toaster".into();
    assert!(matches!(unknown.resolve(&templates), Err(ScenarioError::Invalid(m)) if m.contains("toaster")));

    let mut no_creds = tiny(json!([]));
    no_creds.devices[0].transport = blockiot_core::ingest::Transport::Mqtt;
    assert!(no_creds.resolve(&templates).is_err());
}

#[test]
fn expansion_frames_payloads_for_the_template() {
    let ls = shipped("hypertension");
    let sends = ls.expand(ls.scenario.seed);
    let first_cuff = sends.iter().find(|s| s.payload.get("sys").is_some()).unwrap();
    assert_eq!(first_cuff.payload["pid"], "P3");
    assert_eq!(first_cuff.payload["did"], "BP-31");
    assert_eq!(first_cuff.payload["ts"], "2021-04-05T07:00:00.000Z");
    assert_eq!((first_cuff.payload["sys"].clone(), first_cuff.payload["dia"].clone()), (json!(102), json!(51)));
    assert!(sends.windows(2).all(|w| w[0].offset_ms <= w[1].offset_ms));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_seed_same_wire_payloads(seed in any::<u64>(), idx in 0usize..5) {
        let ls = shipped(SCENARIOS[idx]);
        let a = serde_json::to_vec(&ls.expand(seed)).unwrap();
        let b = serde_json::to_vec(&ls.expand(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noisy_scenarios_depend_on_the_seed(seed in any::<u64>()) {
        let ls = shipped("diabetes");
        prop_assert_ne!(
            serde_json::to_vec(&ls.expand(seed)).unwrap(),
            serde_json::to_vec(&ls.expand(seed.wrapping_add(1))).unwrap()
        );
    }
}
