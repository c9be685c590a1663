use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::compliance::{eval_drug_compliance, ComplianceReport, DoseSchedule};
use super::rules::numeric_points;
use super::{Observed, Window};
use crate::identity::PatientKey;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Count,
    Min,
    Max,
    Mean,
    Latest,
}

fn all_statistics() -> Vec<Statistic> {
    vec![Statistic::Count, Statistic::Min, Statistic::Max, Statistic::Mean, Statistic::Latest]
}

fn default_window_days() -> u32 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarySpec {
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    /// Codes to chart. A vector code expands to one series per component.
    pub codes: Vec<String>,
    #[serde(default = "all_statistics")]
    pub statistics: Vec<Statistic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compliance: Option<DoseSchedule>,
}

impl SummarySpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window_days == 0 {
            out.push("summarization window_days must be positive".into());
        }
        if let Some(c) = &self.compliance {
            out.extend(c.problems());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub time: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest: Option<f64>,
}

impl Stats {
    pub fn compute(points: &[Point], wanted: &[Statistic]) -> Stats {
        let has = |s| wanted.contains(&s);
        let values = || points.iter().map(|p| p.value);
        let nonempty = !points.is_empty();
        Stats {
            count: has(Statistic::Count).then_some(points.len() as u64),
            min: (has(Statistic::Min) && nonempty).then(|| values().fold(f64::INFINITY, f64::min)),
            max: (has(Statistic::Max) && nonempty).then(|| values().fold(f64::NEG_INFINITY, f64::max)),
            mean: (has(Statistic::Mean) && nonempty).then(|| values().sum::<f64>() / points.len() as f64),
            latest: (has(Statistic::Latest) && nonempty).then(|| points[points.len() - 1].value),
        }
    }
}

/// Chart data for providers. Content is stored in CAS; the address is not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub patient_key: PatientKey,
    pub window: Window,
    pub spec: SummarySpec,
    pub series: Vec<Series>,
    pub statistics: BTreeMap<String, Stats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compliance: Option<ComplianceReport>,
}

impl SummaryReport {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        crate::canonical::to_canonical_json(self)
    }

    pub fn series(&self, code: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.code == code)
    }
}

/// Builds the report over observations in `window`; points are ordered by time.
pub fn summarize(observations: &[Observed], spec: &SummarySpec, window: Window, patient: PatientKey) -> SummaryReport {
    let mut in_window: Vec<&Observed> = observations
        .iter()
        .filter(|o| o.obs.subject == patient && window.contains(o.obs.effective_time))
        .collect();
    in_window.sort_by_key(|o| (o.obs.effective_time, o.address));
    in_window.dedup_by_key(|o| o.address);

    let mut series: Vec<Series> = Vec::new();
    for requested in &spec.codes {
        let prefix = format!("{requested}/");
        let mut mine: Vec<Series> = Vec::new();
        for o in &in_window {
            for (code, value, unit) in numeric_points(o) {
                if code != *requested && !code.starts_with(&prefix) {
                    continue;
                }
                let point = Point { time: o.obs.effective_time, value };
                match mine.iter_mut().find(|s| s.code == code) {
                    Some(s) => s.points.push(point),
                    None => mine.push(Series { code, unit, points: vec![point] }),
                }
            }
        }
        if mine.is_empty() {
            mine.push(Series { code: requested.clone(), unit: None, points: Vec::new() });
        }
        for s in mine {
            if !series.iter().any(|x| x.code == s.code) {
                series.push(s);
            }
        }
    }
    let statistics = series.iter().map(|s| (s.code.clone(), Stats::compute(&s.points, &spec.statistics))).collect();
    let compliance = spec.compliance.as_ref().map(|sched| {
        let owned: Vec<Observed> = in_window.iter().map(|o| (*o).clone()).collect();
        eval_drug_compliance(&owned, sched, window, patient).0
    });
    SummaryReport { patient_key: patient, window, spec: spec.clone(), series, statistics, compliance }
}

/// Recomputes every statistic from the report's own series; exact match required.
pub fn audit_statistics(report: &SummaryReport) -> Result<(), String> {
    for s in &report.series {
        if s.points.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(format!("series {} is not sorted by time", s.code));
        }
        let recomputed = Stats::compute(&s.points, &report.spec.statistics);
        match report.statistics.get(&s.code) {
            Some(st) if same_stats(st, &recomputed) => {}
            Some(_) => return Err(format!("statistics for {} do not match its series", s.code)),
            None => return Err(format!("missing statistics for {}", s.code)),
        }
    }
    if report.statistics.len() != report.series.len() {
        return Err("statistics list codes without a series".into());
    }
    Ok(())
}

fn same_stats(a: &Stats, b: &Stats) -> bool {
    let bits = |x: Option<f64>| x.map(f64::to_bits);
    a.count == b.count
        && bits(a.min) == bits(b.min)
        && bits(a.max) == bits(b.max)
        && bits(a.mean) == bits(b.mean)
        && bits(a.latest) == bits(b.latest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::testutil::{bp, event, patient, scalar, t};
    use crate::contracts::Fraction;
    use crate::time::MILLIS_PER_DAY;
    use proptest::prelude::*;

    fn spec(codes: &[&str]) -> SummarySpec {
        SummarySpec {
            window_days: 7,
            codes: codes.iter().map(|s| s.to_string()).collect(),
            statistics: all_statistics(),
            compliance: None,
        }
    }

    fn week() -> Window {
        Window::new(t(1, 0, 0).plus_millis(-1), t(1, 0, 0).plus_millis(7 * MILLIS_PER_DAY - 1))
    }

    #[test]
    fn bp_vectors_expand_to_component_series() {
        let obs: Vec<_> = (0..14).map(|i| bp(t(1 + i / 2, 8 + 12 * (i % 2), 0), 120.0 + i as f64, 80.0 - i as f64)).collect();
        let r = summarize(&obs, &spec(&["blood-pressure"]), week(), patient());
        assert_eq!(r.series.len(), 2);
        let sys = r.series("blood-pressure/systolic").unwrap();
        assert_eq!(sys.points.len(), 14);
        assert_eq!(sys.points[13].value, 133.0);
        assert_eq!(sys.unit.as_deref(), Some("mm[Hg]"));
        let st = &r.statistics["blood-pressure/diastolic"];
        assert_eq!((st.count, st.min, st.max, st.latest), (Some(14), Some(67.0), Some(80.0), Some(67.0)));
        audit_statistics(&r).unwrap();
    }

    #[test]
    fn single_point_and_empty_window() {
        let obs = vec![scalar(t(2, 8, 0), "body-weight", 70.5, "kg")];
        let r = summarize(&obs, &spec(&["body-weight", "blood-glucose"]), week(), patient());
        let st = &r.statistics["body-weight"];
        assert_eq!((st.min, st.max, st.mean, st.latest), (Some(70.5), Some(70.5), Some(70.5), Some(70.5)));
        let empty = &r.statistics["blood-glucose"];
        assert_eq!(empty.count, Some(0));
        assert_eq!(empty.mean, None);
        let r = summarize(&[], &spec(&["x"]), week(), patient());
        assert!(r.series[0].points.is_empty());
        audit_statistics(&r).unwrap();
    }

    #[test]
    fn compliance_section() {
        let mut s = spec(&["pill-bottle-opening"]);
        s.compliance = Some(DoseSchedule {
            times: vec!["08:00".into(), "20:00".into()],
            tolerance_minutes: 60,
            threshold: Fraction::new(4, 5),
            window_days: 7,
            opening_code: "pill-bottle-opening".into(),
            start_date: None,
        });
        let obs = vec![event(t(1, 8, 5), "pill-bottle-opening", true)];
        let r = summarize(&obs, &s, week(), patient());
        let c = r.compliance.unwrap();
        assert_eq!((c.taken, c.scheduled), (1, 14));
        assert_eq!(c.daily.len(), 7);
    }

    #[test]
    fn tampered_statistics_fail_audit() {
        let obs = vec![scalar(t(2, 8, 0), "body-weight", 70.5, "kg"), scalar(t(2, 9, 0), "body-weight", 71.0, "kg")];
        let mut r = summarize(&obs, &spec(&["body-weight"]), week(), patient());
        r.statistics.get_mut("body-weight").unwrap().mean = Some(70.7);
        assert!(audit_statistics(&r).is_err());
    }

    proptest! {
        #[test]
        fn statistics_always_audit(values in proptest::collection::vec(-1e6f64..1e6, 0..60)) {
            let obs: Vec<_> = values
                .iter()
                .enumerate()
                .map(|(i, v)| scalar(t(1, 1, 0).plus_millis(i as i64 * 60_000), "glucose", *v, "mg/dL"))
                .collect();
            let r = summarize(&obs, &spec(&["glucose"]), week(), patient());
            prop_assert!(audit_statistics(&r).is_ok());
            let bytes = r.to_canonical_json();
            let back: SummaryReport = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(back.to_canonical_json(), bytes);
            prop_assert!(audit_statistics(&back).is_ok());
        }
    }
}
