use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{AlertEvent, ContractKind, Observed, Severity, Window};
use crate::cas::ContentAddress;
use crate::identity::PatientKey;
use crate::observation::MeasurementValue;
use crate::time::{Timestamp, MILLIS_PER_DAY, MILLIS_PER_MINUTE};

/// Exact non-negative fraction. Reads `0.8`, `"0.8"` or `"4/5"`; writes `"4/5"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fraction(pub Ratio<u64>);

impl Fraction {
    pub fn new(numer: u64, denom: u64) -> Self {
        Fraction(Ratio::new(numer, denom))
    }

    pub fn one() -> Self {
        Fraction::new(1, 1)
    }

    pub fn to_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("invalid fraction {s:?}");
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| bad())?;
            let d: u64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            return Ok(Fraction::new(n, d));
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 18 {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let denom = 10u64.pow(frac.len() as u32);
        let frac_n: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int.checked_mul(denom).and_then(|v| v.checked_add(frac_n)).ok_or_else(bad)?;
        Ok(Fraction::new(numer, denom))
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            serde_json::Value::Number(n) => n.to_string().parse().map_err(serde::de::Error::custom),
            other => Err(serde::de::Error::custom(format!("expected fraction, got {other}"))),
        }
    }
}

fn default_threshold() -> Fraction {
    Fraction::new(4, 5)
}

fn default_window_days() -> u32 {
    7
}

fn default_opening_code() -> String {
    "pill-bottle-opening".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseSchedule {
    /// Times of day, `HH:MM`, interpreted in UTC.
    pub times: Vec<String>,
    pub tolerance_minutes: u32,
    #[serde(default = "default_threshold")]
    pub threshold: Fraction,
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    #[serde(default = "default_opening_code")]
    pub opening_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
}

impl DoseSchedule {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.times {
            if parse_time_of_day(t).is_none() {
                out.push(format!("invalid time of day {t:?} (expected HH:MM)"));
            }
        }
        if self.tolerance_minutes > 12 * 60 {
            out.push("tolerance_minutes must be at most 720".into());
        }
        if self.window_days == 0 {
            out.push("window_days must be positive".into());
        }
        if self.threshold > Fraction::one() {
            out.push("threshold must be within [0, 1]".into());
        }
        out
    }

    /// Offsets from midnight in milliseconds, sorted and deduplicated.
    pub fn offsets_ms(&self) -> Vec<i64> {
        let mut v: Vec<i64> = self.times.iter().filter_map(|t| parse_time_of_day(t)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn tolerance_ms(&self) -> i64 {
        i64::from(self.tolerance_minutes) * MILLIS_PER_MINUTE
    }
}

fn parse_time_of_day(s: &str) -> Option<i64> {
    if s.len() != 5 {
        return None;
    }
    let t = NaiveTime::parse_from_str(s, "%H:%M").ok()?;
    Some(i64::from(t.signed_duration_since(NaiveTime::MIN).num_minutes() as i32) * MILLIS_PER_MINUTE)
}

/// Every scheduled dose instant inside the window, in time order.
pub fn scheduled_doses(schedule: &DoseSchedule, window: Window) -> Vec<Timestamp> {
    let offsets = schedule.offsets_ms();
    let mut out = Vec::new();
    if window.end <= window.start {
        return out;
    }
    let mut day = Timestamp::start_of_day(window.start.date());
    while day <= window.end {
        for off in &offsets {
            let s = day.plus_millis(*off);
            if window.contains(s) {
                out.push(s);
            }
        }
        day = day.plus_millis(MILLIS_PER_DAY);
    }
    out
}

/// Pairs each dose (in order) with the nearest unclaimed opening within `tolerance_ms`;
/// ties go to the earlier opening. `openings` must be sorted. Returns, per dose,
/// the index of the claimed opening.
pub fn match_doses(doses: &[Timestamp], openings: &[(Timestamp, ContentAddress)], tolerance_ms: i64) -> Vec<Option<usize>> {
    debug_assert!(openings.windows(2).all(|w| w[0] <= w[1]));
    let mut claimed = vec![false; openings.len()];
    doses
        .iter()
        .map(|&s| {
            let lo = openings.partition_point(|(t, _)| t.millis() < s.millis() - tolerance_ms);
            let hi = openings.partition_point(|(t, _)| t.millis() <= s.millis() + tolerance_ms);
            let best = (lo..hi)
                .filter(|&i| !claimed[i])
                .min_by_key(|&i| (openings[i].0.abs_diff_millis(s), i))?;
            claimed[best] = true;
            Some(best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseOutcome {
    pub scheduled_at: Timestamp,
    pub taken: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opened_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyCompliance {
    pub date: NaiveDate,
    pub taken: u32,
    pub missed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub window: Window,
    pub doses: Vec<DoseOutcome>,
    pub scheduled: u32,
    pub taken: u32,
    pub compliance_ratio: Fraction,
    pub daily: Vec<DailyCompliance>,
}

fn openings_of(observations: &[Observed], code: &str) -> Vec<(Timestamp, ContentAddress)> {
    let mut v: Vec<_> = observations
        .iter()
        .filter(|o| o.obs.code_binding == code)
        .filter(|o| matches!(o.obs.value, MeasurementValue::EventState { active: true, .. }))
        .map(|o| (o.obs.effective_time, o.address))
        .collect();
    v.sort();
    v
}

/// Compliance over `window`. An alert is produced iff the ratio is below the threshold
/// and there is at least one bottle observation in the window to attribute it to.
pub fn eval_drug_compliance(
    observations: &[Observed],
    schedule: &DoseSchedule,
    window: Window,
    patient: PatientKey,
) -> (ComplianceReport, Option<AlertEvent>) {
    let doses = scheduled_doses(schedule, window);
    let openings = openings_of(observations, &schedule.opening_code);
    let matched = match_doses(&doses, &openings, schedule.tolerance_ms());

    let mut daily: BTreeMap<NaiveDate, (u32, u32)> = BTreeMap::new();
    let outcomes: Vec<DoseOutcome> = doses
        .iter()
        .zip(&matched)
        .map(|(&s, m)| {
            let e = daily.entry(s.date()).or_default();
            if m.is_some() {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            DoseOutcome { scheduled_at: s, taken: m.is_some(), opened_at: m.map(|i| openings[i].0) }
        })
        .collect();
    let scheduled = doses.len() as u32;
    let taken = matched.iter().filter(|m| m.is_some()).count() as u32;
    let ratio = if scheduled == 0 { Fraction::one() } else { Fraction::new(u64::from(taken), u64::from(scheduled)) };
    let report = ComplianceReport {
        window,
        doses: outcomes,
        scheduled,
        taken,
        compliance_ratio: ratio,
        daily: daily
            .into_iter()
            .map(|(date, (taken, missed))| DailyCompliance { date, taken, missed })
            .collect(),
    };

    let alert = if ratio < schedule.threshold {
        let in_window: Vec<&Observed> = observations
            .iter()
            .filter(|o| o.obs.code_binding == schedule.opening_code && window.contains(o.obs.effective_time))
            .collect();
        let active: Vec<&Observed> = in_window
            .iter()
            .copied()
            .filter(|o| matches!(o.obs.value, MeasurementValue::EventState { active: true, .. }))
            .collect();
        let triggers = if active.is_empty() { in_window } else { active };
        (!triggers.is_empty()).then(|| {
            let mut ev = AlertEvent::from_triggers(
                Severity::Alert,
                patient,
                ContractKind::DrugCompliance,
                &triggers,
                format!(
                    "compliance {taken}/{scheduled} below threshold {} over {window}",
                    schedule.threshold
                ),
            );
            ev.emitted_at = window.end;
            ev
        })
    } else {
        None
    };
    (report, alert)
}
