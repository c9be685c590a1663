//! MQTT 3.1.1 endpoint. Devices connect directly with username and password,
//! publish to `blockiot/<patient>/<device>/obs` at QoS 0 or 1, and receive
//! receipts on `blockiot/<patient>/<device>/receipt` if subscribed.

mod server;
pub mod wire;

pub(crate) use server::serve;

pub const TOPIC_ROOT: &str = "blockiot";

pub fn obs_topic(patient_id: &str, device_id: &str) -> String {
    format!("{TOPIC_ROOT}/{patient_id}/{device_id}/obs")
}

pub fn receipt_topic(patient_id: &str, device_id: &str) -> String {
    format!("{TOPIC_ROOT}/{patient_id}/{device_id}/receipt")
}

/// `(patient_id, device_id)` from an observation topic.
pub fn parse_obs_topic(topic: &str) -> Option<(&str, &str)> {
    let mut parts = topic.split('/');
    match (parts.next(), parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(TOPIC_ROOT), Some(p), Some(d), Some("obs"), None) if !p.is_empty() && !d.is_empty() => Some((p, d)),
        _ => None,
    }
}

/// Topic filter matching with `+` and `#` wildcards.
pub fn filter_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}
