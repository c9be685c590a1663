use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ledger::LedgerConfig;

pub const ENV_PREFIX: &str = "BLOCKIOT_";
pub const MAX_CONFIG_DIFFICULTY: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListenConfig {
    /// `off` or an empty string disables a listener.
    pub http: String,
    pub mqtt: String,
    pub coap: String,
}

impl Default for ListenConfig {
    fn default() -> Self {
        ListenConfig { http: "127.0.0.1:8080".into(), mqtt: "127.0.0.1:1883".into(), coap: "127.0.0.1:5683".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerSection {
    pub difficulty_bits: u32,
    pub seal_threshold: usize,
    pub seal_interval_ms: i64,
}

impl Default for LedgerSection {
    fn default() -> Self {
        let d = LedgerConfig::default();
        LedgerSection {
            difficulty_bits: d.difficulty_bits,
            seal_threshold: d.seal_threshold,
            seal_interval_ms: d.seal_interval_ms,
        }
    }
}

impl From<&LedgerSection> for LedgerConfig {
    fn from(s: &LedgerSection) -> Self {
        LedgerConfig {
            difficulty_bits: s.difficulty_bits,
            seal_threshold: s.seal_threshold,
            seal_interval_ms: s.seal_interval_ms,
        }
    }
}

/// Fixed key seeds, mainly for tests. Absent seeds come from the keystore under the data directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeySection {
    pub gateway_seed: Option<String>,
    pub admin_seed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub data_dir: PathBuf,
    pub template_dir: PathBuf,
    pub contract_dir: PathBuf,
    pub registrations: PathBuf,
    pub webhook_url: Option<String>,
    /// Plain TCP/UDP listeners without TLS or DTLS.
    pub insecure_test_mode: bool,
    pub max_batch: usize,
    pub queue_depth: usize,
    pub drain_timeout_ms: u64,
    /// Largest accepted gap between device and gateway clocks; unset uses each template's accuracy.
    pub clock_skew_budget_ms: Option<u64>,
    pub listen: ListenConfig,
    pub ledger: LedgerSection,
    pub keys: KeySection,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            data_dir: "data".into(),
            template_dir: "templates".into(),
            contract_dir: "contracts".into(),
            registrations: "registrations.json".into(),
            webhook_url: None,
            insecure_test_mode: false,
            max_batch: crate::ingest::DEFAULT_MAX_BATCH,
            queue_depth: 64,
            drain_timeout_ms: 10_000,
            clock_skew_budget_ms: None,
            listen: ListenConfig::default(),
            ledger: LedgerSection::default(),
            keys: KeySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn listen_addr(s: &str, what: &str) -> Result<Option<SocketAddr>, ConfigError> {
    match s.trim() {
        "" | "off" => Ok(None),
        a => a.parse().map(Some).map_err(|_| ConfigError(format!("listen.{what}: {a:?} is not a socket address"))),
    }
}

impl GatewayConfig {
    /// Reads the file (if any), applies environment overrides, resolves relative
    /// paths against the file's directory, and validates. Precedence: env, file, default.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                toml::from_str::<GatewayConfig>(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => GatewayConfig::default(),
        };
        cfg.apply_env(env)?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_process_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, |k| std::env::var(k).ok())
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |name: &str| env(&format!("{ENV_PREFIX}{name}"));
        fn num<T: std::str::FromStr>(name: &str, v: String) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError(format!("{ENV_PREFIX}{name}: {v:?} is not a number")))
        }
        if let Some(v) = get("DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("TEMPLATE_DIR") {
            self.template_dir = v.into();
        }
        if let Some(v) = get("CONTRACT_DIR") {
            self.contract_dir = v.into();
        }
        if let Some(v) = get("REGISTRATIONS") {
            self.registrations = v.into();
        }
        if let Some(v) = get("WEBHOOK_URL") {
            self.webhook_url = (!v.is_empty()).then_some(v);
        }
        if let Some(v) = get("INSECURE_TEST_MODE") {
            self.insecure_test_mode = matches!(v.as_str(), "1" | "true" | "yes");
        }
        if let Some(v) = get("HTTP_ADDR") {
            self.listen.http = v;
        }
        if let Some(v) = get("MQTT_ADDR") {
            self.listen.mqtt = v;
        }
        if let Some(v) = get("COAP_ADDR") {
            self.listen.coap = v;
        }
        if let Some(v) = get("MAX_BATCH") {
            self.max_batch = num("MAX_BATCH", v)?;
        }
        if let Some(v) = get("CLOCK_SKEW_BUDGET_MS") {
            self.clock_skew_budget_ms = if v.trim().is_empty() { None } else { Some(num("CLOCK_SKEW_BUDGET_MS", v)?) };
        }
        if let Some(v) = get("DIFFICULTY_BITS") {
            self.ledger.difficulty_bits = num("DIFFICULTY_BITS", v)?;
        }
        if let Some(v) = get("SEAL_THRESHOLD") {
            self.ledger.seal_threshold = num("SEAL_THRESHOLD", v)?;
        }
        if let Some(v) = get("SEAL_INTERVAL_MS") {
            self.ledger.seal_interval_ms = num("SEAL_INTERVAL_MS", v)?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data_dir, &mut self.template_dir, &mut self.contract_dir, &mut self.registrations] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ledger.difficulty_bits > MAX_CONFIG_DIFFICULTY {
            return Err(ConfigError(format!(
                "ledger.difficulty_bits {} is outside 0..={MAX_CONFIG_DIFFICULTY}",
                self.ledger.difficulty_bits
            )));
        }
        if self.ledger.seal_threshold == 0 {
            return Err(ConfigError("ledger.seal_threshold must be positive".into()));
        }
        if self.ledger.seal_interval_ms <= 0 {
            return Err(ConfigError("ledger.seal_interval_ms must be positive".into()));
        }
        if self.max_batch == 0 || self.queue_depth == 0 {
            return Err(ConfigError("max_batch and queue_depth must be positive".into()));
        }
        self.http_addr()?;
        self.mqtt_addr()?;
        self.coap_addr()?;
        Ok(())
    }

    pub fn http_addr(&self) -> Result<Option<SocketAddr>, ConfigError> {
        listen_addr(&self.listen.http, "http")
    }

    pub fn mqtt_addr(&self) -> Result<Option<SocketAddr>, ConfigError> {
        listen_addr(&self.listen.mqtt, "mqtt")
    }

    pub fn coap_addr(&self) -> Result<Option<SocketAddr>, ConfigError> {
        listen_addr(&self.listen.coap, "coap")
    }

    pub fn ledger_config(&self) -> LedgerConfig {
        (&self.ledger).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_validate() {
        let c = GatewayConfig::load(None, no_env).unwrap();
        assert_eq!(c.ledger.difficulty_bits, 12);
        assert_eq!(c.http_addr().unwrap(), Some("127.0.0.1:8080".parse().unwrap()));
    }

    #[test]
    fn env_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.toml");
        std::fs::write(&path, "data_dir = \"d\"\n[ledger]\ndifficulty_bits = 8\nseal_threshold = 3\n").unwrap();
        let env: HashMap<String, String> = [("BLOCKIOT_DIFFICULTY_BITS".to_string(), "4".to_string())].into();
        let c = GatewayConfig::load(Some(&path), |k| env.get(k).cloned()).unwrap();
        assert_eq!(c.ledger.difficulty_bits, 4);
        assert_eq!(c.ledger.seal_threshold, 3);
        assert_eq!(c.ledger.seal_interval_ms, 5_000);
        assert_eq!(c.data_dir, dir.path().join("d"));
    }

    #[test]
    fn rejects_bad_values() {
        let env = |k: &str| (k == "BLOCKIOT_DIFFICULTY_BITS").then(|| "25".to_string());
        assert!(GatewayConfig::load(None, env).unwrap_err().0.contains("difficulty_bits"));
        let env = |k: &str| (k == "BLOCKIOT_HTTP_ADDR").then(|| "localhost".to_string());
        assert!(GatewayConfig::load(None, env).is_err());
        let env = |k: &str| (k == "BLOCKIOT_MQTT_ADDR").then(|| "off".to_string());
        assert_eq!(GatewayConfig::load(None, env).unwrap().mqtt_addr().unwrap(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.toml");
        std::fs::write(&path, "colour = \"blue\"\n").unwrap();
        assert!(GatewayConfig::load(Some(&path), no_env).is_err());
    }
}
