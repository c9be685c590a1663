use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{load_template, DeviceTemplate, TemplateError};

/// Templates are addressed by manufacturer, model and firmware major version;
/// a firmware line that changes payload keys ships as a new template file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemplateKey {
    pub manufacturer: String,
    pub model: String,
    pub firmware_major: String,
}

impl TemplateKey {
    pub fn new(manufacturer: &str, model: &str, firmware: &str) -> Self {
        let major = firmware.split('.').next().unwrap_or(firmware);
        TemplateKey {
            manufacturer: manufacturer.to_string(),
            model: model.to_string(),
            firmware_major: major.to_string(),
        }
    }

    /// Parses the `manufacturer/model@major` text form.
    pub fn parse(s: &str) -> Option<Self> {
        let (rest, major) = s.rsplit_once('@')?;
        let (manufacturer, model) = rest.split_once('/')?;
        if manufacturer.is_empty() || model.is_empty() || major.is_empty() {
            return None;
        }
        Some(TemplateKey::new(manufacturer, model, major))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Template { path: String, source: TemplateError },
    #[error("{path}: template {key} already loaded from another file")]
    Duplicate { path: String, key: String },
}

type TemplateMap = HashMap<TemplateKey, Arc<DeviceTemplate>>;

/// Concurrent-read template registry. Reloads replace the whole map at once,
/// so a reader sees either the old set or the new one.
#[derive(Debug, Default)]
pub struct TemplateRegistry {
    current: RwLock<Arc<TemplateMap>>,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_templates(templates: impl IntoIterator<Item = DeviceTemplate>) -> Self {
        let reg = Self::new();
        reg.swap(templates.into_iter().map(|t| (t.key(), Arc::new(t))).collect());
        reg
    }

    pub fn snapshot(&self) -> Arc<TemplateMap> {
        self.current.read().expect("registry lock").clone()
    }

    pub fn get(&self, key: &TemplateKey) -> Option<Arc<DeviceTemplate>> {
        self.snapshot().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn swap(&self, map: TemplateMap) {
        *self.current.write().expect("registry lock") = Arc::new(map);
    }

    /// Loads every `*.json` file in `dir`; on any error the registry is left unchanged.
    pub fn reload_dir(&self, dir: &Path) -> Result<usize, RegistryError> {
        let map = read_dir(dir)?;
        let n = map.len();
        self.swap(map);
        Ok(n)
    }
}

fn read_dir(dir: &Path) -> Result<TemplateMap, RegistryError> {
    let io = |path: &Path, source| RegistryError::Io { path: path.display().to_string(), source };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut map = TemplateMap::new();
    for path in paths {
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        let template = load_template(&bytes).map_err(|source| RegistryError::Template {
            path: path.display().to_string(),
            source,
        })?;
        let key = template.key();
        if map.insert(key.clone(), Arc::new(template)).is_some() {
            return Err(RegistryError::Duplicate { path: path.display().to_string(), key: key.to_string() });
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::bp_template_json;

    #[test]
    fn key_text_form() {
        let k = TemplateKey::new("Acme", "BP-200", "1.4.2");
        assert_eq!(k.to_string(), "Acme/BP-200@1");
        assert_eq!(TemplateKey::parse("Acme/BP-200@1"), Some(k));
        assert_eq!(TemplateKey::parse("Acme@1"), None);
    }

    #[test]
    fn failed_reload_keeps_previous_set() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bp.json"), serde_json::to_vec(&bp_template_json()).unwrap()).unwrap();
        let reg = TemplateRegistry::new();
        assert_eq!(reg.reload_dir(dir.path()).unwrap(), 1);
        std::fs::write(dir.path().join("broken.json"), b"{").unwrap();
        assert!(reg.reload_dir(dir.path()).is_err());
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn concurrent_readers_see_whole_snapshots() {
        let reg = Arc::new(TemplateRegistry::new());
        let t: DeviceTemplate = serde_json::from_value(bp_template_json()).unwrap();
        let mut t2 = t.clone();
        t2.device_config.model = "BP-300".into();
        let writer = {
            let reg = reg.clone();
            std::thread::spawn(move || {
                for i in 0..200 {
                    let set = if i % 2 == 0 { vec![t.clone()] } else { vec![t.clone(), t2.clone()] };
                    reg.swap(set.into_iter().map(|t| (t.key(), Arc::new(t))).collect());
                }
            })
        };
        for _ in 0..200 {
            let n = reg.snapshot().len();
            assert!(n <= 2);
        }
        writer.join().unwrap();
    }
}
