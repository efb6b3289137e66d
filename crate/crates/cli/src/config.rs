//! Run configuration: a JSON file merged with `--set key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use aomd_core::io::SyntheticSpec;
use aomd_core::{Error, ModelConfig, Result, TrainConfig};

/// Every tunable knob, addressed by dotted key: `model.d`,
/// `model.cluster.pad_factor`, `train.optim.learning_rate`,
/// `synthetic.n_posts`, ...
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

pub const ECHO_NAME: &str = "config.json";

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(base, overrides)
    }

    /// Like [`RunConfig::load`], but `path` holds only the `synthetic`
    /// section.
    pub fn load_spec(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = Map::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)?;
            let spec: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            root.insert("synthetic".into(), spec);
        }
        Self::from_value(Value::Object(root), overrides)
    }

    fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        // Data-derived widths may still be zero here; they are checked once
        // the dataset is loaded.
        let mut model = self.model.clone();
        for dim in [
            &mut model.embed_dim,
            &mut model.global_dim,
            &mut model.object_dim,
        ] {
            *dim = (*dim).max(1);
        }
        model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()
    }

    /// Writes the effective configuration as `config.json` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(ECHO_NAME), text)?;
        Ok(())
    }
}

/// Sets one dotted key. The value is parsed as JSON when it can be, and
/// taken as a string otherwise, so `model.ablation=no_ocr` works unquoted.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = root;
    for (i, part) in path.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one part")
}
