//! Run configuration: defaults, a JSON config file merged on top, then
//! dotted-path `--set` overrides, validated as a whole before any work.

use std::fs;
use std::path::{Path, PathBuf};

use labelaux::model::ModelConfig;
use labelaux::scene::GenConfig;
use labelaux::training::TrainConfig;
use labelaux::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::AblationGrid;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the first generated scene; scene `i` of the dataset uses
    /// `data_seed + i`.
    pub data_seed: u64,
    /// Dataset directory; `<outdir>/data` when unset.
    pub data_dir: Option<PathBuf>,
    pub ablation: AblationGrid,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.gen.num_classes() {
            return Err(Error::Validation(format!(
                "model.num_classes = {} but gen defines {} classes",
                self.model.num_classes,
                self.gen.num_classes()
            )));
        }
        self.ablation.validate()
    }

    pub fn data_dir(&self, outdir: &Path) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| outdir.join("data"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.resolved.json` into `outdir`.
    pub fn echo(&self, outdir: &Path) -> Result<()> {
        fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
        let path = outdir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// Defaults, then the file at `path` (if any), then each `key=value`
/// override in order.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        merge(&mut value, file, "")?;
    }
    for raw in overrides {
        apply_override(&mut value, raw)?;
    }
    from_value(value)
}

pub fn from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::parse("config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive object merge; non-object values replace wholesale. Keys
/// absent from `base` are rejected so typos never pass silently.
pub fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Validation(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses as such and as a plain string otherwise.
pub fn apply_override(value: &mut Value, raw: &str) -> Result<()> {
    let (key, text) = raw
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{raw}` is not of the form key=value")))?;
    let parsed = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    let mut slot = &mut *value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Validation(format!("unknown config key `{key}`")))?;
    }
    *slot = parsed;
    Ok(())
}
