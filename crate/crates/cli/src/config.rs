use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::failure::Failure;
use crate::Common;

/// Which shared flags a subcommand understands.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accepts {
    pub seed: bool,
    pub mode: bool,
    pub chunk: bool,
    pub batches: bool,
}

impl Accepts {
    pub const ALL: Accepts = Accepts {
        seed: true,
        mode: true,
        chunk: true,
        batches: true,
    };
    pub const SEED: Accepts = Accepts {
        seed: true,
        mode: false,
        chunk: false,
        batches: false,
    };
}

/// Reads the config file (if any), applies shared and command flags on top
/// and deserializes the result. Unknown keys are rejected by the target type.
pub fn load<T: DeserializeOwned>(
    command: &str,
    common: &Common,
    accepts: Accepts,
    overrides: Vec<(&str, Option<Value>)>,
) -> Result<T, Failure> {
    let mut map = match &common.config {
        Some(path) => read_object(path)?,
        None => Map::new(),
    };
    let shared = [
        ("seed", accepts.seed, common.seed.map(Value::from)),
        ("mode", accepts.mode, common.mode.clone().map(Value::from)),
        ("chunk", accepts.chunk, common.chunk.map(Value::from)),
        ("batches", accepts.batches, common.batches.map(Value::from)),
    ];
    for (key, ok, value) in shared {
        if let Some(v) = value {
            if !ok {
                return Err(Failure::invalid(format!("--{key} does not apply to `{command}`")));
            }
            map.insert(key.to_string(), v);
        }
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Failure::invalid(format!("invalid `{command}` config: {e}")))
}

fn read_object(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::invalid(format!("config {} is not a JSON object", path.display()))),
        Err(e) => Err(Failure::invalid(format!("config {} is not valid JSON: {e}", path.display()))),
    }
}

/// SHA-256 of the effective config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn require_path(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{what} {} does not exist", path.display())))
    }
}

pub fn path_value(p: Option<PathBuf>) -> Option<Value> {
    p.map(|p| Value::from(p.to_string_lossy().into_owned()))
}

pub fn out_dir(common: &Common, from_config: Option<PathBuf>) -> PathBuf {
    common
        .out
        .clone()
        .or(from_config)
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn require_seed(command: &str, seed: Option<u64>) -> Result<u64, Failure> {
    seed.ok_or_else(|| Failure::invalid(format!("`{command}` needs a seed (--seed or \"seed\" in the config)")))
}
