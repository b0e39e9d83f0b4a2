use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::{io, Failure};

pub const TOOL: &str = concat!("repsim ", env!("CARGO_PKG_VERSION"));

/// Output directory for one command invocation.
pub struct Output {
    dir: PathBuf,
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Output {
    pub fn create(dir: PathBuf, config_hash: String, seed: Option<u64>) -> Result<Output, Failure> {
        io(fs::create_dir_all(&dir), format!("creating {}", dir.display()))?;
        Ok(Output { dir, config_hash, seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `{"config_hash", "seed", "tool"}` block embedded in every output.
    pub fn provenance(&self) -> Value {
        json!({
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool": TOOL,
        })
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            io(fs::create_dir_all(parent), format!("creating {}", parent.display()))?;
        }
        io(fs::write(&path, text), format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Pretty JSON with a trailing newline and a `provenance` field added to
    /// objects.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let mut v = serde_json::to_value(value).map_err(|e| Failure::Runtime(e.into()))?;
        if let Value::Object(m) = &mut v {
            m.insert("provenance".into(), self.provenance());
        }
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| Failure::Runtime(e.into()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// `# config_hash: ..` and `# seed: ..` comment lines for CSV outputs.
    pub fn csv_header(&self) -> String {
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        format!("# config_hash: {}\n# seed: {seed}\n", self.config_hash)
    }
}
