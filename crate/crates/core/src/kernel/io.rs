//! CKA matrix CSV layout:
//!
//! ```text
//! # model_a: <id>
//! # model_b: <id>
//! # mode: standard|paper
//! # batches_used: <n>
//! layer,0,1,...,L'-1
//! 0,<S_00>,<S_01>,...
//! ```
//!
//! Rows are layers of model A, columns layers of model B. Values use the
//! shortest representation that round-trips to the same `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CkaMatrix, CkaMode};
use crate::error::{Error, Result};

/// JSON sidecar written next to a CKA CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaSidecar {
    pub mode: CkaMode,
    pub batches_used: usize,
    pub seed: u64,
    pub chunk: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn format_cka_csv(m: &CkaMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# model_a: {}", m.model_a);
    let _ = writeln!(out, "# model_b: {}", m.model_b);
    let _ = writeln!(out, "# mode: {}", m.mode.as_str());
    let _ = writeln!(out, "# batches_used: {}", m.batches_used);
    out.push_str("layer");
    for j in 0..m.data.ncols() {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for (i, row) in m.data.rows().into_iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_cka_csv(path: &Path, m: &CkaMatrix) -> Result<()> {
    std::fs::write(path, format_cka_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_cka_csv(text: &str) -> Result<CkaMatrix> {
    let bad = |msg: String| Error::Config(format!("malformed CKA csv: {msg}"));
    let mut meta = BTreeMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_header = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if !seen_header {
            seen_header = true;
            continue;
        }
        let values = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    let cols = rows.first().map(Vec::len).ok_or_else(|| bad("no data rows".into()))?;
    if rows.iter().any(|r| r.len() != cols) || cols == 0 {
        return Err(bad("ragged rows".into()));
    }
    let n = rows.len();
    let data = Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| bad(e.to_string()))?;
    let mode = meta.get("mode").map(|m| m.parse()).transpose()?.unwrap_or_default();
    let batches_used = meta
        .get("batches_used")
        .map(|b| b.parse::<usize>().map_err(|e| bad(e.to_string())))
        .transpose()?
        .unwrap_or(0);
    Ok(CkaMatrix {
        data,
        mode,
        batches_used,
        model_a: meta.remove("model_a").unwrap_or_default(),
        model_b: meta.remove("model_b").unwrap_or_default(),
    })
}

pub fn read_cka_csv(path: &Path) -> Result<CkaMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cka_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = CkaMatrix {
            data: array![[1.0, 0.1 + 0.2], [-3.5e-17, 0.9999999999999998]],
            mode: CkaMode::PaperLiteral,
            batches_used: 12,
            model_a: "gelu-3l".into(),
            model_b: "solu-3l".into(),
        };
        let text = format_cka_csv(&m);
        assert!(text.starts_with("# model_a: gelu-3l\n# model_b: solu-3l\n# mode: paper\n"));
        assert_eq!(parse_cka_csv(&text).unwrap(), m);
    }

    #[test]
    fn sidecar_fields() {
        let s = CkaSidecar {
            mode: CkaMode::Standard,
            batches_used: 3,
            seed: 9,
            chunk: 64,
            extra: BTreeMap::new(),
        };
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"mode":"standard","batches_used":3,"seed":9,"chunk":64}"#
        );
    }
}
