use std::path::PathBuf;

use clap::Args;
use repsim::kernel::parse_cka_csv;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, path_value, require_path, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::svg::{heatmap, Heatmap};
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    /// CKA CSV written by `cka`
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Output file name inside --out
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    csv: PathBuf,
    #[serde(default = "default_name")]
    name: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

fn default_name() -> String {
    "heatmap.svg".into()
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let cfg: Config = config::load(
        "heatmap",
        common,
        Accepts::SEED,
        vec![("csv", path_value(flags.csv)), ("name", flags.name.map(Into::into))],
    )?;
    require_path(&cfg.csv, "CKA CSV")?;
    let text = std::fs::read_to_string(&cfg.csv)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", cfg.csv.display())))?;
    let m = parse_cka_csv(&text).context(format!("parsing {}", cfg.csv.display()))?;
    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), cfg.seed)?;
    let svg = heatmap(&Heatmap {
        data: &m.data,
        title: &format!("CKA: {} vs {}", m.model_a, m.model_b),
        row_label: &format!("{} layer", m.model_a),
        col_label: &format!("{} layer", m.model_b),
        metadata: json!({
            "model_a": m.model_a,
            "model_b": m.model_b,
            "mode": m.mode.as_str(),
            "batches_used": m.batches_used,
            "provenance": out.provenance(),
        }),
    });
    out.write_text(&cfg.name, &svg)?;
    Ok(())
}
