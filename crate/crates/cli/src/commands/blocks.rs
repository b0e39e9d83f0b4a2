use std::path::PathBuf;

use clap::Args;
use repsim::kernel::parse_cka_csv;
use repsim::metric::detect_blocks;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, path_value, require_path, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    /// Self-comparison CKA CSV written by `cka`
    #[arg(long)]
    cka: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    cka: PathBuf,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let cfg: Config = config::load("blocks", common, Accepts::SEED, vec![("cka", path_value(flags.cka))])?;
    require_path(&cfg.cka, "CKA CSV")?;
    let text = std::fs::read_to_string(&cfg.cka)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", cfg.cka.display())))?;
    let m = parse_cka_csv(&text).context(format!("parsing {}", cfg.cka.display()))?;
    let seg = detect_blocks(m.data.view()).map_err(|e| Failure::invalid(format!("{e}")))?;
    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), cfg.seed)?;
    out.write_json(
        "blocks.json",
        &json!({
            "model": m.model_a,
            "layers": m.data.nrows(),
            "block_count": seg.block_count(),
            "segmentation": seg,
        }),
    )?;
    Ok(())
}
