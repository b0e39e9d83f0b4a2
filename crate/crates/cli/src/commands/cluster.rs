use std::path::PathBuf;

use clap::Args;
use repsim::metric::{cluster_two, DistanceMatrix};
use serde::{Deserialize, Serialize};

use crate::config::{self, path_value, require_path, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    /// Distance CSV written by `distances`
    #[arg(long)]
    distances: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    distances: PathBuf,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let cfg: Config = config::load("cluster", common, Accepts::SEED, vec![("distances", path_value(flags.distances))])?;
    require_path(&cfg.distances, "distance CSV")?;
    let text = std::fs::read_to_string(&cfg.distances)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", cfg.distances.display())))?;
    let d = DistanceMatrix::from_csv(&text).context(format!("parsing {}", cfg.distances.display()))?;
    let clusters = cluster_two(&d).context("clustering")?;
    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), cfg.seed)?;
    out.write_json("cluster.json", &clusters)?;
    Ok(())
}
