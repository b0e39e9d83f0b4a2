use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use repsim::kernel::{cka_batched, format_cka_csv, BatchPlan, CkaMode, CkaSidecar};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{is_synthetic, open_stack, DEFAULT_CHUNK};
use crate::config::{self, path_value, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::svg::{heatmap, Heatmap};
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    #[arg(long)]
    store_a: Option<PathBuf>,
    #[arg(long)]
    store_b: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    store_a: PathBuf,
    store_b: PathBuf,
    seed: Option<u64>,
    #[serde(default)]
    mode: CkaMode,
    #[serde(default = "default_chunk")]
    chunk: usize,
    #[serde(default)]
    batches: Option<usize>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let cfg: Config = config::load(
        "cka",
        common,
        Accepts::ALL,
        vec![("store_a", path_value(flags.store_a)), ("store_b", path_value(flags.store_b))],
    )?;
    let seed = config::require_seed("cka", cfg.seed)?;
    let (store_a, a) = open_stack(&cfg.store_a)?;
    let (store_b, b) = open_stack(&cfg.store_b)?;
    let (da, db) = (&store_a.manifest().dataset_id, &store_b.manifest().dataset_id);
    if da != db {
        return Err(Failure::invalid(format!("stores cover different datasets: {da} vs {db}")));
    }
    if a.rows() != b.rows() {
        return Err(Failure::invalid(format!("stores hold {} and {} token rows", a.rows(), b.rows())));
    }
    let plan = BatchPlan::new(a.rows(), cfg.chunk, cfg.batches, seed).context("planning batches")?;
    let m = cka_batched(a.stream(&plan), b.stream(&plan), cfg.mode).context("computing CKA")?;

    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), Some(seed))?;
    let csv = format!("{}{}", out.csv_header(), format_cka_csv(&m));
    out.write_text("cka.csv", &csv)?;
    let synthetic = is_synthetic(&store_a) || is_synthetic(&store_b);
    let mut extra = BTreeMap::from([
        ("model_a".to_string(), json!(m.model_a)),
        ("model_b".to_string(), json!(m.model_b)),
        ("dataset_id".to_string(), json!(da)),
        ("rows".to_string(), json!(a.rows())),
        ("dropped_rows".to_string(), json!(plan.dropped_rows)),
        ("diagonal".to_string(), json!((m.shape().0 == m.shape().1).then(|| m.diagonal()))),
    ]);
    if synthetic {
        extra.insert("label".into(), json!(repsim::toy::SYNTHETIC_LABEL));
    }
    let sidecar = CkaSidecar {
        mode: cfg.mode,
        batches_used: m.batches_used,
        seed,
        chunk: cfg.chunk,
        extra,
    };
    out.write_json("cka.json", &sidecar)?;
    let svg = heatmap(&Heatmap {
        data: &m.data,
        title: &format!("CKA: {} vs {}", m.model_a, m.model_b),
        row_label: &format!("{} layer", m.model_a),
        col_label: &format!("{} layer", m.model_b),
        metadata: json!({
            "model_a": m.model_a,
            "model_b": m.model_b,
            "mode": cfg.mode.as_str(),
            "batches_used": m.batches_used,
            "provenance": out.provenance(),
        }),
    });
    out.write_text("cka.svg", &svg)?;
    Ok(())
}
