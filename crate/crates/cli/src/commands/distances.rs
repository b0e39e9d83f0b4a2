use std::path::PathBuf;

use clap::Args;
use repsim::kernel::{BatchPlan, CkaMode, LayerStack};
use repsim::metric::{distances_from_layerwise, layerwise_cka, per_layer_divergence};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{is_synthetic, open_stack, DEFAULT_CHUNK};
use crate::config::{self, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    /// Activation stores, comma separated
    #[arg(long, value_delimiter = ',')]
    stores: Option<Vec<PathBuf>>,
}

/// Model ids of two groups for the divergence report.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Groups {
    a: Vec<String>,
    b: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    stores: Vec<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    mode: CkaMode,
    #[serde(default = "default_chunk")]
    chunk: usize,
    #[serde(default)]
    batches: Option<usize>,
    #[serde(default)]
    groups: Option<Groups>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let stores = flags
        .stores
        .map(|v| v.into_iter().map(|p| p.to_string_lossy().into_owned()).collect::<Vec<_>>().into());
    let cfg: Config = config::load("distances", common, Accepts::ALL, vec![("stores", stores)])?;
    let seed = config::require_seed("distances", cfg.seed)?;
    if cfg.stores.len() < 2 {
        return Err(Failure::invalid("distances needs at least two stores"));
    }
    let mut stacks: Vec<LayerStack> = Vec::new();
    let mut dataset: Option<String> = None;
    let mut synthetic = false;
    for path in &cfg.stores {
        let (store, stack) = open_stack(path)?;
        let id = &store.manifest().dataset_id;
        match &dataset {
            Some(d) if d != id => {
                return Err(Failure::invalid(format!("store {} covers dataset {id}, expected {d}", path.display())))
            }
            _ => dataset = Some(id.clone()),
        }
        if stacks.iter().any(|s| s.model_id() == stack.model_id()) {
            return Err(Failure::invalid(format!("model id {} appears twice", stack.model_id())));
        }
        synthetic |= is_synthetic(&store);
        stacks.push(stack);
    }
    if let Some(bad) = stacks.iter().find(|s| s.rows() != stacks[0].rows()) {
        return Err(Failure::invalid(format!("store {} has a different row count", bad.model_id())));
    }
    let plan = BatchPlan::new(stacks[0].rows(), cfg.chunk, cfg.batches, seed).context("planning batches")?;
    let cka = layerwise_cka(&stacks, &plan, cfg.mode).context("computing layerwise CKA")?;
    let d = distances_from_layerwise(&cka).context("computing distances")?;

    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), Some(seed))?;
    out.write_text("distances.csv", &format!("{}{}", out.csv_header(), d.to_csv()))?;
    let ids = cka.ids().to_vec();
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            pairs.push(json!({"a": ids[i], "b": ids[j], "per_layer_cka": cka.per_layer(i, j)}));
        }
    }
    let mut summary = json!({
        "ids": ids,
        "mode": cfg.mode,
        "chunk": cfg.chunk,
        "batches_used": cka.batches_used,
        "dataset_id": dataset,
        "pairs": pairs,
    });
    if synthetic {
        summary["label"] = json!(repsim::toy::SYNTHETIC_LABEL);
    }
    out.write_json("distances.json", &summary)?;

    if let Some(groups) = &cfg.groups {
        let pick = |names: &[String]| -> Result<Vec<LayerStack>, Failure> {
            names
                .iter()
                .map(|n| {
                    stacks
                        .iter()
                        .find(|s| s.model_id() == n)
                        .cloned()
                        .ok_or_else(|| Failure::invalid(format!("group member {n} is not among the stores")))
                })
                .collect()
        };
        let (a, b) = (pick(&groups.a)?, pick(&groups.b)?);
        let report = per_layer_divergence(&a, &b, &plan, cfg.mode).context("computing divergence")?;
        let mut v = json!({
            "comparisons": report.comparisons(),
            "report": report,
        });
        if synthetic {
            v["label"] = json!(repsim::toy::SYNTHETIC_LABEL);
        }
        out.write_json("divergence.json", &v)?;
    }
    Ok(())
}
