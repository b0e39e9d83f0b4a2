use std::path::PathBuf;

use clap::Args;
use repsim::nn::{save_checkpoint, ModelConfig, TinyModel};
use repsim::toy::{
    export_residuals, probe_sequences, train_population, train_toy_model, PopulationSpec, TaskSpec, SYNTHETIC_LABEL,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, Accepts};
use crate::failure::{io, Context, Failure};
use crate::output::Output;
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    /// Model id for a single toy model
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationOptions {
    members_per_group: usize,
    frozen_blocks: usize,
    finetune_steps: usize,
    #[serde(default = "default_merge")]
    merge_group: usize,
}

fn default_merge() -> usize {
    2
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    model: ModelConfig,
    task: TaskSpec,
    seed: Option<u64>,
    #[serde(default = "default_id")]
    id: String,
    /// Sequences run through each model for the exported stores.
    #[serde(default = "default_export")]
    export_sequences: usize,
    #[serde(default)]
    population: Option<PopulationOptions>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

fn default_id() -> String {
    "toy".into()
}

fn default_export() -> usize {
    128
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let cfg: Config = config::load("toy", common, Accepts::SEED, vec![("id", flags.id.map(Into::into))])?;
    let seed = config::require_seed("toy", cfg.seed)?;
    cfg.model.validate().context("model config")?;
    cfg.task.validate().context("task config")?;
    if cfg.model.vocab != cfg.task.vocab {
        return Err(Failure::invalid(format!(
            "model vocab {} differs from task vocab {}",
            cfg.model.vocab, cfg.task.vocab
        )));
    }

    let mut models: Vec<(String, Option<String>, TinyModel)> = Vec::new();
    let synthetic = cfg.population.is_some();
    match &cfg.population {
        None => {
            let model = train_toy_model(&cfg.model, &cfg.task, seed).context("training toy model")?;
            models.push((cfg.id.clone(), None, model));
        }
        Some(p) => {
            let spec = PopulationSpec {
                model: cfg.model.clone(),
                task: cfg.task.clone(),
                seed,
                members_per_group: p.members_per_group,
                frozen_blocks: p.frozen_blocks,
                finetune_steps: p.finetune_steps,
                merge_group: p.merge_group,
            };
            let pop = train_population(&spec).context("training population")?;
            models.push(("base".into(), None, pop.base));
            for m in pop.members {
                models.push((m.id, Some(m.group), m.model));
            }
        }
    }

    let hash = config::config_hash(&cfg);
    let out = Output::create(config::out_dir(common, cfg.out.clone()), hash.clone(), Some(seed))?;
    // export tokens depend only on the task and seed, so every store aligns
    let tokens = probe_sequences(&cfg.task, cfg.export_sequences, seed ^ 0x5eed).context("export tokens")?;
    let dataset_id = format!(
        "toy-v{}-len{}-perm{}-n{}-s{}",
        cfg.task.vocab, cfg.task.seq_len, cfg.task.permutation_seed, cfg.export_sequences, seed
    );
    let mut entries = Vec::new();
    for (id, group, model) in &models {
        let ckpt = format!("models/{id}.rsck");
        io(std::fs::create_dir_all(out.path("models")), "creating models directory")?;
        save_checkpoint(model, &out.path(&ckpt)).context(format!("saving {ckpt}"))?;
        let store_rel = format!("stores/{id}");
        let store_dir = out.path(&store_rel);
        if store_dir.join("manifest.json").exists() {
            io(std::fs::remove_dir_all(&store_dir), format!("replacing {}", store_dir.display()))?;
        }
        let mut store =
            export_residuals(model, id, &tokens, &store_dir, &dataset_id).context(format!("exporting {id}"))?;
        store.set_metadata("config_hash", &hash).context("store metadata")?;
        store.set_metadata("seed", &seed.to_string()).context("store metadata")?;
        if synthetic {
            store.set_metadata("label", SYNTHETIC_LABEL).context("store metadata")?;
        }
        let mut e = json!({
            "id": id,
            "checkpoint": ckpt,
            "store": store_rel,
            "model_seed": model.seed,
            "final_train_loss": model.final_train_loss,
        });
        if let Some(g) = group {
            e["group"] = Value::from(g.as_str());
        }
        entries.push(e);
    }
    let mut summary = json!({
        "dataset_id": dataset_id,
        "taps": cfg.model.depth + 1,
        "models": entries,
    });
    if synthetic {
        summary["label"] = json!(SYNTHETIC_LABEL);
    }
    out.write_json("toy.json", &summary)?;
    Ok(())
}
