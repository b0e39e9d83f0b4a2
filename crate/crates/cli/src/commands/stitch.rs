use std::path::PathBuf;

use clap::Args;
use repsim::nn::{load_checkpoint, StepBatch, TinyModel, TrainRecipe};
use repsim::stitch::{stitch_sweep, sweep_csv, SweepMode};
use repsim::toy::{TaskData, TaskSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, path_value, require_path, Accepts};
use crate::failure::{Context, Failure};
use crate::output::Output;
use crate::Common;

#[derive(Debug, Args)]
pub struct Flags {
    #[arg(long)]
    model_f: Option<PathBuf>,
    #[arg(long)]
    model_g: Option<PathBuf>,
    /// Tap pairs as l:m, comma separated (default: l = m at every tap)
    #[arg(long, value_delimiter = ',')]
    pairs: Option<Vec<String>>,
    /// identity or trained
    #[arg(long)]
    connector: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Connector {
    #[default]
    Identity,
    Trained,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    model_f: PathBuf,
    model_g: PathBuf,
    #[serde(default)]
    pairs: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    connector: Connector,
    task: TaskSpec,
    #[serde(default = "default_sequences")]
    sequences: usize,
    seed: Option<u64>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    warmup_steps: Option<usize>,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default)]
    momentum: Option<f64>,
    #[serde(default, skip_serializing)]
    out: Option<PathBuf>,
}

fn default_sequences() -> usize {
    1000
}

fn parse_pairs(raw: Vec<String>) -> Result<serde_json::Value, Failure> {
    let mut pairs = Vec::new();
    for p in raw {
        let (l, m) = p
            .split_once(':')
            .ok_or_else(|| Failure::invalid(format!("pair {p:?} is not of the form l:m")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Failure::invalid(format!("pair {p:?} has a non-integer tap")))
        };
        pairs.push(json!([parse(l)?, parse(m)?]));
    }
    Ok(pairs.into())
}

fn load_model(path: &PathBuf) -> Result<TinyModel, Failure> {
    require_path(path, "checkpoint")?;
    load_checkpoint(path).map_err(|e| Failure::invalid(format!("cannot load checkpoint {}: {e}", path.display())))
}

pub fn run(common: &Common, flags: Flags) -> Result<(), Failure> {
    let pairs = flags.pairs.map(parse_pairs).transpose()?;
    let cfg: Config = config::load(
        "stitch",
        common,
        Accepts::SEED,
        vec![
            ("model_f", path_value(flags.model_f)),
            ("model_g", path_value(flags.model_g)),
            ("pairs", pairs),
            ("connector", flags.connector.map(Into::into)),
        ],
    )?;
    let seed = config::require_seed("stitch", cfg.seed)?;
    let f = load_model(&cfg.model_f)?;
    let g = load_model(&cfg.model_g)?;
    for (name, m) in [("f", &f), ("g", &g)] {
        if m.vocab() != cfg.task.vocab {
            return Err(Failure::invalid(format!(
                "model {name} has vocab {}, task has {}",
                m.vocab(),
                cfg.task.vocab
            )));
        }
    }
    let pairs = cfg
        .pairs
        .clone()
        .unwrap_or_else(|| (0..=f.depth().min(g.depth())).map(|t| (t, t)).collect());
    if pairs.is_empty() {
        return Err(Failure::invalid("no tap pairs to stitch"));
    }
    let mode = match cfg.connector {
        Connector::Identity => {
            if f.width() != g.width() {
                return Err(Failure::invalid(format!(
                    "identity stitching needs equal widths, got {} and {}",
                    f.width(),
                    g.width()
                )));
            }
            SweepMode::Identity
        }
        Connector::Trained => {
            let mut recipe = TrainRecipe::stitching(seed);
            recipe.steps = cfg.steps.unwrap_or(recipe.steps);
            recipe.warmup_steps = cfg.warmup_steps.unwrap_or(recipe.warmup_steps.min(recipe.steps));
            recipe.learning_rate = cfg.learning_rate.unwrap_or(recipe.learning_rate);
            recipe.momentum = cfg.momentum.unwrap_or(recipe.momentum);
            recipe.validate().context("stitching recipe")?;
            SweepMode::Trained { recipe }
        }
    };

    let data = TaskData::generate(&cfg.task, cfg.sequences, seed).context("generating task data")?;
    let map = cfg.task.target_map();
    let batches = data.batches(&map, cfg.task.batch_size, seed);
    let tokens = data.eval_tokens();
    let eval = StepBatch {
        targets: map.apply(&tokens),
        tokens,
    };

    let out = Output::create(config::out_dir(common, cfg.out.clone()), config::config_hash(&cfg), Some(seed))?;
    let directions: [(&str, &TinyModel, &TinyModel); 4] = [("f_g", &f, &g), ("g_f", &g, &f), ("f_f", &f, &f), ("g_g", &g, &g)];
    let mut csv = out.csv_header();
    let mut summary = Vec::new();
    let mut failures = 0;
    for (i, (name, src, dst)) in directions.iter().enumerate() {
        let entries = stitch_sweep(src, dst, &pairs, &mode, &batches, &eval);
        let table = sweep_csv(&mode, &entries);
        let mut lines = table.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            csv.push_str(&format!("direction,{header}\n"));
        }
        for line in lines {
            csv.push_str(&format!("{name},{line}\n"));
        }
        for e in &entries {
            failures += usize::from(e.error.is_some());
            out.write_json(&format!("stitch/{name}_l{}_m{}.json", e.l, e.m), &json!({
                "direction": name,
                "mode": mode,
                "entry": e,
            }))?;
        }
        summary.push(json!({
            "direction": name,
            "pairs": entries.len(),
            "failures": entries.iter().filter(|e| e.error.is_some()).count(),
            "penalties": entries.iter().map(|e| e.report.as_ref().map(|r| r.penalty)).collect::<Vec<_>>(),
        }));
    }
    out.write_text("stitch.csv", &csv)?;
    out.write_json("stitch.json", &json!({
        "mode": mode,
        "model_f": cfg.model_f,
        "model_g": cfg.model_g,
        "pairs": pairs,
        "task": cfg.task,
        "directions": summary,
        "failures": failures,
    }))?;
    if failures > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{failures} stitch pair(s) failed; see stitch.csv"
        )));
    }
    Ok(())
}
