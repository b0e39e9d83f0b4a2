use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{tail_mean, toy_recipe, TargetMap, TaskData, TaskSpec, DEFAULT_SEQUENCES};
use crate::error::{Error, Result};
use crate::nn::{train_masked, ModelConfig, TinyModel, TrainableMask};
use crate::store::{ActivationStore, ActivationTensor, Provenance};

/// Marker attached to population outputs; the divergence is constructed.
pub const SYNTHETIC_LABEL: &str = "synthetic";

/// One base model forked into two fine-tuned groups.
///
/// Every member starts from the base and trains only blocks
/// `frozen_blocks..`. Group A keeps the base task, group B trains on the
/// base task with targets merged in runs of `merge_group` tokens. Members
/// differ only in the seed of their batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub seed: u64,
    pub members_per_group: usize,
    pub frozen_blocks: usize,
    pub finetune_steps: usize,
    pub merge_group: usize,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.vocab != self.task.vocab {
            return Err(Error::Config("model and task vocab differ".into()));
        }
        if self.frozen_blocks >= self.model.depth {
            return Err(Error::Config(format!(
                "frozen_blocks {} leaves nothing to fine-tune at depth {}",
                self.frozen_blocks, self.model.depth
            )));
        }
        if self.members_per_group == 0 {
            return Err(Error::Config("members_per_group must be positive".into()));
        }
        if self.merge_group < 2 {
            return Err(Error::Config("merge_group must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMember {
    pub id: String,
    /// `"A"` or `"B"`.
    pub group: String,
    pub seed: u64,
    pub targets: TargetMap,
    pub model: TinyModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub base: TinyModel,
    pub members: Vec<PopulationMember>,
    pub data: TaskData,
}

impl Population {
    pub fn group(&self, name: &str) -> impl Iterator<Item = &PopulationMember> {
        let name = name.to_string();
        self.members.iter().filter(move |m| m.group == name)
    }
}

pub fn train_population(spec: &PopulationSpec) -> Result<Population> {
    spec.validate()?;
    let data = TaskData::generate(&spec.task, DEFAULT_SEQUENCES, spec.seed)?;
    let base_map = spec.task.target_map();
    let mut base = TinyModel::new(spec.model.clone(), spec.seed)?;
    let all = TrainableMask::all(&base);
    let curve = train_masked(
        &mut base,
        &all,
        &toy_recipe(&spec.task, spec.seed),
        data.batches(&base_map, spec.task.batch_size, spec.seed),
    )?;
    base.final_train_loss = tail_mean(&curve);

    let mask = TrainableMask::blocks_from(&base, spec.frozen_blocks);
    let mut tune_task = spec.task.clone();
    tune_task.train_steps = spec.finetune_steps;
    let mut members = Vec::new();
    for (group, map) in [("A", base_map.clone()), ("B", base_map.merged(spec.merge_group))] {
        for i in 0..spec.members_per_group {
            let seed = spec
                .seed
                .wrapping_add(1 + i as u64)
                .wrapping_add(if group == "B" { 1000 } else { 0 });
            let mut model = base.clone();
            model.seed = seed;
            let curve = train_masked(
                &mut model,
                &mask,
                &toy_recipe(&tune_task, seed),
                data.batches(&map, spec.task.batch_size, seed),
            )?;
            model.final_train_loss = tail_mean(&curve);
            members.push(PopulationMember {
                id: format!("{group}{i}"),
                group: group.to_string(),
                seed,
                targets: map.clone(),
                model,
            });
        }
    }
    Ok(Population { base, members, data })
}

/// Writes the residual stream at every tap `0..=depth` for `tokens` as
/// `resid_post` records, one per layer.
pub fn export_residuals(
    model: &TinyModel,
    model_id: &str,
    tokens: &Array2<usize>,
    root: &Path,
    dataset_id: &str,
) -> Result<ActivationStore> {
    let mut store = ActivationStore::create(root, model_id, dataset_id)?;
    for tap in 0..=model.depth() {
        let r = model.forward_prefix(tap, tokens.view())?;
        let tensor = ActivationTensor::new(r.mapv(|v| v as f32), Provenance::new(model_id, tap, "resid_post"))?;
        store.write_activations(&tensor)?;
    }
    Ok(store)
}
