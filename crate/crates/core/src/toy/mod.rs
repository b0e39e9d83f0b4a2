//! Synthetic permutation-copy task and toy model training.
//!
//! Sequences are i.i.d. uniform tokens; the target at each position is a
//! fixed seeded permutation of the token there. An attention-free network
//! can solve it token by token.

mod population;

pub use population::{
    export_residuals, train_population, Population, PopulationMember, PopulationSpec, SYNTHETIC_LABEL,
};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{train_masked, LossKind, ModelConfig, StepBatch, TinyModel, TrainRecipe, TrainableMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab: usize,
    pub seq_len: usize,
    pub permutation_seed: u64,
    pub train_steps: usize,
    pub batch_size: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "task needs vocab >= 2, seq_len >= 1 and batch_size >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.vocab).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.permutation_seed));
        perm
    }

    pub fn target_map(&self) -> TargetMap {
        TargetMap(self.permutation())
    }
}

/// Token-to-target lookup table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMap(pub Vec<usize>);

impl TargetMap {
    /// Collapses each run of `group` consecutive token ids onto the target of
    /// its first member, so `group` inputs share one target.
    pub fn merged(&self, group: usize) -> TargetMap {
        let g = group.max(1);
        TargetMap((0..self.0.len()).map(|x| self.0[x - x % g]).collect())
    }

    pub fn apply(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.0[t]).collect()
    }
}

/// Generated sequences with a fixed 90/10 train/eval split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskData {
    pub vocab: usize,
    pub train: Array2<usize>,
    pub eval: Array2<usize>,
}

impl TaskData {
    /// `sequences` random sequences of `spec.seq_len` tokens, shuffled and split
    /// so that the last tenth (at least one) is held out.
    pub fn generate(spec: &TaskSpec, sequences: usize, seed: u64) -> Result<TaskData> {
        spec.validate()?;
        if sequences < 2 {
            return Err(Error::Config("need at least two sequences to split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = Array2::from_shape_simple_fn((sequences, spec.seq_len), || rng.random_range(0..spec.vocab));
        let mut order: Vec<usize> = (0..sequences).collect();
        order.shuffle(&mut rng);
        let n_eval = (sequences / 10).max(1);
        let pick = |idx: &[usize]| {
            Array2::from_shape_fn((idx.len(), spec.seq_len), |(i, j)| all[[idx[i], j]])
        };
        Ok(TaskData {
            vocab: spec.vocab,
            train: pick(&order[..sequences - n_eval]),
            eval: pick(&order[sequences - n_eval..]),
        })
    }

    pub fn eval_tokens(&self) -> Vec<usize> {
        self.eval.iter().copied().collect()
    }

    /// Deterministic batch source: at step `i` draws `batch_size` training
    /// sequences with a generator seeded from `(seed, i)`.
    pub fn batches<'a>(
        &'a self,
        map: &'a TargetMap,
        batch_size: usize,
        seed: u64,
    ) -> impl Fn(usize) -> StepBatch + Sync + 'a {
        move |step| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step as u64);
            let mut tokens = Vec::with_capacity(batch_size * self.train.ncols());
            for _ in 0..batch_size {
                let row = rng.random_range(0..self.train.nrows());
                tokens.extend(self.train.row(row).iter().copied());
            }
            let targets = map.apply(&tokens);
            StepBatch { tokens, targets }
        }
    }
}

/// `count` uniform random sequences used for activation export.
pub fn probe_sequences(spec: &TaskSpec, count: usize, seed: u64) -> Result<Array2<usize>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("probe sequence count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_simple_fn((count, spec.seq_len), || rng.random_range(0..spec.vocab)))
}

/// Optimizer settings for toy-model training: linear warmup over the first
/// tenth of the run, then constant.
pub fn toy_recipe(task: &TaskSpec, seed: u64) -> TrainRecipe {
    TrainRecipe {
        steps: task.train_steps,
        warmup_steps: task.train_steps / 10,
        learning_rate: 0.2,
        momentum: 0.9,
        nesterov: true,
        seed,
        loss: LossKind::CrossEntropy,
    }
}

/// Sequences generated for toy training when no other count is given.
pub const DEFAULT_SEQUENCES: usize = 1000;

/// Trains a freshly initialised model on the permutation-copy task.
/// The mean training loss of the last tenth of steps is recorded on the model.
pub fn train_toy_model(config: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<TinyModel> {
    if config.vocab != task.vocab {
        return Err(Error::Config(format!(
            "model vocab {} differs from task vocab {}",
            config.vocab, task.vocab
        )));
    }
    let data = TaskData::generate(task, DEFAULT_SEQUENCES, seed)?;
    let mut model = TinyModel::new(config.clone(), seed)?;
    let map = task.target_map();
    let mask = TrainableMask::all(&model);
    let curve = train_masked(&mut model, &mask, &toy_recipe(task, seed), data.batches(&map, task.batch_size, seed))?;
    model.final_train_loss = tail_mean(&curve);
    Ok(model)
}

pub(crate) fn tail_mean(curve: &[f64]) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len() - (curve.len() / 10).max(1)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}
