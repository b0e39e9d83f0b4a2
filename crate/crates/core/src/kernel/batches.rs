use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LayerBatch;
use crate::error::{Error, Result};
use crate::store::{center_rows, ActivationMatrix, ActivationStore};

/// Which row-chunks to use as batches, in delivery order.
///
/// The available chunks are shuffled with a seeded generator and the first
/// `batches` of them are kept. Two stores sampled with the same plan see the
/// same token rows in every batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub chunk: usize,
    pub seed: u64,
    pub total_rows: usize,
    pub dropped_rows: usize,
    pub chunk_indices: Vec<usize>,
}

impl BatchPlan {
    /// `batches = None` uses every available chunk. Requests for more
    /// batches than there are chunks are capped at the chunk count.
    pub fn new(total_rows: usize, chunk: usize, batches: Option<usize>, seed: u64) -> Result<Self> {
        if chunk < 4 {
            return Err(Error::ChunkTooSmall(chunk));
        }
        let available = total_rows / chunk;
        if available == 0 {
            return Err(Error::Shape(format!(
                "{total_rows} rows cannot fill a single chunk of {chunk}"
            )));
        }
        let mut chunk_indices: Vec<usize> = (0..available).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chunk_indices.shuffle(&mut rng);
        chunk_indices.truncate(batches.unwrap_or(available).min(available));
        if chunk_indices.is_empty() {
            return Err(Error::Config("at least one batch is required".into()));
        }
        Ok(BatchPlan {
            chunk,
            seed,
            total_rows,
            dropped_rows: total_rows - available * chunk,
            chunk_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.chunk_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_indices.is_empty()
    }
}

/// Every layer of one model, flattened to rows, held in memory.
#[derive(Debug, Clone)]
pub struct LayerStack {
    model_id: String,
    layers: Vec<ActivationMatrix>,
}

impl LayerStack {
    pub fn new(model_id: impl Into<String>, layers: Vec<ActivationMatrix>) -> Result<Self> {
        let rows = layers
            .first()
            .map(|m| m.rows())
            .ok_or_else(|| Error::Shape("a layer stack needs at least one layer".into()))?;
        if let Some((i, m)) = layers.iter().enumerate().find(|(_, m)| m.rows() != rows) {
            return Err(Error::Shape(format!(
                "layer {i} has {} rows, layer 0 has {rows}",
                m.rows()
            )));
        }
        Ok(LayerStack {
            model_id: model_id.into(),
            layers,
        })
    }

    pub fn from_store(store: &ActivationStore) -> Result<Self> {
        let layers = (0..store.layer_count())
            .map(|l| store.layer_matrix(l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(store.model_id(), layers)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn rows(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn layers(&self) -> &[ActivationMatrix] {
        &self.layers
    }

    /// Centered chunk `chunk_index` of every layer.
    pub fn batch(&self, plan: &BatchPlan, chunk_index: usize) -> Result<LayerBatch> {
        if plan.total_rows != self.rows() {
            return Err(Error::RowMismatch(plan.total_rows, self.rows()));
        }
        let start = chunk_index * plan.chunk;
        Ok(self
            .layers
            .iter()
            .map(|m| center_rows(&m.slice_rows(start, start + plan.chunk)))
            .collect())
    }

    /// Batches in plan order.
    pub fn stream<'a>(&'a self, plan: &'a BatchPlan) -> impl Iterator<Item = Result<LayerBatch>> + 'a {
        plan.chunk_indices.iter().map(move |&c| self.batch(plan, c))
    }
}
