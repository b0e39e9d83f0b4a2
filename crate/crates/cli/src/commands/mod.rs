pub mod blocks;
pub mod cka;
pub mod cluster;
pub mod distances;
pub mod heatmap;
pub mod stitch;
pub mod toy;

use std::path::Path;

use repsim::kernel::LayerStack;
use repsim::store::ActivationStore;

use crate::config::require_path;
use crate::failure::{Context, Failure};

pub const DEFAULT_CHUNK: usize = 64;

pub fn open_stack(path: &Path) -> Result<(ActivationStore, LayerStack), Failure> {
    require_path(path, "store")?;
    let store = ActivationStore::open(path).context(format!("opening store {}", path.display()))?;
    let stack = LayerStack::from_store(&store).context(format!("reading store {}", path.display()))?;
    Ok((store, stack))
}

/// `true` when the store was produced by the synthetic population recipe.
pub fn is_synthetic(store: &ActivationStore) -> bool {
    store.manifest().metadata.get("label").map(String::as_str) == Some(repsim::toy::SYNTHETIC_LABEL)
}
