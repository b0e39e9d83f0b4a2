use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use super::format;
use super::{flatten_tokens, ActivationMatrix, ActivationTensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub batch: usize,
    pub seq: usize,
    pub hook: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dataset_id: String,
    pub model_id: String,
    pub layer_count: usize,
    pub records: Vec<LayerRecord>,
    /// Free-form creation metadata (tool version, config hash, seed).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl StoreManifest {
    fn new(model_id: &str, dataset_id: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(
            "created_by".to_string(),
            concat!("repsim ", env!("CARGO_PKG_VERSION")).to_string(),
        );
        StoreManifest {
            dataset_id: dataset_id.to_string(),
            model_id: model_id.to_string(),
            layer_count: 0,
            records: Vec::new(),
            metadata,
        }
    }

    pub fn layer_records(&self, layer: usize) -> impl Iterator<Item = &LayerRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }

    fn validate(&self) -> Result<()> {
        for layer in 0..self.layer_count {
            if self.layer_records(layer).next().is_none() {
                return Err(Error::Config(format!(
                    "manifest layer {layer} has no records (layers must be contiguous)"
                )));
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.layer >= self.layer_count) {
            return Err(Error::Config(format!(
                "record {} names layer {} beyond layer_count {}",
                r.file, r.layer, self.layer_count
            )));
        }
        Ok(())
    }
}

/// Location of a persisted record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHandle {
    pub layer: usize,
    pub index: usize,
    pub path: PathBuf,
}

/// A directory of per-layer record files plus `manifest.json`.
///
/// Readers may be shared freely. Writes hold an exclusive lock file for the
/// duration of the record write and manifest swap; the manifest is replaced
/// by write-to-temp-then-rename.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    root: PathBuf,
    manifest: StoreManifest,
}

struct StoreLock(PathBuf);

impl StoreLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(StoreLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(root.to_path_buf()))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn read_manifest(root: &Path) -> Result<StoreManifest> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: StoreManifest = serde_json::from_slice(&bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

fn write_manifest(root: &Path, manifest: &StoreManifest) -> Result<()> {
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    let dest = root.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
}

impl ActivationStore {
    /// Opens the store at `root`, creating the directory and an empty
    /// manifest if none exists.
    pub fn create(root: impl AsRef<Path>, model_id: &str, dataset_id: &str) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        if root.join(MANIFEST_FILE).exists() {
            let store = Self::open(&root)?;
            if store.manifest.model_id != model_id {
                return Err(Error::Config(format!(
                    "store {} belongs to model {}, not {model_id}",
                    root.display(),
                    store.manifest.model_id
                )));
            }
            return Ok(store);
        }
        let manifest = StoreManifest::new(model_id, dataset_id);
        {
            let _lock = StoreLock::acquire(&root)?;
            write_manifest(&root, &manifest)?;
        }
        Ok(ActivationStore { root, manifest })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root)?;
        Ok(ActivationStore { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    pub fn layer_count(&self) -> usize {
        self.manifest.layer_count
    }

    /// Adds or replaces a metadata entry and persists the manifest.
    pub fn set_metadata(&mut self, key: &str, value: &str) -> Result<()> {
        let _lock = StoreLock::acquire(&self.root)?;
        let mut manifest = read_manifest(&self.root)?;
        manifest.metadata.insert(key.to_string(), value.to_string());
        write_manifest(&self.root, &manifest)?;
        self.manifest = manifest;
        Ok(())
    }

    /// Appends a record for `tensor`'s layer. A layer may hold several
    /// records (one per batch) as long as every record has the same width.
    pub fn write_activations(&mut self, tensor: &ActivationTensor) -> Result<RecordHandle> {
        let _lock = StoreLock::acquire(&self.root)?;
        let mut manifest = read_manifest(&self.root)?;
        let p = tensor.provenance();
        if p.model_id != manifest.model_id {
            return Err(Error::Config(format!(
                "tensor model {} does not match store model {}",
                p.model_id, manifest.model_id
            )));
        }
        let layer = p.layer_index;
        if layer > manifest.layer_count {
            return Err(Error::Config(format!(
                "layer {layer} would leave a gap after layer {}",
                manifest.layer_count as isize - 1
            )));
        }
        let (b, s, f) = tensor.dim();
        if let Some(existing) = manifest.layer_records(layer).next() {
            if existing.cols != f {
                return Err(Error::ManifestMismatch {
                    layer,
                    expected: existing.cols,
                    found: f,
                });
            }
        }
        let index = manifest.layer_records(layer).count();
        let file = format!("layer{layer:04}_{index:05}.rsas");
        let path = self.root.join(&file);
        let tmp = self.root.join(format!("{file}.tmp"));
        format::write_record(&tmp, tensor)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

        manifest.records.push(LayerRecord {
            layer,
            file,
            rows: b * s,
            cols: f,
            dtype: format::DTYPE_F32.to_string(),
            batch: b,
            seq: s,
            hook: p.hook_tag.clone(),
        });
        manifest.layer_count = manifest.layer_count.max(layer + 1);
        write_manifest(&self.root, &manifest)?;
        self.manifest = manifest;
        Ok(RecordHandle { layer, index, path })
    }

    /// Lazily reads each record of `layer` in write order.
    pub fn records(
        &self,
        layer: usize,
    ) -> Result<impl Iterator<Item = Result<ActivationTensor>> + '_> {
        if layer >= self.manifest.layer_count {
            return Err(Error::MissingLayer(layer));
        }
        Ok(self.manifest.layer_records(layer).map(move |rec| {
            let path = self.root.join(&rec.file);
            let (header, tensor) = format::read_record(&path)?;
            if header.rows != rec.rows || header.cols != rec.cols || header.layer != layer {
                return Err(Error::CorruptHeader {
                    path,
                    reason: format!(
                        "header ({} x {}, layer {}) disagrees with manifest ({} x {}, layer {layer})",
                        header.rows, header.cols, header.layer, rec.rows, rec.cols
                    ),
                });
            }
            Ok(tensor)
        }))
    }

    /// All records of `layer` concatenated along the batch axis.
    pub fn read_activations(&self, layer: usize) -> Result<ActivationTensor> {
        let tensors = self.records(layer)?.collect::<Result<Vec<_>>>()?;
        if tensors.len() == 1 {
            return Ok(tensors.into_iter().next().expect("one record"));
        }
        let seq = tensors[0].dim().1;
        if tensors.iter().any(|t| t.dim().1 != seq) {
            return Err(Error::Shape(format!(
                "layer {layer} records have differing sequence lengths; use layer_matrix"
            )));
        }
        let views: Vec<_> = tensors.iter().map(|t| t.data().view()).collect();
        let data = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        ActivationTensor::new(data, tensors[0].provenance().clone())
    }

    /// Every record of `layer`, flattened and stacked in write order.
    pub fn layer_matrix(&self, layer: usize) -> Result<ActivationMatrix> {
        let mats = self
            .records(layer)?
            .map(|t| t.map(|t| flatten_tokens(&t)))
            .collect::<Result<Vec<_>>>()?;
        let provenance = mats[0].provenance().clone();
        let views: Vec<_> = mats.iter().map(|m| m.data().view()).collect();
        let data = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        ActivationMatrix::new(data, provenance)
    }
}
