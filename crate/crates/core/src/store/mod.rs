//! Activation storage and the row conventions used before any kernel is
//! computed: tokens are flattened batch-major into rows, rows are chunked
//! into fixed-size blocks, and each block is mean-centered per column.

pub mod format;
mod manifest;

use ndarray::{s, Array2, Array3, Axis};

use crate::error::{Error, Result};

pub use manifest::{ActivationStore, LayerRecord, RecordHandle, StoreManifest};

/// Where a block of activations came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub model_id: String,
    pub layer_index: usize,
    pub hook_tag: String,
}

impl Provenance {
    pub fn new(model_id: impl Into<String>, layer_index: usize, hook_tag: impl Into<String>) -> Self {
        Provenance {
            model_id: model_id.into(),
            layer_index,
            hook_tag: hook_tag.into(),
        }
    }

    pub fn anonymous() -> Self {
        Provenance::new("", 0, "")
    }
}

/// Hidden activations of shape `(batch, sequence, feature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    data: Array3<f32>,
    provenance: Provenance,
}

impl ActivationTensor {
    pub fn new(data: Array3<f32>, provenance: Provenance) -> Result<Self> {
        let (b, s, f) = data.dim();
        if b == 0 || s == 0 || f == 0 {
            return Err(Error::Shape(format!("tensor dims must be >= 1, got ({b}, {s}, {f})")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "activations of {} layer {}",
                provenance.model_id, provenance.layer_index
            )));
        }
        Ok(ActivationTensor { data, provenance })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// A `(rows, feature)` matrix held in 64-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: Array2<f64>,
    provenance: Provenance,
    centered: bool,
}

impl ActivationMatrix {
    pub fn new(data: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "matrix dims must be >= 1, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation matrix".into()));
        }
        Ok(ActivationMatrix {
            data,
            provenance,
            centered: false,
        })
    }

    /// Uncentered matrix without provenance; convenient for synthetic data.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        Self::new(data, Provenance::anonymous())
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Rows `start..end` as a new uncentered matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> ActivationMatrix {
        ActivationMatrix {
            data: self.data.slice(s![start..end, ..]).to_owned(),
            provenance: self.provenance.clone(),
            centered: false,
        }
    }

    /// Multiplies every entry by `factor`, preserving the centered flag.
    pub fn scaled(&self, factor: f64) -> ActivationMatrix {
        ActivationMatrix {
            data: &self.data * factor,
            provenance: self.provenance.clone(),
            centered: self.centered,
        }
    }
}

/// Flattens `(batch, sequence, feature)` to `(batch * sequence, feature)`;
/// row `b * sequence + s` holds `tensor[b, s, :]`.
pub fn flatten_tokens(tensor: &ActivationTensor) -> ActivationMatrix {
    let (b, s, f) = tensor.dim();
    let flat = tensor
        .data
        .to_shape((b * s, f))
        .expect("contiguous reshape")
        .mapv(f64::from);
    ActivationMatrix {
        data: flat,
        provenance: tensor.provenance.clone(),
        centered: false,
    }
}

/// Result of [`chunk_rows`].
#[derive(Debug, Clone)]
pub struct Chunks {
    pub chunks: Vec<ActivationMatrix>,
    pub dropped_rows: usize,
}

/// Splits into consecutive `chunk`-row blocks; a trailing remainder shorter
/// than `chunk` is dropped and counted.
pub fn chunk_rows(m: &ActivationMatrix, chunk: usize) -> Result<Chunks> {
    if chunk < 4 {
        return Err(Error::ChunkTooSmall(chunk));
    }
    let count = m.rows() / chunk;
    let chunks = (0..count)
        .map(|i| m.slice_rows(i * chunk, (i + 1) * chunk))
        .collect();
    Ok(Chunks {
        chunks,
        dropped_rows: m.rows() - count * chunk,
    })
}

/// Subtracts the column means: `H <- H - (1/n) 1 1^T H`.
pub fn center_rows(m: &ActivationMatrix) -> ActivationMatrix {
    let n = m.rows() as f64;
    let means = m.data.sum_axis(Axis(0)) / n;
    let data = &m.data - &means.insert_axis(Axis(0));
    ActivationMatrix {
        data,
        provenance: m.provenance.clone(),
        centered: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tensor(b: usize, s: usize, f: usize) -> ActivationTensor {
        let data = Array3::from_shape_fn((b, s, f), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        ActivationTensor::new(data, Provenance::new("m", 0, "resid_post")).unwrap()
    }

    #[test]
    fn flatten_is_batch_major() {
        let m = flatten_tokens(&tensor(2, 3, 5));
        assert_eq!(m.data().dim(), (6, 5));
        for k in 0..5 {
            assert_eq!(m.data()[[4, k]], (100 + 10 + k) as f64);
        }
        assert_eq!(flatten_tokens(&tensor(1, 1, 7)).data().dim(), (1, 7));
        assert_eq!(flatten_tokens(&tensor(1, 1024, 3)).data().dim(), (1024, 3));
    }

    #[test]
    fn chunking_drops_remainder() {
        let m = ActivationMatrix::from_array(Array2::zeros((2048, 2))).unwrap();
        let c = chunk_rows(&m, 1024).unwrap();
        assert_eq!((c.chunks.len(), c.dropped_rows), (2, 0));

        let m = ActivationMatrix::from_array(Array2::zeros((1030, 2))).unwrap();
        let c = chunk_rows(&m, 1024).unwrap();
        assert_eq!((c.chunks.len(), c.dropped_rows), (1, 6));
        assert_eq!(c.chunks[0].rows(), 1024);

        assert!(matches!(chunk_rows(&m, 3), Err(Error::ChunkTooSmall(3))));
    }

    #[test]
    fn centering() {
        let m = ActivationMatrix::from_array(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let c = center_rows(&m);
        assert!(c.is_centered());
        assert_eq!(c.data(), &array![[-1.0, -1.0], [1.0, 1.0]]);

        let single = ActivationMatrix::from_array(array![[5.0, -3.0, 2.0]]).unwrap();
        assert!(center_rows(&single).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let p = Provenance::anonymous();
        assert!(ActivationTensor::new(Array3::zeros((0, 2, 2)), p.clone()).is_err());
        let mut d = Array3::zeros((1, 2, 2));
        d[[0, 1, 1]] = f32::NAN;
        assert!(matches!(ActivationTensor::new(d, p), Err(Error::NonFinite(_))));
    }
}
