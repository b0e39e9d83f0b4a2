//! Per-layer record file layout.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RSAS"
//! 4       1     version (0x01)
//! 5       4     header length H, u32 little-endian
//! 9       H     UTF-8 JSON header
//! 9+H     4*R*C row-major f32 little-endian payload
//! ```
//!
//! The header carries `model`, `layer`, `hook`, `rows`, `cols` and `dtype`
//! (always `"f32"`). `batch` and `seq` record the tensor shape the rows were
//! flattened from; readers treat a header without them as `(1, rows, cols)`.
//! `row_mask` is reserved and never written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{ActivationTensor, Provenance};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSAS";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub model: String,
    pub layer: usize,
    pub hook: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_mask: Option<Vec<bool>>,
}

impl RecordHeader {
    pub fn for_tensor(tensor: &ActivationTensor) -> Self {
        let (b, s, f) = tensor.data().dim();
        let p = tensor.provenance();
        RecordHeader {
            model: p.model_id.clone(),
            layer: p.layer_index,
            hook: p.hook_tag.clone(),
            rows: b * s,
            cols: f,
            dtype: DTYPE_F32.to_string(),
            batch: Some(b),
            seq: Some(s),
            row_mask: None,
        }
    }

    /// `(batch, seq)` implied by the header.
    pub fn tensor_dims(&self) -> (usize, usize) {
        match (self.batch, self.seq) {
            (Some(b), Some(s)) => (b, s),
            (None, Some(s)) if s > 0 => (self.rows / s, s),
            (Some(b), None) if b > 0 => (b, self.rows / b),
            _ => (1, self.rows),
        }
    }
}

/// Encodes a tensor into the on-disk byte layout.
pub fn encode(tensor: &ActivationTensor) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&RecordHeader::for_tensor(tensor))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Shape("record header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(9 + header.len() + tensor.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in tensor.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_record(path: &Path, tensor: &ActivationTensor) -> Result<()> {
    let bytes = encode(tensor)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    w.get_ref().sync_all().map_err(|e| Error::io(path, e))
}

/// Reads only the header, leaving the reader positioned at the payload.
pub fn read_header<R: Read>(path: &Path, r: &mut R) -> Result<RecordHeader> {
    let corrupt = |reason: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut prefix = [0u8; 9];
    r.read_exact(&mut prefix)
        .map_err(|_| corrupt("file shorter than fixed prefix"))?;
    if &prefix[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if prefix[4] != VERSION {
        return Err(corrupt(&format!("unsupported version {}", prefix[4])));
    }
    let len = u32::from_le_bytes([prefix[5], prefix[6], prefix[7], prefix[8]]) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| corrupt("truncated header"))?;
    let header: RecordHeader =
        serde_json::from_slice(&buf).map_err(|e| corrupt(&format!("header json: {e}")))?;
    if header.dtype != DTYPE_F32 {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    let (b, s) = header.tensor_dims();
    if header.rows == 0 || header.cols == 0 || b * s != header.rows {
        return Err(corrupt("inconsistent shape fields"));
    }
    Ok(header)
}

pub fn read_record(path: &Path) -> Result<(RecordHeader, ActivationTensor)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(path, &mut r)?;
    let expected = header.rows * header.cols * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(Error::CorruptPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let (b, s) = header.tensor_dims();
    let data = Array3::from_shape_vec((b, s, header.cols), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let tensor = ActivationTensor::new(
        data,
        Provenance::new(header.model.clone(), header.layer, header.hook.clone()),
    )?;
    Ok((header, tensor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor() -> ActivationTensor {
        let data = Array3::from_shape_fn((1, 2, 3), |(_, s, f)| (s * 3 + f) as f32 - 2.5);
        ActivationTensor::new(data, Provenance::new("m", 0, "resid_post")).unwrap()
    }

    #[test]
    fn byte_layout() {
        let bytes = encode(&tensor()).unwrap();
        assert_eq!(&bytes[0..4], b"RSAS");
        assert_eq!(bytes[4], 0x01);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + len]).unwrap();
        assert_eq!(
            header,
            r#"{"model":"m","layer":0,"hook":"resid_post","rows":2,"cols":3,"dtype":"f32","batch":1,"seq":2}"#
        );
        assert_eq!(bytes.len(), 9 + len + 2 * 3 * 4);
        assert_eq!(&bytes[9 + len..9 + len + 4], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn header_without_shape_fields_reads_as_single_batch() {
        let json = br#"{"model":"x","layer":3,"hook":"h","rows":5,"cols":2,"dtype":"f32"}"#;
        let mut bytes = b"RSAS\x01".to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(json);
        let header = read_header(Path::new("mem"), &mut bytes.as_slice()).unwrap();
        assert_eq!(header.tensor_dims(), (1, 5));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode(&tensor()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            read_header(Path::new("mem"), &mut bytes.as_slice()),
            Err(Error::CorruptHeader { .. })
        ));
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(matches!(
            read_header(Path::new("mem"), &mut bytes.as_slice()),
            Err(Error::CorruptHeader { .. })
        ));
    }
}
