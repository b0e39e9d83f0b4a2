use std::fs;

use ndarray::Array3;
use proptest::prelude::*;
use repsim::store::format::{read_record, MAGIC, VERSION};
use repsim::store::{ActivationStore, ActivationTensor, Provenance};
use repsim::Error;

fn tensor(model: &str, layer: usize, dims: (usize, usize, usize), values: &[f32]) -> ActivationTensor {
    let data = Array3::from_shape_vec(dims, values.to_vec()).unwrap();
    ActivationTensor::new(data, Provenance::new(model, layer, "resid_post")).unwrap()
}

fn dims_and_values() -> impl Strategy<Value = ((usize, usize, usize), Vec<f32>)> {
    (1usize..4, 1usize..6, 1usize..5).prop_flat_map(|(b, s, f)| {
        (Just((b, s, f)), prop::collection::vec(-1e6f32..1e6f32, b * s * f))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_survive_a_reopen(
        layers in prop::collection::vec(prop::collection::vec(dims_and_values(), 1..3), 1..4),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ActivationStore::create(dir.path(), "m", "ds").unwrap();
        let mut written = Vec::new();
        for (layer, records) in layers.iter().enumerate() {
            // every record of a layer needs the first record's width
            let width = records[0].0 .2;
            let mut mine = Vec::new();
            for ((b, s, _), values) in records {
                let n = b * s * width;
                let vals: Vec<f32> = values.iter().copied().cycle().take(n).collect();
                let t = tensor("m", layer, (*b, *s, width), &vals);
                store.write_activations(&t).unwrap();
                mine.push(t);
            }
            written.push(mine);
        }

        let reopened = ActivationStore::open(dir.path()).unwrap();
        prop_assert_eq!(reopened.layer_count(), layers.len());
        prop_assert_eq!(reopened.manifest(), store.manifest());
        for (layer, mine) in written.iter().enumerate() {
            let read: Vec<ActivationTensor> = reopened.records(layer).unwrap().map(Result::unwrap).collect();
            prop_assert_eq!(read.len(), mine.len());
            for (a, b) in read.iter().zip(mine) {
                prop_assert_eq!(a.data(), b.data());
                prop_assert_eq!(a.provenance(), b.provenance());
            }
            // flattened rows are batch-major and stacked in write order
            let m = reopened.layer_matrix(layer).unwrap();
            let mut row = 0;
            for t in mine {
                let (b, s, f) = t.dim();
                for bi in 0..b {
                    for si in 0..s {
                        for c in 0..f {
                            prop_assert_eq!(m.data()[[row, c]], f64::from(t.data()[[bi, si, c]]));
                        }
                        row += 1;
                    }
                }
            }
            prop_assert_eq!(m.rows(), row);
        }
    }
}

/// Bytes as an external writer would produce them: no `batch`/`seq` fields.
fn external_record(header: &str, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn reads_records_without_shape_hints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer.rsas");
    let header = r#"{"model":"ext","layer":2,"hook":"blocks.2.hook_resid_post","rows":3,"cols":2,"dtype":"f32"}"#;
    fs::write(&path, external_record(header, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let (h, t) = read_record(&path).unwrap();
    assert_eq!(h.tensor_dims(), (1, 3));
    assert_eq!(t.dim(), (1, 3, 2));
    assert_eq!(t.data()[[0, 2, 1]], 6.0);
    assert_eq!(t.provenance().hook_tag, "blocks.2.hook_resid_post");
}

#[test]
fn corrupt_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let header = r#"{"model":"ext","layer":0,"hook":"h","rows":2,"cols":2,"dtype":"f32"}"#;
    let good = external_record(header, &[1.0, 2.0, 3.0, 4.0]);

    let short = dir.path().join("short.rsas");
    fs::write(&short, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_record(&short), Err(Error::CorruptPayload { .. })));

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let p = dir.path().join("magic.rsas");
    fs::write(&p, bad_magic).unwrap();
    assert!(matches!(read_record(&p), Err(Error::CorruptHeader { .. })));

    let f16 = external_record(&header.replace("f32", "f16"), &[1.0, 2.0, 3.0, 4.0]);
    let p = dir.path().join("dtype.rsas");
    fs::write(&p, f16).unwrap();
    assert!(matches!(read_record(&p), Err(Error::CorruptHeader { .. })));
}

#[test]
fn width_change_within_a_layer_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ActivationStore::create(dir.path(), "m", "ds").unwrap();
    store.write_activations(&tensor("m", 0, (1, 2, 3), &[0.0; 6])).unwrap();
    let err = store.write_activations(&tensor("m", 0, (1, 2, 4), &[0.0; 8])).unwrap_err();
    assert!(matches!(err, Error::ManifestMismatch { layer: 0, expected: 3, found: 4 }));
    // a skipped layer index is refused as well
    assert!(store.write_activations(&tensor("m", 2, (1, 1, 3), &[0.0; 3])).is_err());
    assert_eq!(ActivationStore::open(dir.path()).unwrap().manifest().records.len(), 1);
}
