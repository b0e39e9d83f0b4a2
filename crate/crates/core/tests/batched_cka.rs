use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use repsim::kernel::{
    cka_batched, format_cka_csv, parse_cka_csv, BatchHsic, BatchPlan, CkaMode, HsicAccumulator, LayerStack,
};
use repsim::metric::layerwise_cka;
use repsim::store::{ActivationMatrix, Provenance};
use repsim::Error;

fn stack(id: &str, rows: usize, widths: &[usize], seed: u64) -> LayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = Array2::from_shape_simple_fn((rows, 3), || rng.sample::<f64, _>(StandardNormal));
    let layers = widths
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            let mix = Array2::from_shape_simple_fn((3, w), || rng.sample::<f64, _>(StandardNormal));
            let noise = Array2::from_shape_simple_fn((rows, w), || rng.sample::<f64, _>(StandardNormal));
            ActivationMatrix::new(shared.dot(&mix) + noise, Provenance::new(id, l, "test")).unwrap()
        })
        .collect();
    LayerStack::new(id, layers).unwrap()
}

/// Unbiased HSIC written directly from the sum over distinct index tuples.
fn hsic_by_tuples(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let k = x.dot(&x.t());
    let l = y.dot(&y.t());
    let (mut pairs, mut triples, mut quads_k, mut quads_l) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            pairs += k[[i, j]] * l[[i, j]];
            quads_k += k[[i, j]];
            quads_l += l[[i, j]];
            for q in 0..n {
                if q != i && q != j {
                    triples += k[[i, j]] * l[[j, q]];
                }
            }
        }
    }
    let nf = n as f64;
    // sum over distinct (i,j,q,r) of K_ij L_qr, by inclusion-exclusion
    let quads = quads_k * quads_l - 4.0 * triples - 2.0 * pairs;
    pairs / (nf * (nf - 1.0)) + quads / (nf * (nf - 1.0) * (nf - 2.0) * (nf - 3.0))
        - 2.0 * triples / (nf * (nf - 1.0) * (nf - 2.0))
}

#[test]
fn batched_scores_match_per_chunk_oracle() {
    let a = stack("a", 96, &[3, 5], 1);
    let b = stack("b", 96, &[4], 2);
    let plan = BatchPlan::new(96, 12, Some(5), 3).unwrap();
    let std = cka_batched(a.stream(&plan), b.stream(&plan), CkaMode::Standard).unwrap();
    let paper = cka_batched(a.stream(&plan), b.stream(&plan), CkaMode::PaperLiteral).unwrap();
    assert_eq!(std.batches_used, 5);
    assert_eq!(std.shape(), (2, 1));
    for la in 0..2 {
        let (mut cross, mut sa, mut sb, mut ratio) = (0.0, 0.0, 0.0, 0.0);
        for batch in a.stream(&plan).zip(b.stream(&plan)) {
            let (ba, bb) = (batch.0.unwrap(), batch.1.unwrap());
            let (x, y) = (ba[la].data(), bb[0].data());
            let (c, s1, s2) = (hsic_by_tuples(x, y), hsic_by_tuples(x, x), hsic_by_tuples(y, y));
            cross += c;
            sa += s1;
            sb += s2;
            ratio += c / (s1 * s2);
        }
        assert!((std.data[[la, 0]] - cross / (sa * sb).sqrt()).abs() < 1e-12);
        assert!((paper.data[[la, 0]] - ratio / 5.0).abs() < 1e-12);
    }
}

#[test]
fn population_path_agrees_with_pairwise_path() {
    let models: Vec<LayerStack> = (0..4).map(|i| stack(&format!("m{i}"), 128, &[4, 4, 6], 10 + i)).collect();
    let plan = BatchPlan::new(128, 16, None, 4).unwrap();
    for mode in [CkaMode::Standard, CkaMode::PaperLiteral] {
        let pop = layerwise_cka(&models, &plan, mode).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let m = cka_batched(models[i].stream(&plan), models[j].stream(&plan), mode).unwrap();
                for (l, v) in pop.per_layer(i, j).iter().enumerate() {
                    assert!((v - m.data[[l, l]]).abs() < 1e-12, "{mode:?} {i} {j} {l}");
                }
            }
        }
    }
}

#[test]
fn plans_are_seeded_and_capped() {
    let p = BatchPlan::new(1000, 8, Some(50), 7).unwrap();
    assert_eq!(p, BatchPlan::new(1000, 8, Some(50), 7).unwrap());
    assert_ne!(p.chunk_indices, BatchPlan::new(1000, 8, Some(50), 8).unwrap().chunk_indices);
    assert_eq!(BatchPlan::new(1000, 8, Some(5000), 7).unwrap().len(), 125);
    assert_eq!(BatchPlan::new(1001, 8, None, 7).unwrap().dropped_rows, 1);
    assert!(matches!(BatchPlan::new(1000, 3, None, 7), Err(Error::ChunkTooSmall(3))));
    assert!(BatchPlan::new(3, 4, None, 7).is_err());
}

#[test]
fn unequal_streams_are_rejected() {
    let a = stack("a", 64, &[3], 1);
    let long = BatchPlan::new(64, 8, Some(4), 1).unwrap();
    let short = BatchPlan::new(64, 8, Some(3), 1).unwrap();
    assert!(cka_batched(a.stream(&long), a.stream(&short), CkaMode::Standard).is_err());
    assert!(cka_batched(a.stream(&short), a.stream(&long), CkaMode::Standard).is_err());
}

#[test]
fn csv_round_trip() {
    let a = stack("alpha", 64, &[3, 3, 3], 5);
    let b = stack("beta", 64, &[2, 4], 6);
    let plan = BatchPlan::new(64, 16, None, 2).unwrap();
    let m = cka_batched(a.stream(&plan), b.stream(&plan), CkaMode::PaperLiteral).unwrap();
    let parsed = parse_cka_csv(&format_cka_csv(&m)).unwrap();
    assert_eq!(parsed, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Finalized scores do not depend on the order or grouping in which batch
    /// results arrive.
    #[test]
    fn accumulation_order_is_irrelevant(seed in any::<u64>(), split in 0usize..=8) {
        let a = stack("a", 128, &[3, 5], seed);
        let b = stack("b", 128, &[4, 2, 2], seed ^ 1);
        let plan = BatchPlan::new(128, 16, None, seed).unwrap();
        let values: Vec<(usize, BatchHsic)> = (0..plan.len())
            .map(|i| {
                let (ba, bb) = (a.batch(&plan, plan.chunk_indices[i]).unwrap(), b.batch(&plan, plan.chunk_indices[i]).unwrap());
                (i, BatchHsic::compute(i, &ba, &bb).unwrap())
            })
            .collect();
        let mut in_order = HsicAccumulator::new(2, 3);
        for (i, v) in values.iter().cloned() {
            in_order.record(i, v).unwrap();
        }
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (first, second) = shuffled.split_at(split);
        let mut left = HsicAccumulator::new(2, 3);
        let mut right = HsicAccumulator::new(2, 3);
        for (i, v) in first.iter().cloned() {
            left.record(i, v).unwrap();
        }
        for (i, v) in second.iter().cloned() {
            right.record(i, v).unwrap();
        }
        right.merge(left).unwrap();
        for mode in [CkaMode::Standard, CkaMode::PaperLiteral] {
            prop_assert_eq!(in_order.finalize(mode).unwrap(), right.finalize(mode).unwrap());
        }
        // a batch index may only be recorded once
        let (i, v) = values[0].clone();
        prop_assert!(in_order.record(i, v).is_err());
    }
}
