use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;

use super::{grams, hsic1, CkaMode, GramMatrix};
use crate::error::{Error, Result};
use crate::store::ActivationMatrix;

/// HSIC values of one batch: `cross[i * cols + j] = hsic1(K_i, L_j)`,
/// `self_a[i] = hsic1(K_i, K_i)`, `self_b[j] = hsic1(L_j, L_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchHsic {
    pub cross: Vec<f64>,
    pub self_a: Vec<f64>,
    pub self_b: Vec<f64>,
}

impl BatchHsic {
    /// Evaluates every layer pair of one aligned batch.
    pub fn compute(batch: usize, a: &[ActivationMatrix], b: &[ActivationMatrix]) -> Result<Self> {
        let n = a.first().map(|m| m.rows()).unwrap_or(0);
        for m in a.iter().chain(b) {
            if m.rows() != n {
                return Err(Error::Batch {
                    batch,
                    reason: format!("misaligned batch: {} rows vs {n}", m.rows()),
                });
            }
        }
        let ka = grams(a)?;
        let kb = grams(b)?;
        Self::from_grams(&ka, &kb)
    }

    pub fn from_grams(ka: &[GramMatrix], kb: &[GramMatrix]) -> Result<Self> {
        let self_a = ka.par_iter().map(|k| hsic1(k, k)).collect::<Result<Vec<_>>>()?;
        let self_b = kb.par_iter().map(|k| hsic1(k, k)).collect::<Result<Vec<_>>>()?;
        let cols = kb.len();
        let cross = (0..ka.len() * cols)
            .into_par_iter()
            .map(|idx| hsic1(&ka[idx / cols], &kb[idx % cols]))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchHsic {
            cross,
            self_a,
            self_b,
        })
    }
}

/// Per-batch HSIC values for an `(L x L')` comparison, keyed by batch index.
///
/// Values are kept per batch and reduced in ascending batch-index order at
/// [`finalize`](Self::finalize), so merging partial accumulators (for
/// example one per worker) gives results bit-identical to a single pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HsicAccumulator {
    rows: usize,
    cols: usize,
    batches: BTreeMap<usize, BatchHsic>,
}

impl HsicAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        HsicAccumulator {
            rows,
            cols,
            batches: BTreeMap::new(),
        }
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn accumulate(
        &mut self,
        batch: usize,
        a: &[ActivationMatrix],
        b: &[ActivationMatrix],
    ) -> Result<()> {
        let values = BatchHsic::compute(batch, a, b)?;
        self.record(batch, values)
    }

    pub fn record(&mut self, batch: usize, values: BatchHsic) -> Result<()> {
        if values.self_a.len() != self.rows
            || values.self_b.len() != self.cols
            || values.cross.len() != self.rows * self.cols
        {
            return Err(Error::Batch {
                batch,
                reason: format!(
                    "layer counts ({}, {}) do not match accumulator ({}, {})",
                    values.self_a.len(),
                    values.self_b.len(),
                    self.rows,
                    self.cols
                ),
            });
        }
        if self.batches.insert(batch, values).is_some() {
            return Err(Error::Batch {
                batch,
                reason: "batch index accumulated twice".into(),
            });
        }
        Ok(())
    }

    pub fn merge(&mut self, other: HsicAccumulator) -> Result<()> {
        if other.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "cannot merge accumulators of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (batch, values) in other.batches {
            self.record(batch, values)?;
        }
        Ok(())
    }

    pub fn batches(&self) -> impl Iterator<Item = (&usize, &BatchHsic)> {
        self.batches.iter()
    }

    /// Raw sums over batches: `(cross, self_a, self_b, paper_ratio)`.
    fn sums(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut cross = vec![0.0; self.rows * self.cols];
        let mut self_a = vec![0.0; self.rows];
        let mut self_b = vec![0.0; self.cols];
        let mut ratio = vec![0.0; self.rows * self.cols];
        for values in self.batches.values() {
            for (s, v) in self_a.iter_mut().zip(&values.self_a) {
                *s += v;
            }
            for (s, v) in self_b.iter_mut().zip(&values.self_b) {
                *s += v;
            }
            for i in 0..self.rows {
                for j in 0..self.cols {
                    let c = values.cross[i * self.cols + j];
                    cross[i * self.cols + j] += c;
                    ratio[i * self.cols + j] += c / (values.self_a[i] * values.self_b[j]);
                }
            }
        }
        (cross, self_a, self_b, ratio)
    }

    pub fn finalize(&self, mode: CkaMode) -> Result<Array2<f64>> {
        if self.batches.is_empty() {
            return Err(Error::Degenerate("no batches accumulated".into()));
        }
        if mode == CkaMode::PaperLiteral {
            for (&batch, values) in &self.batches {
                let bad = values
                    .self_a
                    .iter()
                    .chain(&values.self_b)
                    .position(|&v| v <= 0.0 || !v.is_finite());
                if let Some(pos) = bad {
                    let (side, layer) = if pos < self.rows {
                        ("A", pos)
                    } else {
                        ("B", pos - self.rows)
                    };
                    return Err(Error::Batch {
                        batch,
                        reason: format!("self-HSIC of model {side} layer {layer} is not positive"),
                    });
                }
            }
        }
        let (cross, self_a, self_b, ratio) = self.sums();
        let count = self.batches.len() as f64;
        let mut out = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for j in 0..self.cols {
                let idx = i * self.cols + j;
                out[[i, j]] = match mode {
                    CkaMode::Standard => {
                        let denom = self_a[i] * self_b[j];
                        if denom <= 0.0 || !denom.is_finite() {
                            return Err(Error::Degenerate(format!(
                                "summed self-HSIC product for layers ({i}, {j}) is {denom}"
                            )));
                        }
                        cross[idx] / denom.sqrt()
                    }
                    CkaMode::PaperLiteral => ratio[idx] / count,
                };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::center_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(seed: u64, widths: &[usize]) -> Vec<ActivationMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        widths
            .iter()
            .map(|&w| {
                let data = Array2::from_shape_fn((12, w), |_| StandardNormal.sample(&mut rng));
                center_rows(&ActivationMatrix::from_array(data).unwrap())
            })
            .collect()
    }

    #[test]
    fn merge_is_bitwise_equal_to_single_pass() {
        let batches: Vec<_> = (0..7)
            .map(|b| (batch(b, &[3, 5]), batch(100 + b, &[2, 4, 6])))
            .collect();
        let mut whole = HsicAccumulator::new(2, 3);
        for (i, (a, b)) in batches.iter().enumerate() {
            whole.accumulate(i, a, b).unwrap();
        }
        for split in 1..7 {
            let mut left = HsicAccumulator::new(2, 3);
            let mut right = HsicAccumulator::new(2, 3);
            // deliver the right half in reverse to exercise ordering
            for i in (split..7).rev() {
                right.accumulate(i, &batches[i].0, &batches[i].1).unwrap();
            }
            for (i, (a, b)) in batches.iter().enumerate().take(split) {
                left.accumulate(i, a, b).unwrap();
            }
            left.merge(right).unwrap();
            assert_eq!(left.batch_count(), 7);
            for mode in [CkaMode::Standard, CkaMode::PaperLiteral] {
                assert_eq!(left.finalize(mode).unwrap(), whole.finalize(mode).unwrap());
            }
        }
    }

    #[test]
    fn duplicate_batch_index_is_rejected() {
        let (a, b) = (batch(1, &[3]), batch(2, &[3]));
        let mut acc = HsicAccumulator::new(1, 1);
        acc.accumulate(0, &a, &b).unwrap();
        assert!(acc.accumulate(0, &a, &b).is_err());
        assert_eq!(acc.batch_count(), 1);
    }

    #[test]
    fn empty_accumulator_cannot_finalize() {
        let acc = HsicAccumulator::new(1, 1);
        assert!(acc.finalize(CkaMode::Standard).is_err());
    }
}
