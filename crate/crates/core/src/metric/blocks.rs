use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BLOCKS: usize = 5;
// minimum objective gain for accepting more blocks
const GAIN_EPS: f64 = 1e-9;

/// Contiguous layer groups of a self-comparison CKA matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSegmentation {
    /// First layer of each block, starting with 0.
    pub boundaries: Vec<usize>,
    /// Mean off-diagonal CKA inside each block; `None` for one-layer blocks.
    pub intra_means: Vec<Option<f64>>,
    /// Mean CKA between layers of different blocks; `None` for one block.
    pub inter_mean: Option<f64>,
    #[serde(skip)]
    pub objective: f64,
}

impl BlockSegmentation {
    pub fn block_count(&self) -> usize {
        self.boundaries.len()
    }
}

fn block_ids(starts: &[usize], n: usize) -> Vec<usize> {
    let mut ids = vec![0; n];
    for (b, &start) in starts.iter().enumerate() {
        for id in ids.iter_mut().skip(start) {
            *id = b;
        }
    }
    ids
}

/// Pooled intra and inter means; `None` when no intra pairs exist.
fn objective(s: &Array2<f64>, starts: &[usize]) -> Option<f64> {
    if starts.len() == 1 {
        return Some(0.0);
    }
    let n = s.nrows();
    let ids = block_ids(starts, n);
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if ids[i] == ids[j] {
                intra += s[[i, j]];
                ni += 1;
            } else {
                inter += s[[i, j]];
                nx += 1;
            }
        }
    }
    (ni > 0).then(|| intra / ni as f64 - inter / nx as f64)
}

fn sorted_with(starts: &[usize], extra: usize) -> Vec<usize> {
    let mut v = starts.to_vec();
    v.push(extra);
    v.sort_unstable();
    v
}

/// Greedy change-point segmentation of a square, symmetric CKA matrix.
///
/// Blocks are added one boundary at a time, each time taking the boundary
/// that maximises `mean intra-block CKA - mean inter-block CKA` (diagonal
/// excluded), followed by single-boundary moves until no move improves. The
/// block count in `1..=5` with the best objective wins; more blocks must
/// improve it by more than 1e-9. A single block scores 0.
pub fn detect_blocks(s: ArrayView2<'_, f64>) -> Result<BlockSegmentation> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Shape(format!("block detection needs a square matrix, got {:?}", s.dim())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !(s[[i, j]] - s[[j, i]]).abs().le(&1e-6) {
                return Err(Error::Shape(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let sym = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (s[[i, j]] + s[[j, i]]));

    let mut best_starts = vec![0];
    let mut best_obj = 0.0;
    let mut current = vec![0];
    for _k in 2..=MAX_BLOCKS.min(n) {
        let mut step: Option<(f64, Vec<usize>)> = None;
        for c in 1..n {
            if current.contains(&c) {
                continue;
            }
            let cand = sorted_with(&current, c);
            if let Some(obj) = objective(&sym, &cand) {
                if step.as_ref().is_none_or(|(o, _)| obj > *o) {
                    step = Some((obj, cand));
                }
            }
        }
        let Some((mut obj, mut cand)) = step else { break };
        refine(&sym, &mut cand, &mut obj);
        if obj > best_obj + GAIN_EPS {
            best_obj = obj;
            best_starts = cand.clone();
        }
        current = cand;
    }

    let ids = block_ids(&best_starts, n);
    let k = best_starts.len();
    let mut intra = vec![(0.0, 0usize); k];
    let (mut inter, mut nx) = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if ids[i] == ids[j] {
                intra[ids[i]].0 += sym[[i, j]];
                intra[ids[i]].1 += 1;
            } else {
                inter += sym[[i, j]];
                nx += 1;
            }
        }
    }
    Ok(BlockSegmentation {
        boundaries: best_starts,
        intra_means: intra
            .into_iter()
            .map(|(s, c)| (c > 0).then(|| s / c as f64))
            .collect(),
        inter_mean: (nx > 0).then(|| inter / nx as f64),
        objective: best_obj,
    })
}

/// Moves individual boundaries while that strictly improves the objective.
fn refine(s: &Array2<f64>, starts: &mut Vec<usize>, obj: &mut f64) {
    let n = s.nrows();
    loop {
        let mut improved = false;
        for b in 1..starts.len() {
            let lo = starts[b - 1] + 1;
            let hi = starts.get(b + 1).copied().unwrap_or(n);
            for pos in lo..hi {
                if pos == starts[b] {
                    continue;
                }
                let mut cand = starts.clone();
                cand[b] = pos;
                if let Some(o) = objective(s, &cand) {
                    if o > *obj + GAIN_EPS {
                        *obj = o;
                        *starts = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_matrix_is_one_block() {
        let s = Array2::from_elem((8, 8), 0.37);
        let seg = detect_blocks(s.view()).unwrap();
        assert_eq!(seg.boundaries, vec![0]);
        assert_eq!(seg.inter_mean, None);
    }

    #[test]
    fn identity_is_one_block() {
        let s = Array2::<f64>::eye(10);
        let seg = detect_blocks(s.view()).unwrap();
        assert_eq!(seg.boundaries, vec![0]);
        assert_eq!(seg.intra_means, vec![Some(0.0)]);
    }

    #[test]
    fn clean_three_blocks() {
        let sizes = [3, 5, 4];
        let starts = [0, 3, 8];
        let ids = block_ids(&starts, 12);
        let s = Array2::from_shape_fn((12, 12), |(i, j)| {
            if i == j {
                1.0
            } else if ids[i] == ids[j] {
                0.9
            } else {
                0.1
            }
        });
        let seg = detect_blocks(s.view()).unwrap();
        assert_eq!(seg.boundaries, starts.to_vec());
        assert_eq!(seg.block_count(), sizes.len());
        for m in &seg.intra_means {
            assert!((m.unwrap() - 0.9).abs() < 1e-12);
        }
        assert!((seg.inter_mean.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(detect_blocks(Array2::<f64>::zeros((3, 4)).view()).is_err());
        let mut s = Array2::<f64>::eye(3);
        s[[0, 1]] = 0.5;
        assert!(detect_blocks(s.view()).is_err());
    }
}
