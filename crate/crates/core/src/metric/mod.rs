//! Distances derived from CKA and the analyses built on them.

mod blocks;
mod cluster;
mod divergence;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{hsic1, BatchPlan, CkaMode, GramMatrix, LayerStack};

pub use blocks::{detect_blocks, BlockSegmentation};
pub use cluster::{cluster_two, PairDistance, PairRelation, TwoClusters};
pub use divergence::{per_layer_divergence, DivergenceReport, LayerSummary, PairCka, PairKind};

/// `arccos(clamp(cka, -1, 1))`, in `[0, pi]`.
pub fn arccos_distance(cka: f64) -> Result<f64> {
    if !cka.is_finite() {
        return Err(Error::NonFinite(format!("CKA value {cka}")));
    }
    Ok(cka.clamp(-1.0, 1.0).acos())
}

/// `sqrt(sum_i arccos(cka_i)^2)` over same-index layers.
pub fn product_distance(per_layer_cka: &[f64]) -> Result<f64> {
    if per_layer_cka.is_empty() {
        return Err(Error::Shape("product distance needs at least one layer".into()));
    }
    let mut sum = 0.0;
    for &c in per_layer_cka {
        let d = arccos_distance(c)?;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Symmetric, non-negative, zero-diagonal distances between models.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    data: Array2<f64>,
    ids: Vec<String>,
}

impl DistanceMatrix {
    pub fn new(data: Array2<f64>, ids: Vec<String>) -> Result<Self> {
        let m = ids.len();
        if data.dim() != (m, m) {
            return Err(Error::InvalidDistances(format!(
                "{:?} matrix for {m} ids",
                data.dim()
            )));
        }
        for i in 0..m {
            if data[[i, i]] != 0.0 {
                return Err(Error::InvalidDistances(format!("nonzero diagonal at {i}")));
            }
            for j in 0..m {
                let v = data[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidDistances(format!("entry ({i}, {j}) = {v}")));
                }
                if (v - data[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidDistances(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { data, ids })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == a)?;
        let j = self.ids.iter().position(|x| x == b)?;
        Some(self.data[[i, j]])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
        for (id, row) in self.ids.iter().zip(self.data.rows()) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; `#` comment lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidDistances(format!("csv: {m}"));
        let mut lines = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let ids: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let m = ids.len();
        let mut data = Array2::zeros((m, m));
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default().trim();
            if i >= m || id != ids[i] {
                return Err(bad(format!("row {i} labelled {id:?}")));
            }
            let row = fields
                .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != m {
                return Err(bad(format!("row {i} has {} values", row.len())));
            }
            for (j, v) in row.into_iter().enumerate() {
                data[[i, j]] = v;
            }
            count += 1;
        }
        if count != m {
            return Err(bad(format!("{count} rows for {m} ids")));
        }
        DistanceMatrix::new(data, ids)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Same-index layer CKA for every unordered pair of a model population.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseCka {
    ids: Vec<String>,
    depth: usize,
    // (a, b) with a < b, flattened as pair_index * depth + layer
    values: Vec<f64>,
    pub batches_used: usize,
}

impl LayerwiseCka {
    fn pair_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let m = self.ids.len();
        a * m - a * (a + 1) / 2 + (b - a - 1)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Per-layer CKA between models `a` and `b`; all ones when `a == b`.
    pub fn per_layer(&self, a: usize, b: usize) -> Vec<f64> {
        if a == b {
            return vec![1.0; self.depth];
        }
        let p = self.pair_index(a, b);
        self.values[p * self.depth..(p + 1) * self.depth].to_vec()
    }
}

/// Batched same-index CKA across a population sharing one batch plan.
///
/// Grams and self-HSIC are computed once per model and batch; sums run in
/// plan order.
pub fn layerwise_cka(models: &[LayerStack], plan: &BatchPlan, mode: CkaMode) -> Result<LayerwiseCka> {
    let m = models.len();
    if m == 0 {
        return Err(Error::Shape("empty model population".into()));
    }
    let depth = models[0].depth();
    if let Some(bad) = models.iter().find(|s| s.depth() != depth) {
        return Err(Error::Shape(format!(
            "depth mismatch: {} has {} layers, {} has {depth}",
            bad.model_id(),
            bad.depth(),
            models[0].model_id()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
        .collect();
    let mut cross = vec![0.0; pairs.len() * depth];
    let mut ratio = vec![0.0; pairs.len() * depth];
    let mut selfs = vec![0.0; m * depth];

    for (batch, &chunk) in plan.chunk_indices.iter().enumerate() {
        let grams: Vec<Vec<GramMatrix>> = models
            .par_iter()
            .map(|s| crate::kernel::grams(&s.batch(plan, chunk)?))
            .collect::<Result<_>>()?;
        let batch_self: Vec<f64> = (0..m * depth)
            .into_par_iter()
            .map(|idx| {
                let g = &grams[idx / depth][idx % depth];
                hsic1(g, g)
            })
            .collect::<Result<_>>()?;
        if mode == CkaMode::PaperLiteral {
            if let Some(idx) = batch_self.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::Batch {
                    batch,
                    reason: format!(
                        "self-HSIC of {} layer {} is not positive",
                        models[idx / depth].model_id(),
                        idx % depth
                    ),
                });
            }
        }
        let batch_cross: Vec<f64> = (0..pairs.len() * depth)
            .into_par_iter()
            .map(|idx| {
                let (a, b) = pairs[idx / depth];
                let layer = idx % depth;
                hsic1(&grams[a][layer], &grams[b][layer])
            })
            .collect::<Result<_>>()?;
        for (s, v) in selfs.iter_mut().zip(&batch_self) {
            *s += v;
        }
        for (idx, &c) in batch_cross.iter().enumerate() {
            let (a, b) = pairs[idx / depth];
            let layer = idx % depth;
            cross[idx] += c;
            ratio[idx] += c / (batch_self[a * depth + layer] * batch_self[b * depth + layer]);
        }
    }

    let count = plan.len() as f64;
    let mut values = vec![0.0; pairs.len() * depth];
    for (idx, v) in values.iter_mut().enumerate() {
        let (a, b) = pairs[idx / depth];
        let layer = idx % depth;
        *v = match mode {
            CkaMode::Standard => {
                let denom = selfs[a * depth + layer] * selfs[b * depth + layer];
                if denom <= 0.0 || !denom.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "summed self-HSIC product for {} / {} layer {layer} is {denom}",
                        models[a].model_id(),
                        models[b].model_id()
                    )));
                }
                cross[idx] / denom.sqrt()
            }
            CkaMode::PaperLiteral => ratio[idx] / count,
        };
    }
    Ok(LayerwiseCka {
        ids: models.iter().map(|s| s.model_id().to_string()).collect(),
        depth,
        values,
        batches_used: plan.len(),
    })
}

/// Product-space arccos-CKA distances between equal-depth models.
pub fn pairwise_distances(models: &[LayerStack], plan: &BatchPlan, mode: CkaMode) -> Result<DistanceMatrix> {
    let cka = layerwise_cka(models, plan, mode)?;
    distances_from_layerwise(&cka)
}

pub fn distances_from_layerwise(cka: &LayerwiseCka) -> Result<DistanceMatrix> {
    let m = cka.ids.len();
    let mut data = Array2::zeros((m, m));
    for a in 0..m {
        for b in (a + 1)..m {
            let d = product_distance(&cka.per_layer(a, b))?;
            data[[a, b]] = d;
            data[[b, a]] = d;
        }
    }
    DistanceMatrix::new(data, cka.ids.clone())
}
