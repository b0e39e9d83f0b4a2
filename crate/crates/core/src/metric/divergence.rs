use serde::{Deserialize, Serialize};

use super::layerwise_cka;
use crate::error::{Error, Result};
use crate::kernel::{BatchPlan, CkaMode, LayerStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    WithinA,
    WithinB,
    Between,
}

/// Per-layer CKA for one compared model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCka {
    pub a: String,
    pub b: String,
    pub kind: PairKind,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// `None` when group A has fewer than two models.
    pub within_a: Option<f64>,
    pub within_b: Option<f64>,
    /// Mean over all within-group pairs of both groups.
    pub within: Option<f64>,
    pub between: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub pairs: Vec<PairCka>,
    pub layers: Vec<LayerSummary>,
    pub batches_used: usize,
}

impl DivergenceReport {
    pub fn comparisons(&self) -> usize {
        self.pairs.len()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Within-group and between-group same-index CKA for two model groups.
///
/// Every distinct pair is compared once: unordered pairs inside each group
/// and all cross pairs, skipping a model compared with itself. Groups of 10
/// and 10 give `2 * C(10, 2) + 10 * 10 = 190` comparisons.
pub fn per_layer_divergence(
    group_a: &[LayerStack],
    group_b: &[LayerStack],
    plan: &BatchPlan,
    mode: CkaMode,
) -> Result<DivergenceReport> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Shape("both groups need at least one model".into()));
    }
    // population of distinct models, in first-seen order
    let mut population: Vec<LayerStack> = Vec::new();
    let index_of = |s: &LayerStack, population: &mut Vec<LayerStack>| {
        match population.iter().position(|p| p.model_id() == s.model_id()) {
            Some(i) => i,
            None => {
                population.push(s.clone());
                population.len() - 1
            }
        }
    };
    let ia: Vec<usize> = group_a.iter().map(|s| index_of(s, &mut population)).collect();
    let ib: Vec<usize> = group_b.iter().map(|s| index_of(s, &mut population)).collect();
    let cka = layerwise_cka(&population, plan, mode)?;
    let id = |i: usize| cka.ids()[i].clone();

    let mut pairs = Vec::new();
    for (kind, group) in [(PairKind::WithinA, &ia), (PairKind::WithinB, &ib)] {
        for (x, &a) in group.iter().enumerate() {
            for &b in &group[x + 1..] {
                if a != b {
                    pairs.push(PairCka { a: id(a), b: id(b), kind, per_layer: cka.per_layer(a, b) });
                }
            }
        }
    }
    for &a in &ia {
        for &b in &ib {
            if a != b {
                pairs.push(PairCka {
                    a: id(a),
                    b: id(b),
                    kind: PairKind::Between,
                    per_layer: cka.per_layer(a, b),
                });
            }
        }
    }
    if !pairs.iter().any(|p| p.kind == PairKind::Between) {
        return Err(Error::Shape("groups share every model; no between-group pairs".into()));
    }

    let layers = (0..cka.depth())
        .map(|layer| {
            let of = |kind: PairKind| {
                pairs
                    .iter()
                    .filter(move |p| p.kind == kind)
                    .map(move |p| p.per_layer[layer])
            };
            LayerSummary {
                layer,
                within_a: mean(of(PairKind::WithinA)),
                within_b: mean(of(PairKind::WithinB)),
                within: mean(of(PairKind::WithinA).chain(of(PairKind::WithinB))),
                between: mean(of(PairKind::Between)).expect("between pairs exist"),
            }
        })
        .collect();
    Ok(DivergenceReport {
        pairs,
        layers,
        batches_used: cka.batches_used,
    })
}
