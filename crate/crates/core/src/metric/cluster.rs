use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRelation {
    WithinFirst,
    WithinSecond,
    Between,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: String,
    pub b: String,
    pub distance: f64,
    pub relation: PairRelation,
}

/// Two-way partition with the distances that support it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClusters {
    /// Each group sorted by id; the first group holds the smallest id.
    pub groups: [Vec<String>; 2],
    pub pairs: Vec<PairDistance>,
}

impl TwoClusters {
    /// Equality up to swapping the two group labels.
    pub fn same_partition(&self, other: &TwoClusters) -> bool {
        self.groups == other.groups
            || (self.groups[0] == other.groups[1] && self.groups[1] == other.groups[0])
    }
}

fn average_linkage(d: &DistanceMatrix, a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &i in a {
        for &j in b {
            sum += d.data()[[i, j]];
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Average-linkage agglomerative clustering stopped at two clusters.
///
/// Models are processed in lexicographic id order and, among equally close
/// cluster pairs, the pair whose smallest ids come first is merged. The result
/// depends only on ids and distances, not on input order.
pub fn cluster_two(d: &DistanceMatrix) -> Result<TwoClusters> {
    let m = d.len();
    if m < 2 {
        return Err(Error::InvalidDistances(format!("need at least 2 models, got {m}")));
    }
    // DistanceMatrix::new already rejects asymmetric or negative input; this
    // guards matrices built through other paths.
    let data = d.data();
    for i in 0..m {
        for j in 0..m {
            if data[[i, j]] < 0.0 || data[[i, j]] != data[[j, i]] {
                return Err(Error::InvalidDistances(format!("entry ({i}, {j})")));
            }
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| d.ids()[a].cmp(&d.ids()[b]));
    let mut clusters: Vec<Vec<usize>> = order.into_iter().map(|i| vec![i]).collect();

    while clusters.len() > 2 {
        let mut best = (f64::INFINITY, 0, 1);
        for p in 0..clusters.len() {
            for q in (p + 1)..clusters.len() {
                let dist = average_linkage(d, &clusters[p], &clusters[q]);
                if dist < best.0 {
                    best = (dist, p, q);
                }
            }
        }
        let (_, p, q) = best;
        let merged = clusters.remove(q);
        clusters[p].extend(merged);
        clusters[p].sort_by(|&a, &b| d.ids()[a].cmp(&d.ids()[b]));
    }

    let names = |c: &[usize]| c.iter().map(|&i| d.ids()[i].clone()).collect::<Vec<_>>();
    let groups = [names(&clusters[0]), names(&clusters[1])];
    let mut pairs = Vec::new();
    let mut members: Vec<(usize, usize)> = clusters
        .iter()
        .enumerate()
        .flat_map(|(g, c)| c.iter().map(move |&i| (g, i)))
        .collect();
    members.sort_by(|x, y| d.ids()[x.1].cmp(&d.ids()[y.1]));
    for (x, &(ga, a)) in members.iter().enumerate() {
        for &(gb, b) in &members[x + 1..] {
            let relation = match (ga, gb) {
                (0, 0) => PairRelation::WithinFirst,
                (1, 1) => PairRelation::WithinSecond,
                _ => PairRelation::Between,
            };
            pairs.push(PairDistance {
                a: d.ids()[a].clone(),
                b: d.ids()[b].clone(),
                distance: data[[a, b]],
                relation,
            });
        }
    }
    Ok(TwoClusters { groups, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn two_models_are_singletons() {
        let d = DistanceMatrix::new(ndarray::array![[0.0, 3.0], [3.0, 0.0]], ids(2)).unwrap();
        let c = cluster_two(&d).unwrap();
        assert_eq!(c.groups, [vec!["m0".to_string()], vec!["m1".to_string()]]);
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.pairs[0].relation, PairRelation::Between);
    }

    #[test]
    fn all_zero_matrix_is_deterministic() {
        let d = DistanceMatrix::new(Array2::zeros((4, 4)), ids(4)).unwrap();
        let c = cluster_two(&d).unwrap();
        // ties merge the earliest pair repeatedly: {m0, m1, m2} then m3
        assert_eq!(c.groups[0], vec!["m0", "m1", "m2"]);
        assert_eq!(c.groups[1], vec!["m3"]);
        assert_eq!(cluster_two(&d).unwrap(), c);
    }

    #[test]
    fn rejects_single_model() {
        let d = DistanceMatrix::new(Array2::zeros((1, 1)), ids(1)).unwrap();
        assert!(cluster_two(&d).is_err());
    }
}
