//! Linear-kernel CKA.
//!
//! The covariance form [`cka_biased`] works on feature matrices directly.
//! Everything else goes through gram matrices and the unbiased estimator
//! [`hsic1`], which is what the batched estimator averages over many
//! row-chunks.

mod accumulator;
mod batches;
mod io;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ActivationMatrix;

pub use accumulator::{BatchHsic, HsicAccumulator};
pub use batches::{BatchPlan, LayerStack};
pub use io::{format_cka_csv, parse_cka_csv, read_cka_csv, write_cka_csv, CkaSidecar};

/// How per-batch HSIC values are turned into a CKA score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkaMode {
    /// `sum cross / sqrt(sum self_a * sum self_b)`, sums over batches.
    #[default]
    Standard,
    /// Mean over batches of `cross / (self_a * self_b)`, without a square root.
    #[serde(rename = "paper")]
    PaperLiteral,
}

impl CkaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CkaMode::Standard => "standard",
            CkaMode::PaperLiteral => "paper",
        }
    }
}

impl std::str::FromStr for CkaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CkaMode::Standard),
            "paper" => Ok(CkaMode::PaperLiteral),
            other => Err(Error::Config(format!("unknown CKA mode {other:?}"))),
        }
    }
}

/// Symmetric `n x n` linear kernel `K = H H^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: Array2<f64>,
}

impl GramMatrix {
    /// Builds `H H^T` without checking that `H` is centered.
    pub fn from_features(h: ArrayView2<'_, f64>) -> Self {
        // the product may come back column-major; hsic1 walks rows
        let mut k = h.dot(&h.t()).as_standard_layout().into_owned();
        let n = k.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (k[[i, j]] + k[[j, i]]);
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        GramMatrix { data: k }
    }

    /// Wraps a matrix that is already symmetric within 1e-10.
    pub fn from_symmetric(data: Array2<f64>) -> Result<Self> {
        let n = data.nrows();
        if n == 0 || data.ncols() != n {
            return Err(Error::Shape(format!("gram must be square, got {:?}", data.dim())));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (data[[i, j]] - data[[j, i]]).abs() > 1e-10 {
                    return Err(Error::Shape(format!("gram not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }
}

/// `K = H H^T` for a centered activation matrix.
pub fn gram(h: &ActivationMatrix) -> Result<GramMatrix> {
    if !h.is_centered() {
        return Err(Error::Uncentered);
    }
    Ok(GramMatrix::from_features(h.data().view()))
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Covariance-form CKA: `||Ha^T Hb||_F^2 / (||Ha^T Ha||_F ||Hb^T Hb||_F)`.
pub fn cka_biased(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::RowMismatch(a.rows(), b.rows()));
    }
    if !a.is_centered() || !b.is_centered() {
        return Err(Error::Uncentered);
    }
    let (ha, hb) = (a.data(), b.data());
    let cross = frobenius_sq(&ha.t().dot(hb));
    let self_a = frobenius_sq(&ha.t().dot(ha)).sqrt();
    let self_b = frobenius_sq(&hb.t().dot(hb)).sqrt();
    let denom = self_a * self_b;
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate("constant features give a zero CKA denominator".into()));
    }
    Ok(cross / denom)
}

/// Unbiased HSIC estimator over two gram matrices of equal size `n >= 4`.
///
/// With `A~`, `B~` the grams with zeroed diagonals:
/// `[tr(A~ B~) + (1^T A~ 1)(1^T B~ 1) / ((n-1)(n-2)) - 2/(n-2) 1^T A~ B~ 1] / (n(n-3))`,
/// evaluated as an off-diagonal dot product, entry sums, and a dot product
/// of column sums. Grams are symmetric, so row sums stand in for column sums.
pub fn hsic1(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    let n = a.n();
    if b.n() != n {
        return Err(Error::RowMismatch(n, b.n()));
    }
    if n < 4 {
        return Err(Error::TooFewRows(n));
    }
    let (av, bv) = (a.data.view(), b.data.view());
    let mut trace = 0.0;
    let mut total_a = 0.0;
    let mut total_b = 0.0;
    let mut colsum_dot = 0.0;
    for i in 0..n {
        let (ra, rb) = (av.row(i), bv.row(i));
        let (ra, rb) = (ra.as_slice().expect("row-major gram"), rb.as_slice().expect("row-major gram"));
        let mut t = 0.0;
        let mut sa = 0.0;
        let mut sb = 0.0;
        for (x, y) in ra[..i].iter().zip(&rb[..i]).chain(ra[i + 1..].iter().zip(&rb[i + 1..])) {
            t += x * y;
            sa += x;
            sb += y;
        }
        trace += t;
        total_a += sa;
        total_b += sb;
        colsum_dot += sa * sb;
    }
    let nf = n as f64;
    let value = (trace + total_a * total_b / ((nf - 1.0) * (nf - 2.0))
        - 2.0 / (nf - 2.0) * colsum_dot)
        / (nf * (nf - 3.0));
    Ok(value)
}

/// `(L x L')` layer-pair CKA scores between two models.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub data: Array2<f64>,
    pub mode: CkaMode,
    pub batches_used: usize,
    pub model_a: String,
    pub model_b: String,
}

impl CkaMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.data.diag().to_vec()
    }
}

/// Per-layer centered chunks for one batch.
pub type LayerBatch = Vec<ActivationMatrix>;

/// Averages CKA over aligned batch streams of two models.
///
/// Each stream item holds one centered matrix per layer; both streams must
/// deliver the same number of batches with equal row counts in each.
pub fn cka_batched<A, B>(stream_a: A, stream_b: B, mode: CkaMode) -> Result<CkaMatrix>
where
    A: IntoIterator<Item = Result<LayerBatch>>,
    B: IntoIterator<Item = Result<LayerBatch>>,
{
    let mut it_b = stream_b.into_iter();
    let mut acc: Option<HsicAccumulator> = None;
    let mut ids = (String::new(), String::new());
    for (index, batch_a) in stream_a.into_iter().enumerate() {
        let batch_a = batch_a?;
        let batch_b = it_b.next().ok_or_else(|| Error::Batch {
            batch: index,
            reason: "stream B ended before stream A".into(),
        })??;
        let acc = acc.get_or_insert_with(|| {
            ids = (
                batch_a.first().map(|m| m.provenance().model_id.clone()).unwrap_or_default(),
                batch_b.first().map(|m| m.provenance().model_id.clone()).unwrap_or_default(),
            );
            HsicAccumulator::new(batch_a.len(), batch_b.len())
        });
        acc.accumulate(index, &batch_a, &batch_b)?;
    }
    let acc = acc.ok_or_else(|| Error::Degenerate("no batches supplied".into()))?;
    if it_b.next().is_some() {
        return Err(Error::Batch {
            batch: acc.batch_count(),
            reason: "stream A ended before stream B".into(),
        });
    }
    Ok(CkaMatrix {
        data: acc.finalize(mode)?,
        mode,
        batches_used: acc.batch_count(),
        model_a: ids.0,
        model_b: ids.1,
    })
}

/// Single-batch standard-mode CKA via grams and `hsic1`.
pub fn cka_pair(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    let m = cka_batched(
        std::iter::once(Ok(vec![a.clone()])),
        std::iter::once(Ok(vec![b.clone()])),
        CkaMode::Standard,
    )?;
    Ok(m.data[[0, 0]])
}

/// Grams for every layer of a batch, computed in parallel.
pub(crate) fn grams(layers: &[ActivationMatrix]) -> Result<Vec<GramMatrix>> {
    layers.par_iter().map(gram).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::center_rows;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn centered(rows: usize, cols: usize, seed: u64) -> ActivationMatrix {
        center_rows(&ActivationMatrix::from_array(random(rows, cols, seed)).unwrap())
    }

    #[test]
    fn gram_algebra() {
        let eye = GramMatrix::from_features(Array2::<f64>::eye(3).view());
        assert_eq!(eye.data(), &Array2::<f64>::eye(3));
        let zero = GramMatrix::from_features(Array2::<f64>::zeros((4, 2)).view());
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let h = random(8, 5, 1);
        let k = GramMatrix::from_features(h.view());
        for a in 0..8 {
            for b in 0..8 {
                let brute: f64 = (0..5).map(|c| h[[a, c]] * h[[b, c]]).sum();
                assert!((k.data()[[a, b]] - brute).abs() < 1e-12);
                assert_eq!(k.data()[[a, b]], k.data()[[b, a]]);
            }
        }
    }

    #[test]
    fn hsic1_accepts_any_input_layout() {
        let h = random(9, 1, 4);
        let column_major = h.t().to_owned();
        let k = GramMatrix::from_features(column_major.t());
        let reference = GramMatrix::from_features(h.view());
        assert_eq!(hsic1(&k, &k).unwrap(), hsic1(&reference, &reference).unwrap());
        let f = GramMatrix::from_symmetric(reference.data().t().to_owned()).unwrap();
        assert!(hsic1(&f, &reference).is_ok());
    }

    #[test]
    fn gram_requires_centering() {
        let m = ActivationMatrix::from_array(random(6, 2, 3)).unwrap();
        assert!(matches!(gram(&m), Err(Error::Uncentered)));
        assert!(gram(&center_rows(&m)).is_ok());
    }

    #[test]
    fn hsic1_preconditions() {
        let z4 = GramMatrix::from_symmetric(Array2::zeros((4, 4))).unwrap();
        assert_eq!(hsic1(&z4, &z4).unwrap(), 0.0);
        let z3 = GramMatrix::from_symmetric(Array2::zeros((3, 3))).unwrap();
        assert!(matches!(hsic1(&z3, &z3), Err(Error::TooFewRows(3))));
        let z5 = GramMatrix::from_symmetric(Array2::zeros((5, 5))).unwrap();
        assert!(matches!(hsic1(&z4, &z5), Err(Error::RowMismatch(4, 5))));
    }

    #[test]
    fn hsic1_is_exactly_symmetric() {
        let a = gram(&centered(20, 3, 4)).unwrap();
        let b = gram(&centered(20, 7, 5)).unwrap();
        assert_eq!(hsic1(&a, &b).unwrap(), hsic1(&b, &a).unwrap());
    }

    #[test]
    fn biased_cka_basics() {
        let h = centered(16, 4, 7);
        assert!((cka_biased(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        let flat = center_rows(&ActivationMatrix::from_array(array![[1.0], [1.0], [1.0]]).unwrap());
        assert!(matches!(cka_biased(&flat, &flat), Err(Error::Degenerate(_))));
        let other = centered(15, 4, 8);
        assert!(matches!(cka_biased(&h, &other), Err(Error::RowMismatch(16, 15))));
    }

    #[test]
    fn cka_pair_self_and_scale() {
        let h = centered(32, 5, 9);
        let one = cka_pair(&h, &h).unwrap();
        assert!((one - 1.0).abs() < 1e-10);
        assert!((cka_pair(&h, &h.scaled(3.0)).unwrap() - one).abs() < 1e-12);
    }

    #[test]
    fn batched_single_batch_matches_pair() {
        let a = centered(24, 3, 10);
        let b = centered(24, 6, 11);
        let m = cka_batched(
            std::iter::once(Ok(vec![a.clone()])),
            std::iter::once(Ok(vec![b.clone()])),
            CkaMode::Standard,
        )
        .unwrap();
        let ka = gram(&a).unwrap();
        let kb = gram(&b).unwrap();
        let expected = hsic1(&ka, &kb).unwrap()
            / (hsic1(&ka, &ka).unwrap() * hsic1(&kb, &kb).unwrap()).sqrt();
        assert_eq!(m.data[[0, 0]], expected);
        assert_eq!(cka_pair(&a, &b).unwrap(), expected);
        assert_eq!(m.batches_used, 1);
    }

    #[test]
    fn batched_rejects_misaligned_streams() {
        let a = centered(24, 3, 12);
        let b = centered(20, 3, 13);
        let err = cka_batched(
            vec![Ok(vec![a.clone()]), Ok(vec![a.clone()])],
            vec![Ok(vec![a.clone()]), Ok(vec![b])],
            CkaMode::Standard,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Batch { batch: 1, .. }), "{err}");
        let err = cka_batched(
            vec![Ok(vec![a.clone()])],
            vec![Ok(vec![a.clone()]), Ok(vec![a])],
            CkaMode::Standard,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Batch { .. }));
    }

    #[test]
    fn paper_mode_reports_nonpositive_self_hsic() {
        let a = centered(8, 2, 14);
        let zero = center_rows(&ActivationMatrix::from_array(Array2::zeros((8, 2))).unwrap());
        let err = cka_batched(
            vec![Ok(vec![a.clone()]), Ok(vec![zero.clone()])],
            vec![Ok(vec![a.clone()]), Ok(vec![a])],
            CkaMode::PaperLiteral,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Batch { batch: 1, .. }), "{err}");
    }

    #[test]
    fn mode_names() {
        assert_eq!("paper".parse::<CkaMode>().unwrap(), CkaMode::PaperLiteral);
        assert_eq!(CkaMode::Standard.as_str(), "standard");
        assert!("rbf".parse::<CkaMode>().is_err());
    }
}
