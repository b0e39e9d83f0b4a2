use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    cross_entropy, cross_entropy_grad, gelu_approx, gelu_approx_grad, layer_norm,
    layer_norm_backward, solu, solu_vjp, LnCache,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(rename = "gelu")]
    GeluApprox,
    Solu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.width < 2 || self.hidden < 1 {
            return Err(Error::Config(format!(
                "vocab >= 2, width >= 2 and hidden >= 1 required, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameters of one residual block. `w_in` is `(width, hidden)`, `w_out`
/// is `(hidden, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_scale: Array1<f64>,
    pub ln_bias: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockParam {
    LnScale,
    LnBias,
    WIn,
    BIn,
    WOut,
    BOut,
}

impl BlockParam {
    pub const ALL: [BlockParam; 6] = [
        BlockParam::LnScale,
        BlockParam::LnBias,
        BlockParam::WIn,
        BlockParam::BIn,
        BlockParam::WOut,
        BlockParam::BOut,
    ];
}

/// Names a parameter tensor. Blocks are numbered from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    Embedding,
    Block(usize, BlockParam),
    FinalLnScale,
    FinalLnBias,
    Unembed,
}

impl ParamKey {
    pub fn name(&self) -> String {
        match self {
            ParamKey::Embedding => "embedding".into(),
            ParamKey::Block(i, p) => format!(
                "blocks.{i}.{}",
                match p {
                    BlockParam::LnScale => "ln_scale",
                    BlockParam::LnBias => "ln_bias",
                    BlockParam::WIn => "w_in",
                    BlockParam::BIn => "b_in",
                    BlockParam::WOut => "w_out",
                    BlockParam::BOut => "b_out",
                }
            ),
            ParamKey::FinalLnScale => "final_ln_scale".into(),
            ParamKey::FinalLnBias => "final_ln_bias".into(),
            ParamKey::Unembed => "unembed".into(),
        }
    }
}

pub type Gradients = BTreeMap<ParamKey, ArrayD<f64>>;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableMask(BTreeSet<ParamKey>);

impl TrainableMask {
    pub fn none() -> Self {
        TrainableMask(BTreeSet::new())
    }

    pub fn all(model: &TinyModel) -> Self {
        TrainableMask(model.param_keys().into_iter().collect())
    }

    pub fn from_keys(keys: impl IntoIterator<Item = ParamKey>) -> Self {
        TrainableMask(keys.into_iter().collect())
    }

    /// Only the parameters of blocks `first..`, block 0 being the first.
    pub fn blocks_from(model: &TinyModel, first: usize) -> Self {
        Self::from_keys(
            model
                .param_keys()
                .into_iter()
                .filter(|k| matches!(k, ParamKey::Block(i, _) if *i >= first)),
        )
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.0.contains(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.0.iter()
    }
}

/// Attention-free residual network: embedding, `depth` pre-LayerNorm MLP
/// blocks added to the residual stream, final LayerNorm, unembedding.
///
/// Tap `l` is the residual stream after block `l` (tap 0 is the embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_ln_scale: Array1<f64>,
    pub final_ln_bias: Array1<f64>,
    pub unembed: Array2<f64>,
    pub final_train_loss: Option<f64>,
}

pub(crate) struct BlockCache {
    ln: LnCache,
    ln_out: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct SuffixCache {
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    final_out: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl Block {
    fn activate(&self, pre: &Array2<f64>, activation: Activation) -> Array2<f64> {
        match activation {
            Activation::GeluApprox => pre.mapv(gelu_approx),
            Activation::Solu => {
                let mut out = pre.clone();
                for mut row in out.rows_mut() {
                    let v = solu(row.as_slice().expect("row-major"));
                    row.assign(&Array1::from(v));
                }
                out
            }
        }
    }

    fn forward_cached(&self, x: &Array2<f64>, activation: Activation) -> (Array2<f64>, BlockCache) {
        let (ln_out, ln) = layer_norm(x.view(), self.ln_scale.view(), self.ln_bias.view());
        let pre = ln_out.dot(&self.w_in) + &self.b_in;
        let act = self.activate(&pre, activation);
        let y = x + &(act.dot(&self.w_out) + &self.b_out);
        (y, BlockCache { ln, ln_out, pre, act })
    }

    fn forward(&self, x: &Array2<f64>, activation: Activation) -> Array2<f64> {
        self.forward_cached(x, activation).0
    }

    /// Returns `dx` and, when `grads` is true, gradients for all six tensors.
    fn backward(
        &self,
        cache: &BlockCache,
        dy: &Array2<f64>,
        activation: Activation,
        grads: bool,
    ) -> (Array2<f64>, Option<[ArrayD<f64>; 6]>) {
        let d_act = dy.dot(&self.w_out.t());
        let d_pre = match activation {
            Activation::GeluApprox => &d_act * &cache.pre.mapv(gelu_approx_grad),
            Activation::Solu => {
                let mut out = Array2::zeros(d_act.raw_dim());
                for ((mut o, p), g) in out.rows_mut().into_iter().zip(cache.pre.rows()).zip(d_act.rows()) {
                    let v = solu_vjp(p.as_slice().expect("row-major"), g.as_slice().expect("row-major"));
                    o.assign(&Array1::from(v));
                }
                out
            }
        };
        let d_ln = d_pre.dot(&self.w_in.t());
        let (dx_ln, d_scale, d_bias) = layer_norm_backward(&cache.ln, self.ln_scale.view(), d_ln.view());
        let dx = dy + &dx_ln;
        let param_grads = grads.then(|| {
            [
                d_scale.into_dyn(),
                d_bias.into_dyn(),
                cache.ln_out.t().dot(&d_pre).into_dyn(),
                d_pre.sum_axis(Axis(0)).into_dyn(),
                cache.act.t().dot(dy).into_dyn(),
                dy.sum_axis(Axis(0)).into_dyn(),
            ]
        });
        (dx, param_grads)
    }
}

impl TinyModel {
    /// Seeded random initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, h) = (config.vocab, config.width, config.hidden);
        let embedding = normal_matrix(&mut rng, v, d, 1.0);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln_scale: Array1::ones(d),
                ln_bias: Array1::zeros(d),
                w_in: normal_matrix(&mut rng, d, h, 1.0 / (d as f64).sqrt()),
                b_in: Array1::zeros(h),
                w_out: normal_matrix(&mut rng, h, d, 1.0 / (h as f64).sqrt()),
                b_out: Array1::zeros(d),
            })
            .collect();
        let unembed = normal_matrix(&mut rng, d, v, 1.0 / (d as f64).sqrt());
        Ok(TinyModel {
            config,
            seed,
            embedding,
            blocks,
            final_ln_scale: Array1::ones(d),
            final_ln_bias: Array1::zeros(d),
            unembed,
            final_train_loss: None,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn check_tap(&self, tap: usize) -> Result<()> {
        if tap > self.depth() {
            return Err(Error::InvalidTap {
                tap,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    /// Parameter tensors in checkpoint order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = vec![ParamKey::Embedding];
        for i in 0..self.depth() {
            keys.extend(BlockParam::ALL.iter().map(|&p| ParamKey::Block(i, p)));
        }
        keys.extend([ParamKey::FinalLnScale, ParamKey::FinalLnBias, ParamKey::Unembed]);
        keys
    }

    pub fn param(&self, key: ParamKey) -> ArrayViewD<'_, f64> {
        match key {
            ParamKey::Embedding => self.embedding.view().into_dyn(),
            ParamKey::Block(i, p) => {
                let b = &self.blocks[i];
                match p {
                    BlockParam::LnScale => b.ln_scale.view().into_dyn(),
                    BlockParam::LnBias => b.ln_bias.view().into_dyn(),
                    BlockParam::WIn => b.w_in.view().into_dyn(),
                    BlockParam::BIn => b.b_in.view().into_dyn(),
                    BlockParam::WOut => b.w_out.view().into_dyn(),
                    BlockParam::BOut => b.b_out.view().into_dyn(),
                }
            }
            ParamKey::FinalLnScale => self.final_ln_scale.view().into_dyn(),
            ParamKey::FinalLnBias => self.final_ln_bias.view().into_dyn(),
            ParamKey::Unembed => self.unembed.view().into_dyn(),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> ArrayViewMutD<'_, f64> {
        match key {
            ParamKey::Embedding => self.embedding.view_mut().into_dyn(),
            ParamKey::Block(i, p) => {
                let b = &mut self.blocks[i];
                match p {
                    BlockParam::LnScale => b.ln_scale.view_mut().into_dyn(),
                    BlockParam::LnBias => b.ln_bias.view_mut().into_dyn(),
                    BlockParam::WIn => b.w_in.view_mut().into_dyn(),
                    BlockParam::BIn => b.b_in.view_mut().into_dyn(),
                    BlockParam::WOut => b.w_out.view_mut().into_dyn(),
                    BlockParam::BOut => b.b_out.view_mut().into_dyn(),
                }
            }
            ParamKey::FinalLnScale => self.final_ln_scale.view_mut().into_dyn(),
            ParamKey::FinalLnBias => self.final_ln_bias.view_mut().into_dyn(),
            ParamKey::Unembed => self.unembed.view_mut().into_dyn(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_keys().iter().map(|&k| self.param(k).len()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), self.width()));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.embedding.row(t));
        }
        out
    }

    /// Residual stream at `tap` for a flat token list, one row per token.
    pub fn prefix_rows(&self, tap: usize, tokens: &[usize]) -> Result<Array2<f64>> {
        self.check_tap(tap)?;
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for block in &self.blocks[..tap] {
            x = block.forward(&x, self.config.activation);
        }
        Ok(x)
    }

    /// Logits from residual rows entering after `tap`.
    pub fn suffix_rows(&self, tap: usize, residual: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_tap(tap)?;
        if residual.ncols() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                found: residual.ncols(),
            });
        }
        let mut x = residual.to_owned();
        for block in &self.blocks[tap..] {
            x = block.forward(&x, self.config.activation);
        }
        let (normed, _) = layer_norm(x.view(), self.final_ln_scale.view(), self.final_ln_bias.view());
        Ok(normed.dot(&self.unembed))
    }

    /// `f_{<=tap}` on `(batch, seq)` tokens, giving `(batch, seq, width)`.
    pub fn forward_prefix(&self, tap: usize, tokens: ArrayView2<'_, usize>) -> Result<Array3<f64>> {
        let (b, s) = tokens.dim();
        let flat: Vec<usize> = tokens.iter().copied().collect();
        let rows = self.prefix_rows(tap, &flat)?;
        Ok(rows.into_shape_with_order((b, s, self.width())).expect("row count"))
    }

    /// `f_{>tap}` on `(batch, seq, width)` residuals, giving logits.
    pub fn forward_suffix(&self, tap: usize, residual: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (b, s, w) = residual.dim();
        let rows = residual.to_shape((b * s, w)).expect("contiguous");
        let logits = self.suffix_rows(tap, rows.view())?;
        Ok(logits.into_shape_with_order((b, s, self.vocab())).expect("row count"))
    }

    pub fn forward(&self, tokens: ArrayView2<'_, usize>) -> Result<Array3<f64>> {
        let x = self.forward_prefix(0, tokens)?;
        self.forward_suffix(0, x.view())
    }

    pub(crate) fn suffix_forward_cached(
        &self,
        tap: usize,
        residual: &Array2<f64>,
    ) -> Result<(Array2<f64>, SuffixCache, Vec<Array2<f64>>)> {
        self.check_tap(tap)?;
        if residual.ncols() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                found: residual.ncols(),
            });
        }
        let mut x = residual.clone();
        let mut caches = Vec::with_capacity(self.depth() - tap);
        let mut inputs = Vec::with_capacity(self.depth() - tap);
        for block in &self.blocks[tap..] {
            let (y, cache) = block.forward_cached(&x, self.config.activation);
            inputs.push(x);
            caches.push(cache);
            x = y;
        }
        let (final_out, final_ln) =
            layer_norm(x.view(), self.final_ln_scale.view(), self.final_ln_bias.view());
        let logits = final_out.dot(&self.unembed);
        Ok((
            logits,
            SuffixCache {
                blocks: caches,
                final_ln,
                final_out,
            },
            inputs,
        ))
    }

    /// Backpropagates `dlogits` through blocks `tap..`, returning the gradient
    /// at the suffix input and gradients for parameters in `mask`.
    pub(crate) fn suffix_backward(
        &self,
        tap: usize,
        cache: &SuffixCache,
        dlogits: &Array2<f64>,
        mask: &TrainableMask,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        if mask.contains(&ParamKey::Unembed) {
            grads.insert(ParamKey::Unembed, cache.final_out.t().dot(dlogits).into_dyn());
        }
        let d_final = dlogits.dot(&self.unembed.t());
        let (mut dx, d_scale, d_bias) =
            layer_norm_backward(&cache.final_ln, self.final_ln_scale.view(), d_final.view());
        if mask.contains(&ParamKey::FinalLnScale) {
            grads.insert(ParamKey::FinalLnScale, d_scale.into_dyn());
        }
        if mask.contains(&ParamKey::FinalLnBias) {
            grads.insert(ParamKey::FinalLnBias, d_bias.into_dyn());
        }
        for (offset, (block, bc)) in self.blocks[tap..].iter().zip(&cache.blocks).enumerate().rev() {
            let index = tap + offset;
            let want = BlockParam::ALL
                .iter()
                .any(|&p| mask.contains(&ParamKey::Block(index, p)));
            let (next, param_grads) = block.backward(bc, &dx, self.config.activation, want);
            if let Some(pg) = param_grads {
                for (p, g) in BlockParam::ALL.iter().zip(pg) {
                    let key = ParamKey::Block(index, *p);
                    if mask.contains(&key) {
                        grads.insert(key, g);
                    }
                }
            }
            dx = next;
        }
        dx
    }

    /// Mean cross-entropy and its gradients for the parameters in `mask`.
    ///
    /// `tokens` and `targets` are flat and of equal length.
    pub fn backward(&self, tokens: &[usize], targets: &[usize], mask: &TrainableMask) -> Result<(f64, Gradients)> {
        if tokens.len() != targets.len() || tokens.is_empty() {
            return Err(Error::Shape(format!(
                "{} tokens vs {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        self.check_tokens(tokens)?;
        self.check_tokens(targets)?;
        let x = self.embed(tokens);
        let (logits, cache, _) = self.suffix_forward_cached(0, &x)?;
        let (loss, dlogits) = mean_cross_entropy(&logits, targets);
        let mut grads = Gradients::new();
        if mask.is_empty() {
            return Ok((loss, grads));
        }
        let dx = self.suffix_backward(0, &cache, &dlogits, mask, &mut grads);
        if mask.contains(&ParamKey::Embedding) {
            let mut de = Array2::zeros(self.embedding.raw_dim());
            for (row, &t) in dx.rows().into_iter().zip(tokens) {
                let mut target = de.row_mut(t);
                target += &row;
            }
            grads.insert(ParamKey::Embedding, de.into_dyn());
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy and argmax accuracy for flat tokens.
    pub fn evaluate(&self, tokens: &[usize], targets: &[usize]) -> Result<(f64, f64)> {
        let x = self.prefix_rows(0, tokens)?;
        let logits = self.suffix_rows(0, x.view())?;
        Ok(loss_and_accuracy(&logits, targets))
    }

    /// Same function with the residual basis rotated by an orthogonal `q`
    /// satisfying `q 1 = 1`: the new model's residual at every tap is the
    /// old one times `q`, and its logits are unchanged up to rounding.
    ///
    /// LayerNorm gains are folded into the following weight matrix, so
    /// every gain must be nonzero.
    pub fn rotate_residual(&self, q: &Array2<f64>) -> Result<TinyModel> {
        let d = self.width();
        if q.dim() != (d, d) {
            return Err(Error::WidthMismatch {
                expected: d,
                found: q.nrows(),
            });
        }
        let fold = |scale: &Array1<f64>, bias: &Array1<f64>, w: &Array2<f64>| -> Result<_> {
            if scale.iter().any(|&s| s == 0.0) {
                return Err(Error::Degenerate("zero LayerNorm gain cannot be folded".into()));
            }
            // LN'(x q) = LN0(x) q + bias / scale q; W' = q^T diag(scale) W
            let scaled_w = w * &scale.view().insert_axis(Axis(1));
            let new_w = q.t().dot(&scaled_w);
            let new_bias = (bias / scale).dot(q);
            Ok((Array1::ones(d), new_bias, new_w))
        };
        let mut out = self.clone();
        out.embedding = self.embedding.dot(q);
        for (nb, b) in out.blocks.iter_mut().zip(&self.blocks) {
            let (s, bias, w_in) = fold(&b.ln_scale, &b.ln_bias, &b.w_in)?;
            nb.ln_scale = s;
            nb.ln_bias = bias;
            nb.w_in = w_in;
            nb.w_out = b.w_out.dot(q);
            nb.b_out = b.b_out.dot(q);
        }
        let (s, bias, u) = fold(&self.final_ln_scale, &self.final_ln_bias, &self.unembed)?;
        out.final_ln_scale = s;
        out.final_ln_bias = bias;
        out.unembed = u;
        Ok(out)
    }
}

/// Seeded random orthogonal `d x d` matrix that fixes the all-ones vector,
/// so it commutes with LayerNorm's mean subtraction.
pub fn mean_preserving_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // basis whose first column is 1/sqrt(d)
    let mut seed_cols = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));
    seed_cols.column_mut(0).fill(1.0);
    let basis = gram_schmidt(seed_cols);
    let inner = gram_schmidt(Array2::from_shape_fn((d - 1, d - 1), |_| normal.sample(&mut rng)));
    let mut block = Array2::zeros((d, d));
    block[[0, 0]] = 1.0;
    block.slice_mut(ndarray::s![1.., 1..]).assign(&inner);
    basis.dot(&block).dot(&basis.t())
}

/// Modified Gram-Schmidt on the columns.
fn gram_schmidt(mut a: Array2<f64>) -> Array2<f64> {
    for j in 0..a.ncols() {
        for k in 0..j {
            let proj = a.column(k).dot(&a.column(j));
            let qk = a.column(k).to_owned();
            a.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        a.column_mut(j).mapv_inplace(|v| v / norm);
    }
    a
}

/// Mean cross-entropy over rows and its gradient with respect to the logits.
pub(crate) fn mean_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let r = row.as_slice().expect("row-major logits");
        loss += cross_entropy(r, t);
        for (gv, v) in g.iter_mut().zip(cross_entropy_grad(r, t)) {
            *gv = v / n;
        }
    }
    (loss / n, grad)
}

pub(crate) fn loss_and_accuracy(logits: &Array2<f64>, targets: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let r = row.as_slice().expect("row-major logits");
        loss += cross_entropy(r, t);
        let argmax = r
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        correct += usize::from(argmax == t);
    }
    let n = targets.len() as f64;
    (loss / n, correct as f64 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2 as A2;

    fn config(activation: Activation) -> ModelConfig {
        ModelConfig {
            vocab: 7,
            width: 4,
            hidden: 6,
            depth: 2,
            activation,
        }
    }

    #[test]
    fn splice_identity_is_bitwise() {
        for act in [Activation::GeluApprox, Activation::Solu] {
            let m = TinyModel::new(config(act), 3).unwrap();
            let tokens = A2::from_shape_fn((2, 5), |(b, s)| (b * 5 + s) % 7);
            let full = m.forward(tokens.view()).unwrap();
            for tap in 0..=m.depth() {
                let r = m.forward_prefix(tap, tokens.view()).unwrap();
                assert_eq!(m.forward_suffix(tap, r.view()).unwrap(), full);
            }
            assert_eq!(m.forward(tokens.view()).unwrap(), full);
        }
    }

    #[test]
    fn tap_zero_is_embedding_lookup() {
        let m = TinyModel::new(config(Activation::GeluApprox), 1).unwrap();
        let tokens = A2::from_shape_vec((1, 3), vec![4, 0, 6]).unwrap();
        let r = m.forward_prefix(0, tokens.view()).unwrap();
        for (s, &t) in [4usize, 0, 6].iter().enumerate() {
            for k in 0..4 {
                assert_eq!(r[[0, s, k]], m.embedding[[t, k]]);
            }
        }
    }

    #[test]
    fn input_validation() {
        let m = TinyModel::new(config(Activation::GeluApprox), 1).unwrap();
        let bad = A2::from_elem((1, 2), 7usize);
        assert!(matches!(m.forward(bad.view()), Err(Error::TokenOutOfRange { token: 7, vocab: 7 })));
        assert!(matches!(m.forward_prefix(3, A2::zeros((1, 1)).view()), Err(Error::InvalidTap { .. })));
        let wide = Array3::zeros((1, 2, 5));
        assert!(matches!(m.forward_suffix(1, wide.view()), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn frozen_mask_yields_no_gradients() {
        let m = TinyModel::new(config(Activation::Solu), 2).unwrap();
        let (_, g) = m.backward(&[1, 2, 3], &[2, 3, 4], &TrainableMask::none()).unwrap();
        assert!(g.is_empty());
        let mask = TrainableMask::blocks_from(&m, 1);
        let (_, g) = m.backward(&[1, 2, 3], &[2, 3, 4], &mask).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.keys().all(|k| matches!(k, ParamKey::Block(1, _))));
    }

    #[test]
    fn single_token_unembed_gradient() {
        let m = TinyModel::new(config(Activation::GeluApprox), 5).unwrap();
        let mask = TrainableMask::from_keys([ParamKey::Unembed]);
        let (_, g) = m.backward(&[3], &[1], &mask).unwrap();
        let x = m.prefix_rows(m.depth(), &[3]).unwrap();
        let (normed, _) = layer_norm(x.view(), m.final_ln_scale.view(), m.final_ln_bias.view());
        let logits = normed.dot(&m.unembed);
        let delta = cross_entropy_grad(logits.row(0).as_slice().unwrap(), 1);
        let grad = &g[&ParamKey::Unembed];
        for i in 0..4 {
            for v in 0..7 {
                let expected = normed[[0, i]] * delta[v];
                assert!((grad[[i, v]] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn parameter_keys_cover_every_tensor() {
        let m = TinyModel::new(config(Activation::GeluApprox), 0).unwrap();
        let keys = m.param_keys();
        assert_eq!(keys.len(), 1 + 6 * 2 + 3);
        assert_eq!(m.parameter_count(), 7 * 4 + 2 * (4 + 4 + 24 + 6 + 24 + 4) + 4 + 4 + 28);
        assert_eq!(keys[1].name(), "blocks.0.ln_scale");
    }

    #[test]
    fn rotation_preserves_function() {
        let m = TinyModel::new(config(Activation::Solu), 9).unwrap();
        let mut m = m;
        m.blocks[0].ln_scale.mapv_inplace(|v| v * 1.3);
        m.final_ln_bias.fill(0.2);
        let q = mean_preserving_rotation(4, 4);
        let eye = q.t().dot(&q);
        for ((i, j), v) in eye.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        assert!(q.sum_axis(Axis(1)).iter().all(|v| (v - 1.0).abs() < 1e-12));
        let g = m.rotate_residual(&q).unwrap();
        let tokens = A2::from_shape_fn((2, 7), |(b, s)| (3 * b + s) % 7);
        let (lf, lg) = (m.forward(tokens.view()).unwrap(), g.forward(tokens.view()).unwrap());
        assert!((&lf - &lg).iter().all(|v| v.abs() < 1e-10));
        for tap in 0..=m.depth() {
            let rf = m.prefix_rows(tap, &[1, 5]).unwrap().dot(&q);
            let rg = g.prefix_rows(tap, &[1, 5]).unwrap();
            assert!((&rf - &rg).iter().all(|v| v.abs() < 1e-10));
        }
    }
}
