//! Stitched models `g_{>m} ∘ φ ∘ f_{≤l}` and connector training.

mod sweep;

pub use sweep::{stitch_sweep, sweep_csv, SweepEntry, SweepMode};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{loss_and_accuracy, mean_cross_entropy};
use crate::nn::ops::{layer_norm, layer_norm_backward, LnCache};
use crate::nn::{sgd_nesterov_step, StepBatch, TinyModel, TrainRecipe, TrainableMask, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    Identity,
    AffineLn,
}

/// Tokenwise connector between two residual streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StitchLayer {
    Identity,
    /// `LayerNorm(x) W + b`, with `W` of shape `(d_f, d_g)`.
    AffineLn {
        ln_scale: Vec<f64>,
        ln_bias: Vec<f64>,
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ConnectorParam {
    LnScale,
    LnBias,
    Weight,
    Bias,
}

/// Dense form of the affine connector used during training.
struct Affine {
    ln_scale: Array1<f64>,
    ln_bias: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Affine {
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache, Array2<f64>) {
        let (normed, cache) = layer_norm(x.view(), self.ln_scale.view(), self.ln_bias.view());
        let y = normed.dot(&self.weight) + &self.bias;
        (y, cache, normed)
    }

    fn grads(&self, cache: &LnCache, normed: &Array2<f64>, dy: &Array2<f64>) -> BTreeMap<ConnectorParam, ArrayD<f64>> {
        let d_norm = dy.dot(&self.weight.t());
        let (_, d_scale, d_bias) = layer_norm_backward(cache, self.ln_scale.view(), d_norm.view());
        BTreeMap::from([
            (ConnectorParam::LnScale, d_scale.into_dyn()),
            (ConnectorParam::LnBias, d_bias.into_dyn()),
            (ConnectorParam::Weight, normed.t().dot(dy).into_dyn()),
            (ConnectorParam::Bias, dy.sum_axis(Axis(0)).into_dyn()),
        ])
    }
}

impl StitchLayer {
    /// LayerNorm with unit scale and zero bias, identity weight (truncated
    /// or zero-padded when widths differ) and zero bias.
    pub fn affine_ln(d_f: usize, d_g: usize) -> StitchLayer {
        StitchLayer::AffineLn {
            ln_scale: vec![1.0; d_f],
            ln_bias: vec![0.0; d_f],
            weight: (0..d_f)
                .map(|i| (0..d_g).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            bias: vec![0.0; d_g],
        }
    }

    pub fn initial(kind: ConnectorKind, d_f: usize, d_g: usize) -> StitchLayer {
        match kind {
            ConnectorKind::Identity => StitchLayer::Identity,
            ConnectorKind::AffineLn => StitchLayer::affine_ln(d_f, d_g),
        }
    }

    pub fn kind(&self) -> ConnectorKind {
        match self {
            StitchLayer::Identity => ConnectorKind::Identity,
            StitchLayer::AffineLn { .. } => ConnectorKind::AffineLn,
        }
    }

    /// `(d_f, d_g)` for the affine form.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            StitchLayer::Identity => None,
            StitchLayer::AffineLn { weight, bias, .. } => Some((weight.len(), bias.len())),
        }
    }

    fn check(&self, d_f: usize, d_g: usize) -> Result<()> {
        match self {
            StitchLayer::Identity if d_f != d_g => Err(Error::WidthMismatch {
                expected: d_f,
                found: d_g,
            }),
            StitchLayer::Identity => Ok(()),
            StitchLayer::AffineLn {
                ln_scale,
                ln_bias,
                weight,
                bias,
            } => {
                let ok = ln_scale.len() == d_f
                    && ln_bias.len() == d_f
                    && weight.len() == d_f
                    && weight.iter().all(|r| r.len() == d_g)
                    && bias.len() == d_g;
                if !ok {
                    return Err(Error::Shape(format!(
                        "connector does not map width {d_f} to width {d_g}"
                    )));
                }
                let finite = ln_scale
                    .iter()
                    .chain(ln_bias)
                    .chain(weight.iter().flatten())
                    .chain(bias)
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(Error::NonFinite("connector parameters".into()));
                }
                Ok(())
            }
        }
    }

    fn dense(&self) -> Option<Affine> {
        match self {
            StitchLayer::Identity => None,
            StitchLayer::AffineLn {
                ln_scale,
                ln_bias,
                weight,
                bias,
            } => {
                let (rows, cols) = (weight.len(), bias.len());
                Some(Affine {
                    ln_scale: Array1::from(ln_scale.clone()),
                    ln_bias: Array1::from(ln_bias.clone()),
                    weight: Array2::from_shape_fn((rows, cols), |(i, j)| weight[i][j]),
                    bias: Array1::from(bias.clone()),
                })
            }
        }
    }

    fn from_dense(a: &Affine) -> StitchLayer {
        StitchLayer::AffineLn {
            ln_scale: a.ln_scale.to_vec(),
            ln_bias: a.ln_bias.to_vec(),
            weight: a.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: a.bias.to_vec(),
        }
    }

    /// Applies the connector to residual rows.
    pub fn apply(&self, x: Array2<f64>) -> Array2<f64> {
        match self.dense() {
            None => x,
            Some(a) => a.forward(&x).0,
        }
    }
}

/// What to stitch: layer `l` of `f` into layer `m` of `g`.
#[derive(Debug, Clone)]
pub struct StitchSpec<'a> {
    pub f: &'a TinyModel,
    pub g: &'a TinyModel,
    pub l: usize,
    pub m: usize,
    pub connector: StitchLayer,
    pub recipe: TrainRecipe,
}

impl StitchSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        self.f.check_tap(self.l)?;
        self.g.check_tap(self.m)?;
        if self.f.vocab() != self.g.vocab() {
            return Err(Error::Config(format!(
                "vocabularies differ: {} vs {}",
                self.f.vocab(),
                self.g.vocab()
            )));
        }
        self.connector.check(self.f.width(), self.g.width())
    }
}

/// A stitched network ready for evaluation.
#[derive(Debug, Clone)]
pub struct StitchedModel<'a> {
    f: &'a TinyModel,
    g: &'a TinyModel,
    l: usize,
    m: usize,
    connector: StitchLayer,
}

pub fn build_stitched<'a>(spec: &StitchSpec<'a>) -> Result<StitchedModel<'a>> {
    spec.validate()?;
    Ok(StitchedModel {
        f: spec.f,
        g: spec.g,
        l: spec.l,
        m: spec.m,
        connector: spec.connector.clone(),
    })
}

impl StitchedModel<'_> {
    pub fn connector(&self) -> &StitchLayer {
        &self.connector
    }

    /// Logits for flat tokens, one row per token.
    pub fn logits(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let x = self.f.prefix_rows(self.l, tokens)?;
        let y = self.connector.apply(x);
        self.g.suffix_rows(self.m, y.view())
    }

    /// Logits for `(batch, seq)` tokens.
    pub fn forward(&self, tokens: ndarray::ArrayView2<'_, usize>) -> Result<ndarray::Array3<f64>> {
        let (b, s) = tokens.dim();
        let flat: Vec<usize> = tokens.iter().copied().collect();
        let logits = self.logits(&flat)?;
        Ok(logits
            .into_shape_with_order((b, s, self.g.vocab()))
            .expect("row count"))
    }

    /// Token-level mean cross-entropy and accuracy.
    pub fn evaluate(&self, eval: &StepBatch) -> Result<(f64, f64)> {
        let logits = self.logits(&eval.tokens)?;
        Ok(loss_and_accuracy(&logits, &eval.targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub f: f64,
    pub g: f64,
    pub self_f: f64,
    pub self_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub l: usize,
    pub m: usize,
    pub connector: ConnectorKind,
    pub trained: bool,
    pub f_seed: u64,
    pub g_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<TrainRecipe>,
    pub stitched_loss: f64,
    pub stitched_accuracy: f64,
    pub baselines: Baselines,
    pub f_accuracy: f64,
    pub g_accuracy: f64,
    /// Stitched loss minus the lower of the two donor losses.
    pub penalty: f64,
    /// Stitched accuracy minus the higher of the two donor accuracies.
    pub accuracy_delta: f64,
    pub curve: Vec<f64>,
}

fn model_eval(model: &TinyModel, eval: &StepBatch) -> Result<(f64, f64)> {
    model.evaluate(&eval.tokens, &eval.targets)
}

/// Trains the connector of `spec` and returns it with the per-step loss.
/// `f` and `g` are only read.
pub fn train_connector(
    spec: &StitchSpec<'_>,
    batches: &dyn Fn(usize) -> StepBatch,
) -> Result<(StitchLayer, Vec<f64>)> {
    spec.validate()?;
    spec.recipe.validate()?;
    let Some(mut affine) = spec.connector.dense() else {
        return Err(Error::Config("identity connector has no parameters to train".into()));
    };
    let mut velocity: Velocity<ConnectorParam> = Velocity::new();
    let mut curve = Vec::with_capacity(spec.recipe.steps);
    let frozen = TrainableMask::none();
    for step in 0..spec.recipe.steps {
        let b = batches(step);
        let x = spec.f.prefix_rows(spec.l, &b.tokens)?;
        let (y, ln_cache, normed) = affine.forward(&x);
        let (logits, cache, _) = spec.g.suffix_forward_cached(spec.m, &y)?;
        let (loss, dlogits) = mean_cross_entropy(&logits, &b.targets);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        curve.push(loss);
        let mut unused = BTreeMap::new();
        let dy = spec.g.suffix_backward(spec.m, &cache, &dlogits, &frozen, &mut unused);
        let grads = affine.grads(&ln_cache, &normed, &dy);
        let Affine {
            ln_scale,
            ln_bias,
            weight,
            bias,
        } = &mut affine;
        let params = [
            (ConnectorParam::LnScale, ln_scale.view_mut().into_dyn()),
            (ConnectorParam::LnBias, ln_bias.view_mut().into_dyn()),
            (ConnectorParam::Weight, weight.view_mut().into_dyn()),
            (ConnectorParam::Bias, bias.view_mut().into_dyn()),
        ];
        sgd_nesterov_step(params, &grads, &mut velocity, &spec.recipe, step)?;
    }
    Ok((StitchLayer::from_dense(&affine), curve))
}

/// Loss of a stitched model on `eval` plus its accuracy.
fn stitched_eval(spec: &StitchSpec<'_>, connector: StitchLayer, eval: &StepBatch) -> Result<(f64, f64)> {
    let s = StitchSpec {
        connector,
        ..spec.clone()
    };
    build_stitched(&s)?.evaluate(eval)
}

/// Self-stitch loss of `model` at `tap`: the same connector initialisation
/// and recipe as `spec`, trained from `model` into itself.
pub fn self_stitch_loss(
    spec: &StitchSpec<'_>,
    model: &TinyModel,
    tap: usize,
    batches: &dyn Fn(usize) -> StepBatch,
    eval: &StepBatch,
) -> Result<f64> {
    let (d_f, d_g) = (model.width(), model.width());
    let s = StitchSpec {
        f: model,
        g: model,
        l: tap,
        m: tap,
        connector: StitchLayer::initial(spec.connector.kind(), d_f, d_g),
        recipe: spec.recipe.clone(),
    };
    let (trained, _) = train_connector(&s, batches)?;
    Ok(stitched_eval(&s, trained, eval)?.0)
}

fn assemble(
    spec: &StitchSpec<'_>,
    trained: bool,
    stitched: (f64, f64),
    self_losses: (f64, f64),
    curve: Vec<f64>,
    eval: &StepBatch,
) -> Result<StitchReport> {
    let (f_loss, f_acc) = model_eval(spec.f, eval)?;
    let (g_loss, g_acc) = model_eval(spec.g, eval)?;
    Ok(StitchReport {
        l: spec.l,
        m: spec.m,
        connector: spec.connector.kind(),
        trained,
        f_seed: spec.f.seed,
        g_seed: spec.g.seed,
        recipe: trained.then(|| spec.recipe.clone()),
        stitched_loss: stitched.0,
        stitched_accuracy: stitched.1,
        baselines: Baselines {
            f: f_loss,
            g: g_loss,
            self_f: self_losses.0,
            self_g: self_losses.1,
        },
        f_accuracy: f_acc,
        g_accuracy: g_acc,
        penalty: stitched.0 - f_loss.min(g_loss),
        accuracy_delta: stitched.1 - f_acc.max(g_acc),
        curve,
    })
}

/// Trains the connector with `batches`, evaluates on `eval` and fills in all
/// four baselines, training the two self-stitches with the same recipe.
pub fn train_stitch(
    spec: &StitchSpec<'_>,
    batches: &dyn Fn(usize) -> StepBatch,
    eval: &StepBatch,
) -> Result<StitchReport> {
    let self_f = self_stitch_loss(spec, spec.f, spec.l, batches, eval)?;
    let self_g = self_stitch_loss(spec, spec.g, spec.m, batches, eval)?;
    train_stitch_with_baselines(spec, batches, eval, (self_f, self_g))
}

/// [`train_stitch`] with precomputed self-stitch losses for `f` and `g`.
pub fn train_stitch_with_baselines(
    spec: &StitchSpec<'_>,
    batches: &dyn Fn(usize) -> StepBatch,
    eval: &StepBatch,
    self_losses: (f64, f64),
) -> Result<StitchReport> {
    let (connector, curve) = train_connector(spec, batches)?;
    let stitched = stitched_eval(spec, connector, eval)?;
    assemble(spec, true, stitched, self_losses, curve, eval)
}

/// Evaluates `g_{>m} ∘ f_{≤l}` without a connector. Identity self-stitches
/// are the models themselves, so the self baselines equal the donor losses.
pub fn identity_stitch_eval(
    f: &TinyModel,
    g: &TinyModel,
    l: usize,
    m: usize,
    eval: &StepBatch,
) -> Result<StitchReport> {
    let spec = StitchSpec {
        f,
        g,
        l,
        m,
        connector: StitchLayer::Identity,
        recipe: TrainRecipe::stitching(0),
    };
    let stitched = build_stitched(&spec)?.evaluate(eval)?;
    let f_loss = model_eval(f, eval)?.0;
    let g_loss = model_eval(g, eval)?.0;
    assemble(&spec, false, stitched, (f_loss, g_loss), Vec::new(), eval)
}
