use std::collections::BTreeMap;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    identity_stitch_eval, self_stitch_loss, train_stitch_with_baselines, ConnectorKind, StitchLayer, StitchReport,
    StitchSpec,
};
use crate::error::Result;
use crate::nn::{StepBatch, TinyModel, TrainRecipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SweepMode {
    Identity,
    Trained { recipe: TrainRecipe },
}

impl SweepMode {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMode::Identity => "identity",
            SweepMode::Trained { .. } => "trained",
        }
    }
}

/// Outcome for one `(l, m)` pair; failures are kept, not propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub l: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<StitchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    F,
    G,
}

/// Stitches `f` into `g` at every pair in `pairs`, in parallel.
///
/// In trained mode each distinct self-stitch baseline is trained once and
/// shared across pairs. Entries come back in `pairs` order.
pub fn stitch_sweep(
    f: &TinyModel,
    g: &TinyModel,
    pairs: &[(usize, usize)],
    mode: &SweepMode,
    batches: &(dyn Fn(usize) -> StepBatch + Sync),
    eval: &StepBatch,
) -> Vec<SweepEntry> {
    let entry = |l: usize, m: usize, r: Result<StitchReport>| match r {
        Ok(report) => SweepEntry {
            l,
            m,
            report: Some(report),
            error: None,
        },
        Err(e) => SweepEntry {
            l,
            m,
            report: None,
            error: Some(e.to_string()),
        },
    };
    match mode {
        SweepMode::Identity => pairs
            .par_iter()
            .map(|&(l, m)| entry(l, m, identity_stitch_eval(f, g, l, m, eval)))
            .collect(),
        SweepMode::Trained { recipe } => {
            let same = std::ptr::eq(f, g) || f == g;
            let side_g = if same { Side::F } else { Side::G };
            let mut needed: Vec<(Side, usize)> = pairs
                .iter()
                .flat_map(|&(l, m)| [(Side::F, l), (side_g, m)])
                .collect();
            needed.sort_unstable();
            needed.dedup();
            let model_of = |s: Side| if s == Side::F { f } else { g };
            let spec_for = |l: usize, m: usize| StitchSpec {
                f,
                g,
                l,
                m,
                connector: StitchLayer::initial(ConnectorKind::AffineLn, f.width(), g.width()),
                recipe: recipe.clone(),
            };
            let baselines: BTreeMap<(Side, usize), std::result::Result<f64, String>> = needed
                .par_iter()
                .map(|&(side, tap)| {
                    let model = model_of(side);
                    let probe = StitchSpec {
                        f: model,
                        g: model,
                        l: tap,
                        m: tap,
                        connector: StitchLayer::initial(ConnectorKind::AffineLn, model.width(), model.width()),
                        recipe: recipe.clone(),
                    };
                    let loss = model
                        .check_tap(tap)
                        .and_then(|_| self_stitch_loss(&probe, model, tap, batches, eval))
                        .map_err(|e| e.to_string());
                    ((side, tap), loss)
                })
                .collect();
            pairs
                .par_iter()
                .map(|&(l, m)| {
                    let self_f = baselines[&(Side::F, l)].clone();
                    let self_g = baselines[&(side_g, m)].clone();
                    match (self_f, self_g) {
                        (Ok(a), Ok(b)) => entry(l, m, train_stitch_with_baselines(&spec_for(l, m), batches, eval, (a, b))),
                        (Err(e), _) | (_, Err(e)) => SweepEntry {
                            l,
                            m,
                            report: None,
                            error: Some(format!("self-stitch baseline failed: {e}")),
                        },
                    }
                })
                .collect()
        }
    }
}

/// One CSV row per entry; failed pairs leave the numeric columns empty.
pub fn sweep_csv(mode: &SweepMode, entries: &[SweepEntry]) -> String {
    let mut out = String::from(
        "l,m,mode,stitched_loss,f_loss,g_loss,self_f_loss,self_g_loss,penalty,stitched_accuracy,accuracy_delta,error\n",
    );
    for e in entries {
        match &e.report {
            Some(r) => {
                let b = &r.baselines;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},",
                    e.l,
                    e.m,
                    mode.name(),
                    r.stitched_loss,
                    b.f,
                    b.g,
                    b.self_f,
                    b.self_g,
                    r.penalty,
                    r.stitched_accuracy,
                    r.accuracy_delta
                )
                .expect("string write");
            }
            None => {
                let msg = e.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
                writeln!(out, "{},{},{},,,,,,,,,\"{}\"", e.l, e.m, mode.name(), msg).expect("string write");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelConfig};

    fn model(seed: u64) -> TinyModel {
        TinyModel::new(
            ModelConfig {
                vocab: 5,
                width: 4,
                hidden: 6,
                depth: 2,
                activation: Activation::Solu,
            },
            seed,
        )
        .unwrap()
    }

    fn eval() -> StepBatch {
        let tokens: Vec<usize> = (0..20).map(|i| (i * 3) % 5).collect();
        let targets = tokens.iter().map(|t| (t + 2) % 5).collect();
        StepBatch { tokens, targets }
    }

    #[test]
    fn identity_self_sweep_is_zero_and_reports_failures() {
        let f = model(1);
        let pairs = [(0, 0), (1, 1), (2, 2), (3, 3)];
        let batches = |_: usize| eval();
        let out = stitch_sweep(&f, &f, &pairs, &SweepMode::Identity, &batches, &eval());
        for e in &out[..3] {
            assert_eq!(e.report.as_ref().unwrap().penalty, 0.0);
        }
        assert!(out[3].error.is_some());
        let csv = sweep_csv(&SweepMode::Identity, &out);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn order_does_not_change_results() {
        let (f, g) = (model(1), model(2));
        let mut recipe = TrainRecipe::stitching(0);
        recipe.steps = 5;
        recipe.warmup_steps = 5;
        recipe.learning_rate = 0.1;
        let mode = SweepMode::Trained { recipe };
        let batches = |_: usize| eval();
        let fwd = stitch_sweep(&f, &g, &[(0, 1), (2, 0)], &mode, &batches, &eval());
        let rev = stitch_sweep(&f, &g, &[(2, 0), (0, 1)], &mode, &batches, &eval());
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert_eq!(fwd[0].report.as_ref().unwrap().curve.len(), 5);
    }
}
