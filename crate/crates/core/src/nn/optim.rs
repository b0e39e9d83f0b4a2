use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainRecipe {
    /// 2000 steps, 200 warmup, lr 1.0, Nesterov momentum 0.9.
    pub fn stitching(seed: u64) -> Self {
        TrainRecipe {
            steps: 2000,
            warmup_steps: 200,
            learning_rate: 1.0,
            momentum: 0.9,
            nesterov: true,
            seed,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Linear warmup: `lr * min(1, (step + 1) / warmup)`.
    pub fn effective_lr(&self, step_index: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let ramp = (step_index + 1) as f64 / self.warmup_steps as f64;
        self.learning_rate * ramp.min(1.0)
    }
}

/// Momentum buffers keyed like the parameters they belong to.
pub type Velocity<K> = BTreeMap<K, ArrayD<f64>>;

/// One SGD step with (Nesterov) momentum.
///
/// `v <- mu v + g`, then `w <- w - lr (g + mu v)` with Nesterov or
/// `w <- w - lr v` without. Parameters absent from `grads` are untouched.
pub fn sgd_nesterov_step<'a, K: Ord + Clone + std::fmt::Debug>(
    params: impl IntoIterator<Item = (K, ArrayViewMutD<'a, f64>)>,
    grads: &BTreeMap<K, ArrayD<f64>>,
    velocity: &mut Velocity<K>,
    recipe: &TrainRecipe,
    step_index: usize,
) -> Result<()> {
    let lr = recipe.effective_lr(step_index);
    let mu = recipe.momentum;
    for (key, mut w) in params {
        let Some(g) = grads.get(&key) else { continue };
        if g.shape() != w.shape() {
            return Err(Error::Shape(format!(
                "gradient for {key:?} has shape {:?}, parameter {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let v = velocity
            .entry(key.clone())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        if v.shape() != g.shape() {
            return Err(Error::Shape(format!("velocity for {key:?} has shape {:?}", v.shape())));
        }
        Zip::from(&mut w).and(v).and(g).for_each(|w, v, &g| {
            *v = mu * *v + g;
            let update = if recipe.nesterov { g + mu * *v } else { *v };
            *w -= lr * update;
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn recipe(momentum: f64, warmup: usize) -> TrainRecipe {
        TrainRecipe {
            steps: 1000,
            warmup_steps: warmup,
            learning_rate: 1.0,
            momentum,
            nesterov: true,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }

    fn step(w: &mut ArrayD<f64>, g: &ArrayD<f64>, v: &mut Velocity<u8>, r: &TrainRecipe, i: usize) {
        let grads = BTreeMap::from([(0u8, g.clone())]);
        sgd_nesterov_step([(0u8, w.view_mut())], &grads, v, r, i).unwrap();
    }

    #[test]
    fn plain_gradient_step() {
        let mut w = arr1(&[1.0, 2.0]).into_dyn();
        let g = arr1(&[0.5, -1.0]).into_dyn();
        step(&mut w, &g, &mut Velocity::new(), &recipe(0.0, 0), 0);
        assert_eq!(w, arr1(&[0.5, 3.0]).into_dyn());
    }

    #[test]
    fn warmup_ramp() {
        let r = recipe(0.9, 200);
        assert_eq!(r.effective_lr(99), 0.5);
        assert_eq!(r.effective_lr(199), 1.0);
        assert_eq!(r.effective_lr(200), 1.0);
        assert_eq!(r.effective_lr(0), 1.0 / 200.0);
    }

    #[test]
    fn two_nesterov_steps_by_hand() {
        let (mu, gv) = (0.9, 0.3);
        let mut w = arr1(&[1.0]).into_dyn();
        let g = arr1(&[gv]).into_dyn();
        let mut v = Velocity::new();
        let r = recipe(mu, 0);
        step(&mut w, &g, &mut v, &r, 0);
        step(&mut w, &g, &mut v, &r, 1);
        // v1 = g, w1 = 1 - (g + mu g); v2 = mu g + g, w2 = w1 - (g + mu v2)
        let w1 = 1.0 - (gv + mu * gv);
        let v2 = mu * gv + gv;
        let w2 = w1 - (gv + mu * v2);
        assert!((w[[0]] - w2).abs() < 1e-15);
        assert!((v[&0][[0]] - v2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_and_validation() {
        let mut w = arr1(&[1.0, 2.0]).into_dyn();
        let grads = BTreeMap::from([(0u8, arr1(&[1.0]).into_dyn())]);
        let r = recipe(0.9, 0);
        assert!(sgd_nesterov_step([(0u8, w.view_mut())], &grads, &mut Velocity::new(), &r, 0).is_err());
        let mut bad = recipe(0.9, 0);
        bad.warmup_steps = 2000;
        assert!(bad.validate().is_err());
        bad = recipe(0.9, 0);
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        assert!(TrainRecipe::stitching(1).validate().is_ok());
    }
}
