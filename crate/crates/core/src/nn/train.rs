use super::model::{TinyModel, TrainableMask};
use super::optim::{sgd_nesterov_step, TrainRecipe, Velocity};
use crate::error::{Error, Result};

/// Flat tokens and their targets for one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Runs `recipe.steps` optimizer steps on the parameters in `mask`, drawing
/// the batch for step `i` from `batch(i)`. Returns the per-step loss.
pub fn train_masked(
    model: &mut TinyModel,
    mask: &TrainableMask,
    recipe: &TrainRecipe,
    mut batch: impl FnMut(usize) -> StepBatch,
) -> Result<Vec<f64>> {
    recipe.validate()?;
    let mut velocity = Velocity::new();
    let mut curve = Vec::with_capacity(recipe.steps);
    for step in 0..recipe.steps {
        let b = batch(step);
        let (loss, grads) = model.backward(&b.tokens, &b.targets, mask)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        curve.push(loss);
        for &key in mask.keys() {
            sgd_nesterov_step([(key, model.param_mut(key))], &grads, &mut velocity, recipe, step)?;
        }
    }
    Ok(curve)
}
