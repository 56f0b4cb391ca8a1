//! Brute-force leave-one-out retraining.

use rayon::prelude::*;

use super::data::ToyDataset;
use super::model::{mean_loss, ToyModel};
use super::train::{train, TrainConfig};
use crate::error::Result;

/// Generic leave-one-out driver.
///
/// `val_loss(None)` must return the validation loss of the model fitted on
/// every example, `val_loss(Some(i))` the loss with example `i` removed.
/// Returns `(id, val_loss(Some(i)) − val_loss(None))` sorted by id. The
/// removals run in parallel; the result does not depend on the worker count.
pub fn leave_one_out<F>(ids: &[String], val_loss: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(Option<usize>) -> Result<f64> + Sync,
{
    let full = val_loss(None)?;
    let mut deltas: Vec<(String, f64)> = (0..ids.len())
        .into_par_iter()
        .map(|i| val_loss(Some(i)).map(|l| (ids[i].clone(), l - full)))
        .collect::<Result<_>>()?;
    deltas.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(deltas)
}

/// Retrains from `base_model` once per training example with that example
/// removed and reports `loss(val; without z) − loss(val; full)`.
///
/// A positive delta means removing `z` hurt, i.e. `z` is a proponent.
pub fn loo_oracle(
    data: &ToyDataset,
    val: &ToyDataset,
    cfg: &TrainConfig,
    base_model: &ToyModel,
) -> Result<Vec<(String, f64)>> {
    let ids = data.ids();
    leave_one_out(&ids, |excluded| {
        let subset = match excluded {
            Some(i) => data.without(&ids[i]),
            None => data.clone(),
        };
        let model = train(base_model, &subset, cfg)?;
        mean_loss(&model, val)
    })
}
