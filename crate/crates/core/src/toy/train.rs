use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use nalgebra::{DMatrix, DVector};

use super::model::{loss_hessian, mean_loss_and_grad, ToyModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seeds the model initialisation when the trainer builds one.
    pub seed: u64,
    /// Weight decay on the adapters; also the Hessian damping at the optimum.
    pub l2_damping: f64,
    /// Backtrack (Armijo) from `learning_rate` whenever a step fails to
    /// decrease the objective enough. Plain fixed-step descent otherwise.
    pub line_search: bool,
    /// Stop once the objective's gradient norm falls below this. Zero runs
    /// every epoch.
    pub tolerance: f64,
    /// Damped Newton iterations run after the descent epochs to land on the
    /// stationary point. Zero disables.
    pub newton_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 2000, seed: 0, l2_damping: 0.01, line_search: false, tolerance: 0.0, newton_steps: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.l2_damping >= 0.0) {
            return Err(Error::InvalidArgument("l2_damping must be >= 0".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Objective values observed while training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Regularised objective before each epoch's update, plus the final value
    /// when every epoch ran.
    pub objective: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Norm of the gradient of the regularised objective at the returned parameters.
    pub final_grad_norm: f64,
}

/// Mean loss plus `(λ/2)·‖θ‖²` and its gradient.
pub fn objective_and_grad(model: &ToyModel, data: &ToyDataset, l2: f64) -> (f64, f64, Vec<f64>) {
    let (loss, mut grad) = mean_loss_and_grad(model, data);
    let theta = model.params();
    let sq: f64 = theta.iter().map(|t| t * t).sum();
    grad.iter_mut().zip(&theta).for_each(|(g, t)| *g += l2 * t);
    (loss, loss + 0.5 * l2 * sq, grad)
}

/// Full-batch gradient descent on the regularised mean loss. Only the adapters move.
pub fn train(model: &ToyModel, data: &ToyDataset, cfg: &TrainConfig) -> Result<ToyModel> {
    train_with_trace(model, data, cfg).map(|(m, _)| m)
}

pub fn train_with_trace(model: &ToyModel, data: &ToyDataset, cfg: &TrainConfig) -> Result<(ToyModel, TrainTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    model.check_shape(data)?;
    let mut current = model.clone();
    let mut theta = current.params();
    let mut trace = TrainTrace { objective: Vec::with_capacity(cfg.epochs + 1), ..TrainTrace::default() };
    let (mut loss, mut objective, mut grad) = objective_and_grad(&current, data, cfg.l2_damping);
    trace.initial_loss = loss;
    let mut step = cfg.learning_rate;
    let mut stopped = false;
    for epoch in 0..cfg.epochs {
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, loss: objective });
        }
        trace.objective.push(objective);
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        if sq.sqrt() < cfg.tolerance || step == 0.0 {
            stopped = true;
            break;
        }
        loop {
            let candidate: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            if candidate.iter().any(|t| !t.is_finite()) && !cfg.line_search {
                return Err(Error::Divergence { epoch, loss: f64::INFINITY });
            }
            let mut next = current.clone();
            next.set_params(&candidate);
            let (l, o, g) = objective_and_grad(&next, data, cfg.l2_damping);
            // Armijo sufficient decrease
            let accepted = !cfg.line_search || (o.is_finite() && o <= objective - 1e-4 * step * sq);
            if accepted {
                (current, theta, loss, objective, grad) = (next, candidate, l, o, g);
                if cfg.line_search {
                    step = (step * 1.25).min(cfg.learning_rate);
                }
                break;
            }
            step *= 0.5;
            if step < 1e-12 * cfg.learning_rate {
                // no descent direction left at machine precision
                step = 0.0;
                break;
            }
        }
    }
    if !objective.is_finite() {
        return Err(Error::Divergence { epoch: cfg.epochs, loss: objective });
    }
    if !stopped {
        trace.objective.push(objective);
    }
    for _ in 0..cfg.newton_steps {
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < cfg.tolerance {
            break;
        }
        match newton_step(&current, data, cfg.l2_damping, objective, &grad)? {
            Some((next, l, o, g)) => {
                (current, loss, objective, grad) = (next, l, o, g);
                trace.objective.push(objective);
            }
            None => break,
        }
    }
    trace.final_loss = loss;
    trace.final_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((current, trace))
}

/// One Levenberg–Marquardt damped Newton step on the regularised objective,
/// halved until the objective does not increase. `None` when no step helps.
fn newton_step(
    model: &ToyModel,
    data: &ToyDataset,
    l2: f64,
    objective: f64,
    grad: &[f64],
) -> Result<Option<(ToyModel, f64, f64, Vec<f64>)>> {
    let p = grad.len();
    let h = loss_hessian(model, data, 1e-5)?;
    let theta = model.params();
    let rhs = DVector::from_column_slice(grad);
    let mut mu = 0.0;
    let direction = loop {
        let mut m = DMatrix::from_row_slice(p, p, &h);
        for i in 0..p {
            m[(i, i)] += l2 + mu;
        }
        if let Some(ch) = m.cholesky() {
            break ch.solve(&rhs);
        }
        mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
        if mu > 1e6 {
            return Ok(None);
        }
    };
    let mut scale = 1.0;
    while scale > 1e-6 {
        let candidate: Vec<f64> = theta.iter().zip(direction.iter()).map(|(t, d)| t - scale * d).collect();
        let mut next = model.clone();
        next.set_params(&candidate);
        let (l, o, g) = objective_and_grad(&next, data, l2);
        if o.is_finite() && o <= objective {
            return Ok(Some((next, l, o, g)));
        }
        scale *= 0.5;
    }
    Ok(None)
}
