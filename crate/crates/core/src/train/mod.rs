//! Joint objective, AdaGrad and the epoch loop.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SessionExample;
use crate::error::{TensorError, TrainError};
use crate::graph::{Graph, Var};
use crate::model::{Armmt, ForwardOutput};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

pub use self::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

/// Floor applied inside every logarithm of the losses.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub adagrad_epsilon: f64,
    pub seed: u64,
    /// Divide the main loss by the list length instead of summing.
    #[serde(default)]
    pub main_loss_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.07,
            epochs: 20,
            batch_size: 128,
            lambda: 1.0,
            adagrad_epsilon: 1e-8,
            seed: 0,
            main_loss_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !positive(self.adagrad_epsilon) {
            return Err(TrainError::Config("adagrad epsilon must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TrainError::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_binary(labels: &[u8]) -> Result<(), TrainError> {
    if labels.iter().any(|&y| y > 1) {
        return Err(TrainError::Loss("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_lengths(labels: usize, preds: usize) -> Result<(), TrainError> {
    if labels != preds || labels == 0 {
        return Err(TrainError::Loss(format!(
            "{labels} labels for {preds} predictions"
        )));
    }
    Ok(())
}

/// `−Σ y_i ln ŷ_i` with the log argument clamped at [`LOG_CLAMP`].
pub fn main_loss(y: &[u8], y_hat: &[f64]) -> Result<f64, TrainError> {
    check_lengths(y.len(), y_hat.len())?;
    check_binary(y)?;
    if y.iter().filter(|&&v| v == 1).count() != 1 {
        return Err(TrainError::Loss("conversion labels must be one-hot".into()));
    }
    Ok(-y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| t as f64 * p.max(LOG_CLAMP).ln())
        .sum::<f64>())
}

/// Mean binary cross-entropy over the list.
pub fn aux_loss(y_ctr: &[u8], y_hat_ctr: &[f64]) -> Result<f64, TrainError> {
    check_lengths(y_ctr.len(), y_hat_ctr.len())?;
    check_binary(y_ctr)?;
    if let Some(p) = y_hat_ctr.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(TrainError::Loss(format!("click probability {p} outside [0, 1]")));
    }
    let n = y_ctr.len() as f64;
    let sum: f64 = y_ctr
        .iter()
        .zip(y_hat_ctr)
        .map(|(&t, &p)| {
            let t = t as f64;
            t * p.max(LOG_CLAMP).ln() + (1.0 - t) * (1.0 - p).max(LOG_CLAMP).ln()
        })
        .sum();
    Ok(-sum / n)
}

pub fn total_loss(main: f64, aux: f64, lambda: f64) -> f64 {
    main + lambda * aux
}

fn label_vector(labels: &[u8]) -> Tensor {
    Tensor::vector(labels.iter().map(|&v| v as f64).collect())
}

/// Graph form of [`main_loss`]; `mean` divides by the list length.
pub fn main_loss_graph(g: &mut Graph, y: &[u8], y_hat: Var, mean: bool) -> Result<Var, TrainError> {
    check_lengths(y.len(), g.value(y_hat).len())?;
    check_binary(y)?;
    if y.iter().filter(|&&v| v == 1).count() != 1 {
        return Err(TrainError::Loss("conversion labels must be one-hot".into()));
    }
    let t = g.constant(label_vector(y));
    let logp = g.ln_clamped(y_hat, LOG_CLAMP);
    let picked = g.mul(t, logp)?;
    let sum = g.sum_all(picked);
    let scale = if mean { -1.0 / y.len() as f64 } else { -1.0 };
    Ok(g.scale(sum, scale))
}

/// Graph form of [`aux_loss`].
pub fn aux_loss_graph(g: &mut Graph, y_ctr: &[u8], y_hat_ctr: Var) -> Result<Var, TrainError> {
    check_lengths(y_ctr.len(), g.value(y_hat_ctr).len())?;
    check_binary(y_ctr)?;
    let n = y_ctr.len() as f64;
    let t = label_vector(y_ctr);
    let not_t = t.map(|v| 1.0 - v);
    let t = g.constant(t);
    let not_t = g.constant(not_t);
    let log_p = g.ln_clamped(y_hat_ctr, LOG_CLAMP);
    let one_minus = g.affine(y_hat_ctr, -1.0, 1.0);
    let log_q = g.ln_clamped(one_minus, LOG_CLAMP);
    let a = g.mul(t, log_p)?;
    let b = g.mul(not_t, log_q)?;
    let both = g.add(a, b)?;
    let sum = g.sum_all(both);
    Ok(g.scale(sum, -1.0 / n))
}

/// The three loss nodes of one session.
#[derive(Debug, Clone, Copy)]
pub struct SessionLoss {
    pub main: Var,
    /// Absent when `λ = 0`, so the click head receives no gradient at all.
    pub aux: Option<Var>,
    pub total: Var,
}

/// Builds `L_main + λ·L_aux` for a forward pass.
pub fn session_loss(
    g: &mut Graph,
    session: &SessionExample,
    out: &ForwardOutput,
    lambda: f64,
    main_mean: bool,
) -> Result<SessionLoss, TrainError> {
    let main = main_loss_graph(g, &session.conversion_labels, out.y_hat, main_mean)?;
    if lambda == 0.0 {
        return Ok(SessionLoss {
            main,
            aux: None,
            total: main,
        });
    }
    let aux = aux_loss_graph(g, &session.click_labels, out.y_hat_ctr)?;
    let weighted = g.scale(aux, lambda);
    let total = g.add(main, weighted)?;
    Ok(SessionLoss {
        main,
        aux: Some(aux),
        total,
    })
}

/// `λ` actually used for `model`: only the full variant trains the click head.
pub fn effective_lambda(model: &Armmt, cfg: &TrainConfig) -> f64 {
    if model.variant.trains_aux() {
        cfg.lambda
    } else {
        0.0
    }
}

/// Loss value and parameter gradients of one session.
pub fn session_gradients(
    model: &Armmt,
    session: &SessionExample,
    lambda: f64,
    main_mean: bool,
) -> Result<(f64, Gradients), TrainError> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, session)?;
    let loss = session_loss(&mut g, session, &out, lambda, main_mean)?;
    let value = g.value(loss.total).item();
    let grads = g.backward(loss.total)?;
    Ok((value, grads))
}

/// One AdaGrad update over every parameter with a gradient:
/// `G += g²; p −= lr · g / (√G + ε)`.
pub fn adagrad_step(
    params: &mut ParamStore,
    grads: &Gradients,
    learning_rate: f64,
    epsilon: f64,
) -> Result<(), TensorError> {
    for (id, g) in grads.iter() {
        if id >= params.len() {
            return Err(TensorError::IndexOutOfRange {
                index: id,
                len: params.len(),
            });
        }
        let p = params.get_mut(id);
        if p.frozen {
            continue;
        }
        if g.shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adagrad_step",
                left: p.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let values = p.value.data_mut();
        let acc = p.accumulator.data_mut();
        for ((v, a), &gi) in values.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
            *a += gi * gi;
            *v -= learning_rate * gi / (a.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-session total loss over the epoch.
    pub loss: f64,
}

impl EpochLoss {
    /// `epoch,loss` log line.
    pub fn csv(&self) -> String {
        format!("{},{}", self.epoch, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLoss>,
    /// Optimizer steps taken, including those of earlier runs on the model.
    pub steps: u64,
}

fn first_non_finite(params: &ParamStore, grads: Option<&Gradients>) -> String {
    if let Some(p) = params.iter().find(|p| !p.value.all_finite()) {
        return p.name.clone();
    }
    if let Some(grads) = grads {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return params.get(id).name.clone();
        }
    }
    "<none: loss overflowed with finite parameters>".to_string()
}

/// Trains `model` in place. `on_epoch` is called after every epoch.
pub fn train_with<F: FnMut(&EpochLoss)>(
    model: &mut Armmt,
    sessions: &[SessionExample],
    cfg: &TrainConfig,
    start_step: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let lambda = effective_lambda(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut step = start_step;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut total = Gradients::empty(model.params.len());
            for &i in batch {
                let (loss, grads) = session_gradients(model, &sessions[i], lambda, cfg.main_loss_mean)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step: batch_index,
                        param: first_non_finite(&model.params, Some(&grads)),
                    });
                }
                epoch_sum += loss;
                total.accumulate(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            if total.iter().any(|(_, g)| !g.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: batch_index,
                    param: first_non_finite(&model.params, Some(&total)),
                });
            }
            adagrad_step(&mut model.params, &total, cfg.learning_rate, cfg.adagrad_epsilon)?;
            step += 1;
        }
        let entry = EpochLoss {
            epoch,
            loss: epoch_sum / sessions.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { epochs: log, steps: step })
}

pub fn train(
    model: &mut Armmt,
    sessions: &[SessionExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(model, sessions, cfg, 0, |_| {})
}
