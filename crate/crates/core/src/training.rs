//! Optimizers and the training loop: at the start of each epoch one
//! full-dataset step that lowers pairwise bit mutual information (the
//! "shuffle"), then minibatch steps on `L_sim + α·L_reg`.

use crate::encoder::{backward_linear, backward_straight_through, Gradients, HashModel};
use crate::error::{Error, Result};
use crate::mutual_info::{estimate_stats, mi_gradient, mi_loss};
use crate::objectives::combined_loss;
use crate::retrieval::distinct_codes;
use crate::tensor::{Matrix, SeededRng, STREAM_LOADER};

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub code_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Mutual-information steps per epoch.
    pub shuffle_iters: usize,
}

/// Default `β` for a code length: 1e-4 up to 16 bits, 1e-3 up to 32, else 1e-2.
pub fn default_beta(code_len: usize) -> f64 {
    match code_len {
        0..=16 => 1e-4,
        17..=32 => 1e-3,
        _ => 1e-2,
    }
}

impl TrainConfig {
    pub fn for_code_len(code_len: usize) -> Self {
        Self {
            code_len,
            batch_size: 32,
            lr: 1e-3,
            alpha: 0.1,
            beta: default_beta(code_len),
            epochs: 300,
            lr_decay_every: 100,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            shuffle_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.code_len == 0 {
            return fail("code_len", "must be positive");
        }
        if self.batch_size < 2 {
            return fail("batch_size", "must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be positive and finite");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha", "must be ≥ 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta", "must be ≥ 0");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every", "must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail("lr_decay_factor", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", "must be ≥ 0");
        }
        Ok(())
    }
}

/// Step size at `epoch`: `lr · factor^⌊epoch / every⌋`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = (epoch / config.lr_decay_every.max(1)) as i32;
    config.lr * config.lr_decay_factor.powi(decays)
}

/// Momentum buffers for [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(model: &HashModel, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
            momentum,
            weight_decay,
        }
    }
}

fn check_grads(model: &HashModel, grads: &Gradients, op: &'static str) -> Result<()> {
    if grads.weights.shape() != model.weights.shape() || grads.bias.len() != model.bias.len() {
        return Err(Error::dim(
            op,
            format!("{:?}", model.weights.shape()),
            format!("{:?}", grads.weights.shape()),
        ));
    }
    Ok(())
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(model: &mut HashModel, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_grads(model, grads, "sgd_step")?;
    if state.velocity.weights.shape() != model.weights.shape() {
        return Err(Error::dim(
            "sgd_step",
            format!("{:?}", model.weights.shape()),
            format!("{:?}", state.velocity.weights.shape()),
        ));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    let update = |p: &mut f64, g: f64, v: &mut f64| {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    };
    for ((p, &g), v) in model
        .weights
        .as_mut_slice()
        .iter_mut()
        .zip(grads.weights.as_slice())
        .zip(state.velocity.weights.as_mut_slice())
    {
        update(p, g, v);
    }
    for ((p, &g), v) in model.bias.iter_mut().zip(&grads.bias).zip(&mut state.velocity.bias) {
        update(p, g, v);
    }
    Ok(())
}

/// `θ ← θ − lr·g`, no momentum and no weight decay.
pub fn plain_sgd_step(model: &mut HashModel, grads: &Gradients, lr: f64) -> Result<()> {
    check_grads(model, grads, "plain_sgd_step")?;
    for (p, &g) in model.weights.as_mut_slice().iter_mut().zip(grads.weights.as_slice()) {
        *p -= lr * g;
    }
    for (p, &g) in model.bias.iter_mut().zip(&grads.bias) {
        *p -= lr * g;
    }
    Ok(())
}

/// Current total pairwise MI of the model's codes on `features`.
pub fn current_mi(model: &HashModel, features: &Matrix) -> Result<f64> {
    let codes = model.encode(features)?;
    Ok(mi_loss(&estimate_stats(&codes)?))
}

/// One plain-SGD step along `−β · ∂L_m/∂θ` over the whole dataset.
/// Returns the MI of the codes before the step.
pub fn mi_descent_step(model: &mut HashModel, features: &Matrix, beta: f64, lr: f64) -> Result<f64> {
    let codes = model.encode(features)?;
    let stats = estimate_stats(&codes)?;
    let before = mi_loss(&stats);
    if beta == 0.0 {
        return Ok(before);
    }
    let grad_b = mi_gradient(&codes, &stats)?;
    let mut grads = backward_linear(&backward_straight_through(&grad_b), features)?;
    grads.scale(beta);
    plain_sgd_step(model, &grads, lr)?;
    Ok(before)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShuffleOutcome {
    pub mi_before: f64,
    pub mi_after: f64,
}

/// The per-epoch mutual-information step(s) at the scheduled learning rate.
pub fn shuffle_step(model: &mut HashModel, features: &Matrix, config: &TrainConfig, epoch: usize) -> Result<ShuffleOutcome> {
    let lr = lr_at_epoch(config, epoch);
    let mut mi_before = None;
    for _ in 0..config.shuffle_iters {
        let b = mi_descent_step(model, features, config.beta, lr)?;
        mi_before.get_or_insert(b);
        if config.beta == 0.0 {
            break;
        }
    }
    if !model.is_finite() {
        return Err(Error::NonFinite {
            what: "model after shuffle step",
            epoch,
        });
    }
    let mi_after = current_mi(model, features)?;
    Ok(ShuffleOutcome {
        mi_before: mi_before.unwrap_or(mi_after),
        mi_after,
    })
}

/// Per-epoch scalars written to `log.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Pairwise MI before the epoch's shuffle step.
    pub mi_loss: f64,
    /// Mean minibatch `L_sim`.
    pub sim_loss: f64,
    /// Mean minibatch `L_reg`.
    pub reg_loss: f64,
    /// Distinct codes over the full dataset at the end of the epoch.
    pub distinct_codes: usize,
}

pub const LOG_HEADER: &str = "epoch,lr,L_m,L_sim,L_reg,distinct_codes";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.mi_loss, self.sim_loss, self.reg_loss, self.distinct_codes
        )
    }
}

/// Minibatch index lists for one epoch. A trailing batch of one sample is
/// dropped since the pairwise loss needs two.
pub fn epoch_batches(rng: &mut SeededRng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// One epoch of minibatch steps on `L_sim + α·L_reg`. Returns mean losses.
pub fn regular_epoch(
    model: &mut HashModel,
    features: &Matrix,
    config: &TrainConfig,
    state: &mut OptimizerState,
    loader: &mut SeededRng,
    epoch: usize,
) -> Result<(f64, f64)> {
    let lr = lr_at_epoch(config, epoch);
    let batches = epoch_batches(loader, features.rows(), config.batch_size);
    let (mut sim_sum, mut reg_sum) = (0.0, 0.0);
    for idx in &batches {
        let x = features.select_rows(idx);
        let (h, b) = model.forward(&x)?;
        let (loss, sim, reg) = combined_loss(&h, &b, config.alpha)?;
        if !loss.value.is_finite() || !loss.grad_h.is_finite() {
            return Err(Error::NonFinite { what: "L_r", epoch });
        }
        let grads = backward_linear(&backward_straight_through(&loss.grad_h), &x)?;
        sgd_step(model, &grads, state, lr)?;
        sim_sum += sim;
        reg_sum += reg;
    }
    let nb = batches.len().max(1) as f64;
    Ok((sim_sum / nb, reg_sum / nb))
}

/// Full training run. `on_epoch` sees every log row and the model after it.
pub fn train<F>(model: &mut HashModel, features: &Matrix, config: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &HashModel) -> Result<()>,
{
    config.validate()?;
    if features.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if features.cols() != model.feature_dim() || config.code_len != model.code_len() {
        return Err(Error::dim(
            "train",
            format!("D={} K={}", model.feature_dim(), model.code_len()),
            format!("D={} K={}", features.cols(), config.code_len),
        ));
    }
    let mut state = OptimizerState::new(model, config.momentum, config.weight_decay);
    let mut loader = SeededRng::with_stream(config.seed, STREAM_LOADER);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let shuffle = shuffle_step(model, features, config, epoch)?;
        let (sim_loss, reg_loss) = regular_epoch(model, features, config, &mut state, &mut loader, epoch)?;
        if !model.is_finite() {
            return Err(Error::NonFinite { what: "model", epoch });
        }
        let log = EpochLog {
            epoch,
            lr: lr_at_epoch(config, epoch),
            mi_loss: shuffle.mi_before,
            sim_loss,
            reg_loss,
            distinct_codes: distinct_codes(&model.encode(features)?),
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
