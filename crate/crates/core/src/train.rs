//! Policy fitting.
//!
//! CKIL minimizes, over minibatches `b` of buffer tuples,
//!
//! ```text
//! Σ_{i∈b} [P̂_i − π_θ(a'_i|s'_i) T̂_i]²  +  λ Σ_{i∈b} Σ_{a'} π_θ(a'|s'_i) log π_θ(a'|s'_i)
//! ```
//!
//! with Adam. Behavioral cloning shares the network, optimizer and loop and
//! only swaps the loss for the negative log-likelihood of demonstrated actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demos::TupleBuffer;
use crate::density::DensityCache;
use crate::error::{Error, Result};
use crate::policy::{forward, grad_logits_into, init_params, probs_backward, PolicyParams, DEFAULT_WIDTH};
use crate::rng::{derived_rng, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Iterations without smoothed-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub width: usize,
    /// Weight of the newest loss in the exponential moving average.
    pub smoothing: f64,
    /// Relative improvement that resets the patience counter.
    pub min_rel_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_size: 256,
            max_iters: 20_000,
            patience: 2_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            width: DEFAULT_WIDTH,
            smoothing: 0.05,
            min_rel_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.width == 0 {
            return bad("batch size, iteration count and width must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_opt > 0.0) {
            return bad("optimizer moments need beta1, beta2 in [0, 1) and eps > 0");
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return bad("smoothing weight must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub balance_term: f64,
    /// `Σ π log π`, never positive.
    pub entropy_term: f64,
    pub total: f64,
}

fn check_batch(batch: &[usize], buffer: &TupleBuffer) -> Result<()> {
    match batch.iter().find(|&&i| i >= buffer.len()) {
        Some(i) => Err(Error::Input(format!("batch index {i} outside a buffer of {} tuples", buffer.len()))),
        None => Ok(()),
    }
}

/// Balance objective and its gradient on one batch of tuple indices.
pub fn batch_loss(
    params: &PolicyParams,
    batch: &[usize],
    cache: &DensityCache,
    buffer: &TupleBuffer,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cache.check_aligned(buffer)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if params.state_dim != buffer.state_dim || params.action_count != buffer.action_count {
        return Err(Error::Config("policy shape does not match the buffer".into()));
    }
    check_batch(batch, buffer)?;
    let mut grad = vec![0.0; params.len()];
    let mut balance = 0.0;
    let mut entropy_term = 0.0;
    for &i in batch {
        let x = buffer.next_feature(i);
        let a_next = buffer.tuples[i].a_next;
        let fwd = forward(params, x);
        let (p_hat, t_hat) = (cache.p_hat[i], cache.t_hat[i]);
        let r = p_hat - fwd.probs[a_next] * t_hat;
        balance += r * r;
        let mut g_probs = vec![0.0; params.action_count];
        g_probs[a_next] = -2.0 * r * t_hat;
        for (g, &p) in g_probs.iter_mut().zip(&fwd.probs) {
            let log_p = p.ln();
            entropy_term += p * log_p;
            *g += lambda * (log_p + 1.0);
        }
        let g_logits = probs_backward(&fwd, &g_probs);
        grad_logits_into(params, x, &fwd, &g_logits, &mut grad);
    }
    let loss = LossBreakdown { balance_term: balance, entropy_term, total: balance + lambda * entropy_term };
    Ok((loss, grad))
}

/// Negative log-likelihood of the demonstrated actions `a_i` at states `s_i`.
pub fn bc_batch_loss(params: &PolicyParams, batch: &[usize], buffer: &TupleBuffer) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    check_batch(batch, buffer)?;
    let mut grad = vec![0.0; params.len()];
    let mut nll = 0.0;
    for &i in batch {
        let x = buffer.feature(i);
        let a = buffer.tuples[i].a;
        let fwd = forward(params, x);
        nll -= fwd.probs[a].ln();
        let mut g_probs = vec![0.0; params.action_count];
        g_probs[a] = -1.0 / fwd.probs[a];
        let g_logits = probs_backward(&fwd, &g_probs);
        grad_logits_into(params, x, &fwd, &g_logits, &mut grad);
    }
    Ok((nll, grad))
}

/// First/second moment accumulators of Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut PolicyParams, grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Integrity("gradient, moments and parameters differ in length".into()));
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient component {k}: {}", grad[k])));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for k in 0..grad.len() {
        let g = grad[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params.data[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub balance_term: f64,
    pub entropy_term: f64,
    pub smoothed: f64,
    pub best_smoothed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Plateau,
    /// The loss or gradient became non-finite; the returned parameters are the last good checkpoint.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<LossRecord>,
    pub stop: StopReason,
    pub best_iter: usize,
}

/// Shared minibatch loop: sample with replacement, evaluate, update, keep the
/// parameters with the lowest smoothed loss.
fn optimize<F>(mut params: PolicyParams, n: usize, config: &TrainConfig, mut loss_fn: F) -> Result<TrainOutcome>
where
    F: FnMut(&PolicyParams, &[usize]) -> Result<(LossBreakdown, Vec<f64>)>,
{
    config.validate()?;
    let mut rng = derived_rng(config.seed, stream::BATCH, 0);
    let mut opt = OptimizerState::new(params.len(), config.beta1, config.beta2, config.eps_opt);
    let mut best = params.clone();
    let mut best_smoothed = f64::INFINITY;
    let mut best_iter = 0;
    let mut smoothed = f64::NAN;
    let mut since_best = 0;
    let mut history = Vec::with_capacity(config.max_iters);
    let mut batch = vec![0usize; config.batch_size];
    let mut stop = StopReason::MaxIters;

    for iter in 0..config.max_iters {
        batch.iter_mut().for_each(|b| *b = rng.random_range(0..n));
        let (loss, grad) = match loss_fn(&params, &batch) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            stop = StopReason::Diverged;
            break;
        }
        smoothed = if smoothed.is_nan() { loss.total } else { (1.0 - config.smoothing) * smoothed + config.smoothing * loss.total };
        if smoothed < best_smoothed - config.min_rel_improvement * best_smoothed.abs() || best_smoothed.is_infinite() {
            best_smoothed = smoothed;
            best.data.copy_from_slice(&params.data);
            best_iter = iter;
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(LossRecord {
            iter,
            total: loss.total,
            balance_term: loss.balance_term,
            entropy_term: loss.entropy_term,
            smoothed,
            best_smoothed,
        });
        if since_best >= config.patience {
            stop = StopReason::Plateau;
            break;
        }
        adam_step(&mut opt, &mut params, &grad, config.learning_rate)?;
        if params.data.iter().any(|x| !x.is_finite()) {
            stop = StopReason::Diverged;
            break;
        }
    }
    Ok(TrainOutcome { params: best, history, stop, best_iter })
}

/// Fits the policy to the balance equation on a buffer with precomputed densities.
pub fn train_ckil(buffer: &TupleBuffer, cache: &DensityCache, config: &TrainConfig) -> Result<TrainOutcome> {
    cache.check_aligned(buffer)?;
    let init = init_params(buffer.state_dim, buffer.action_count, config.width, config.seed);
    train_ckil_from(init, buffer, cache, config)
}

pub fn train_ckil_from(init: PolicyParams, buffer: &TupleBuffer, cache: &DensityCache, config: &TrainConfig) -> Result<TrainOutcome> {
    cache.check_aligned(buffer)?;
    optimize(init, buffer.len(), config, |p, batch| batch_loss(p, batch, cache, buffer, config.lambda))
}

/// Behavioral-cloning baseline on the same network and optimizer.
pub fn train_bc(buffer: &TupleBuffer, config: &TrainConfig) -> Result<TrainOutcome> {
    if buffer.is_empty() {
        return Err(Error::Input("empty buffer".into()));
    }
    let init = init_params(buffer.state_dim, buffer.action_count, config.width, config.seed);
    optimize(init, buffer.len(), config, |p, batch| {
        let (nll, grad) = bc_batch_loss(p, batch, buffer)?;
        Ok((LossBreakdown { balance_term: nll, entropy_term: 0.0, total: nll }, grad))
    })
}
