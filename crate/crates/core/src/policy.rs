//! Softmax policy network: `input → width → width → actions` with rectified
//! linear hidden units. Parameters live in one flat vector so optimizers can
//! treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, stream};

pub const DEFAULT_WIDTH: usize = 64;
/// Floor applied to action probabilities before renormalization.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub state_dim: usize,
    pub width: usize,
    pub action_count: usize,
    /// `W1 (width×state_dim), b1, W2 (width×width), b2, W3 (actions×width), b3`, row-major.
    pub data: Vec<f64>,
}

/// Offsets of each block inside [`PolicyParams::data`].
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, w: usize, a: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + w * d;
        let w2 = b1 + w;
        let b2 = w2 + w * w;
        let w3 = b2 + w;
        let b3 = w3 + a * w;
        Self { w1, b1, w2, b2, w3, b3, len: b3 + a }
    }
}

pub fn param_count(state_dim: usize, width: usize, action_count: usize) -> usize {
    Layout::new(state_dim, width, action_count).len
}

impl PolicyParams {
    pub fn zeros(state_dim: usize, action_count: usize, width: usize) -> Self {
        Self { state_dim, width, action_count, data: vec![0.0; param_count(state_dim, width, action_count)] }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.state_dim, self.width, self.action_count)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.state_dim == 0 || self.width == 0 || self.action_count < 2 {
            return Err(Error::Config("policy needs positive dimensions and at least two actions".into()));
        }
        if self.data.len() != self.layout().len {
            return Err(Error::Integrity(format!(
                "parameter vector has {} entries, shape ({}, {}, {}) needs {}",
                self.data.len(),
                self.state_dim,
                self.width,
                self.action_count,
                self.layout().len
            )));
        }
        Ok(())
    }
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn init_params(state_dim: usize, action_count: usize, width: usize, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::zeros(state_dim, action_count, width);
    let l = p.layout();
    let mut rng = derived_rng(seed, stream::INIT, 0);
    let mut fill = |data: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in data {
            *x = rng.random_range(-bound..bound);
        }
    };
    fill(&mut p.data[l.w1..l.b1], state_dim);
    fill(&mut p.data[l.w2..l.b2], width);
    fill(&mut p.data[l.w3..l.b3], width);
    p
}

/// Action probabilities at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn uniform(action_count: usize) -> Self {
        Self { probs: vec![1.0 / action_count as f64; action_count] }
    }
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h1_pre: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2_pre: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
    /// Raw softmax.
    pub softmax: Vec<f64>,
    /// Floored and renormalized softmax.
    pub probs: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Floors each component at [`PROB_FLOOR`] and renormalizes.
pub fn floor_probs(q: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / total).collect()
}

pub fn forward(params: &PolicyParams, x: &[f64]) -> Forward {
    let l = params.layout();
    let (w, a) = (params.width, params.action_count);
    let d = &params.data;
    let mut h1_pre = vec![0.0; w];
    affine(&d[l.w1..l.b1], &d[l.b1..l.w2], x, &mut h1_pre);
    let h1: Vec<f64> = h1_pre.iter().map(|z| z.max(0.0)).collect();
    let mut h2_pre = vec![0.0; w];
    affine(&d[l.w2..l.b2], &d[l.b2..l.w3], &h1, &mut h2_pre);
    let h2: Vec<f64> = h2_pre.iter().map(|z| z.max(0.0)).collect();
    let mut logits = vec![0.0; a];
    affine(&d[l.w3..l.b3], &d[l.b3..l.len], &h2, &mut logits);
    let softmax = softmax(&logits);
    let probs = floor_probs(&softmax);
    Forward { h1_pre, h1, h2_pre, h2, logits, softmax, probs }
}

pub fn action_probs(params: &PolicyParams, state: &[f64]) -> Result<ActionDistribution> {
    if state.len() != params.state_dim {
        return Err(Error::Config(format!(
            "policy expects {} state features, got {}",
            params.state_dim,
            state.len()
        )));
    }
    let f = forward(params, state);
    if f.probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("non-finite policy output at state {state:?}")));
    }
    Ok(ActionDistribution { probs: f.probs })
}

/// `-Σ p log p`.
pub fn entropy(dist: &ActionDistribution) -> f64 {
    -dist.probs.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// Pulls a gradient with respect to the floored probabilities back to the logits.
pub fn probs_backward(fwd: &Forward, grad_probs: &[f64]) -> Vec<f64> {
    let total: f64 = fwd.softmax.iter().map(|&x| x.max(PROB_FLOOR)).sum();
    let dot: f64 = grad_probs.iter().zip(&fwd.probs).map(|(g, p)| g * p).sum();
    // Through the renormalization, then the floor (zero slope where active).
    let grad_softmax: Vec<f64> = grad_probs
        .iter()
        .zip(&fwd.softmax)
        .map(|(g, &q)| if q > PROB_FLOOR { (g - dot) / total } else { 0.0 })
        .collect();
    let dot_q: f64 = grad_softmax.iter().zip(&fwd.softmax).map(|(g, q)| g * q).sum();
    grad_softmax.iter().zip(&fwd.softmax).map(|(g, q)| q * (g - dot_q)).collect()
}

/// Accumulates `∂(upstream · logits)/∂θ` into `grad`.
pub fn grad_logits_into(params: &PolicyParams, x: &[f64], fwd: &Forward, upstream: &[f64], grad: &mut [f64]) {
    let l = params.layout();
    let (w, dim) = (params.width, params.state_dim);
    let d = &params.data;

    // Output layer.
    let mut g_h2 = vec![0.0; w];
    for (k, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        grad[l.b3 + k] += u;
        let row = l.w3 + k * w;
        for j in 0..w {
            grad[row + j] += u * fwd.h2[j];
            g_h2[j] += u * d[row + j];
        }
    }
    // Second hidden layer.
    let mut g_h1 = vec![0.0; w];
    for j in 0..w {
        if fwd.h2_pre[j] <= 0.0 {
            continue;
        }
        let g = g_h2[j];
        grad[l.b2 + j] += g;
        let row = l.w2 + j * w;
        for i in 0..w {
            grad[row + i] += g * fwd.h1[i];
            g_h1[i] += g * d[row + i];
        }
    }
    // First hidden layer.
    for i in 0..w {
        if fwd.h1_pre[i] <= 0.0 {
            continue;
        }
        let g = g_h1[i];
        grad[l.b1 + i] += g;
        let row = l.w1 + i * dim;
        for (k, &xk) in x.iter().enumerate() {
            grad[row + k] += g * xk;
        }
    }
}

/// `∂(upstream · logits)/∂θ` at one state.
pub fn grad_logits(params: &PolicyParams, state: &[f64], upstream: &[f64]) -> Vec<f64> {
    let fwd = forward(params, state);
    let mut grad = vec![0.0; params.len()];
    grad_logits_into(params, state, &fwd, upstream, &mut grad);
    grad
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, &p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    // Rounding left `acc` just below 1: take the last action with mass.
    dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Most probable action; ties go to the lowest index.
pub fn argmax_action(dist: &ActionDistribution) -> usize {
    let mut best = 0;
    for (a, &p) in dist.probs.iter().enumerate() {
        if p > dist.probs[best] {
            best = a;
        }
    }
    best
}
