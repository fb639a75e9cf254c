//! Seeded rollouts, sample-complexity sweeps and the CKDE consistency probe.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::{draw_without_replacement, to_buffer, to_buffer_with, Preprocessor, ScriptedExpert, Trajectory, TupleBuffer};
use crate::density::{ckde_t, precompute_counts, precompute_densities, ActionDistance, DensityCache, KernelConfig, QueryPoint};
use crate::env::{env_spec, EnvId, Environment, GridSpec};
use crate::error::{Error, Result};
use crate::policy::{action_probs, argmax_action, sample_action, PolicyParams};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::train::{train_bc, train_ckil, TrainConfig};

pub const DEFAULT_EVAL_EPISODES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sampled,
    Argmax,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Sampled => "sampled",
            EvalMode::Argmax => "argmax",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(EvalMode::Sampled),
            "argmax" => Ok(EvalMode::Argmax),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

/// A trained network together with the observation transform it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub params: PolicyParams,
    pub preprocessor: Preprocessor,
}

impl LearnedPolicy {
    pub fn new(params: PolicyParams, buffer: &TupleBuffer) -> Self {
        Self { params, preprocessor: buffer.preprocessor.clone() }
    }
}

/// Anything that can choose actions in an environment.
#[derive(Debug, Clone)]
pub enum Actor<'a> {
    Learned(&'a LearnedPolicy, EvalMode),
    Expert(ScriptedExpert),
    Random,
}

impl Actor<'_> {
    fn check(&self, env_id: EnvId) -> Result<()> {
        let spec = env_spec(env_id);
        match self {
            Actor::Learned(p, _) => {
                if p.params.state_dim != spec.state_dim || p.params.action_count != spec.action_count {
                    return Err(Error::Config(format!(
                        "policy shape ({} inputs, {} actions) does not fit {env_id} ({}, {})",
                        p.params.state_dim, p.params.action_count, spec.state_dim, spec.action_count
                    )));
                }
                Ok(())
            }
            Actor::Expert(e) if e.env != env_id => {
                Err(Error::Config(format!("expert `{}` cannot drive environment `{env_id}`", e.env)))
            }
            _ => Ok(()),
        }
    }

    fn act<R: Rng + ?Sized>(&self, state: &[f64], action_count: usize, rng: &mut R) -> Result<usize> {
        Ok(match self {
            Actor::Learned(p, mode) => {
                let dist = action_probs(&p.params, &p.preprocessor.features(state))?;
                match mode {
                    EvalMode::Sampled => sample_action(&dist, rng),
                    EvalMode::Argmax => argmax_action(&dist),
                }
            }
            Actor::Expert(e) => e.act(state, rng),
            Actor::Random => rng.random_range(0..action_count),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Actor::Learned(..) => "learned",
            Actor::Expert(_) => "expert",
            Actor::Random => "random",
        }
    }
}

/// Undiscounted return of one episode.
pub fn rollout(env_id: EnvId, actor: &Actor<'_>, seed: u64) -> Result<f64> {
    actor.check(env_id)?;
    let mut env = Environment::new(env_id, derive_seed(seed, stream::ROLLOUT_RESET, 0));
    let mut rng = derived_rng(seed, stream::ROLLOUT_ACTION, 0);
    let action_count = env.spec().action_count;
    let mut total = 0.0;
    while !env.is_done() {
        let a = actor.act(env.state(), action_count, &mut rng)?;
        total += env.step(a)?.reward;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    /// Population standard deviation of the per-episode returns.
    pub std_return: f64,
    pub n_episodes: usize,
    pub returns: Vec<f64>,
    pub policy_mode: String,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>, policy_mode: impl Into<String>) -> Result<Self> {
        if returns.is_empty() {
            return Err(Error::Input("an evaluation needs at least one episode".into()));
        }
        let (mean_return, std_return) = mean_std(&returns);
        Ok(Self { mean_return, std_return, n_episodes: returns.len(), returns, policy_mode: policy_mode.into() })
    }
}

/// Runs episodes seeded `base_seed, base_seed + 1, …`.
pub fn evaluate(env_id: EnvId, actor: &Actor<'_>, n_episodes: usize, base_seed: u64) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Input("n_episodes must be at least 1".into()));
    }
    actor.check(env_id)?;
    let returns = (0..n_episodes as u64)
        .into_par_iter()
        .map(|k| rollout(env_id, actor, base_seed + k))
        .collect::<Result<Vec<f64>>>()?;
    let mode = match actor {
        Actor::Learned(_, m) => m.to_string(),
        other => other.label().to_string(),
    };
    EvalReport::from_returns(returns, mode)
}

/// How transition densities are estimated for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    /// Kernel estimates on standardized continuous states.
    Kernel(KernelConfig),
    /// Counting estimates on a uniform grid with `cells` per dimension.
    Counting { cells: usize },
}

impl Estimator {
    pub fn grid(&self, env_id: EnvId) -> Result<Option<GridSpec>> {
        match self {
            Estimator::Kernel(_) => Ok(None),
            Estimator::Counting { cells } => GridSpec::uniform(&env_spec(env_id), *cells).map(Some),
        }
    }

    /// Builds the buffer and evaluates `P̂`, `T̂` at its tuples.
    pub fn prepare(&self, env_id: EnvId, trajectories: &[Trajectory]) -> Result<(TupleBuffer, DensityCache)> {
        let spec = env_spec(env_id);
        let grid = self.grid(env_id)?;
        let buffer = to_buffer_with(trajectories, spec.action_count, true, grid.clone())?;
        let cache = match (self, grid) {
            (Estimator::Kernel(cfg), _) => {
                let cfg = cfg.clone().with_space(spec.state_dim, spec.action_count)?;
                precompute_densities(&buffer, &cfg)?
            }
            (Estimator::Counting { .. }, Some(g)) => precompute_counts(&buffer, &g)?,
            (Estimator::Counting { .. }, None) => unreachable!("counting estimator always has a grid"),
        };
        Ok((buffer, cache))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ckil,
    Bc,
    Expert,
    Random,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Ckil => "ckil",
            Algorithm::Bc => "bc",
            Algorithm::Expert => "expert",
            Algorithm::Random => "random",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ckil" => Ok(Algorithm::Ckil),
            "bc" => Ok(Algorithm::Bc),
            other => Err(Error::Config(format!("unknown training algorithm `{other}` (expected ckil or bc)"))),
        }
    }
}

/// Everything a sample-complexity sweep needs besides the trajectory pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub traj_counts: Vec<usize>,
    pub repeats: usize,
    pub estimator: Estimator,
    pub train: TrainConfig,
    /// Separate settings for the baseline; defaults to `train`.
    pub bc_train: Option<TrainConfig>,
    pub algorithms: Vec<Algorithm>,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(traj_counts: Vec<usize>, repeats: usize, estimator: Estimator, train: TrainConfig) -> Self {
        Self {
            traj_counts,
            repeats,
            estimator,
            train,
            bc_train: None,
            algorithms: vec![Algorithm::Ckil, Algorithm::Bc],
            eval_episodes: DEFAULT_EVAL_EPISODES,
            eval_mode: EvalMode::Sampled,
            seed: 0,
        }
    }
}

pub const CONTINUOUS_LADDER: [usize; 5] = [1, 3, 7, 10, 15];
pub const DISCRETE_LADDER: [usize; 5] = [1, 3, 10, 30, 50];
pub const DEFAULT_REPEATS: usize = 10;
pub const POOL_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the expert and random reference rows.
    pub traj_count: Option<usize>,
    pub repeat_index: usize,
    pub algorithm: Algorithm,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub env: EnvId,
    pub rows: Vec<SweepRow>,
}

/// Mean over repeats of the per-repeat mean return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub traj_count: Option<usize>,
    pub algorithm: Algorithm,
    pub repeats: usize,
    pub mean_return: f64,
    /// Population std across repeats.
    pub std_return: f64,
    pub stderr_return: f64,
    pub median_return: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepReport {
    pub fn returns(&self, algorithm: Algorithm, traj_count: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.algorithm == algorithm && r.traj_count == traj_count)
            .map(|r| r.mean_return)
            .collect()
    }

    /// Sanity of the reference rows: the expert is not beaten by more than
    /// `tolerance` by any algorithm at the largest trajectory count, and
    /// the random policy is never better than any other row's mean.
    pub fn ordering_violations(&self, tolerance: f64) -> Vec<String> {
        let mut out = Vec::new();
        let summary = self.summary();
        let find = |alg| summary.iter().find(|r| r.algorithm == alg && r.traj_count.is_none()).map(|r| r.mean_return);
        let largest = summary.iter().filter_map(|r| r.traj_count).max();
        if let (Some(expert), Some(top)) = (find(Algorithm::Expert), largest) {
            for r in summary.iter().filter(|r| r.traj_count == Some(top)) {
                if r.mean_return > expert + tolerance {
                    out.push(format!("{} at {top} trajectories ({:.2}) exceeds the expert ({expert:.2})", r.algorithm, r.mean_return));
                }
            }
        }
        if let Some(random) = find(Algorithm::Random) {
            for r in summary.iter().filter(|r| r.algorithm != Algorithm::Random) {
                if r.mean_return < random {
                    let at = r.traj_count.map_or(String::new(), |c| format!(" at {c} trajectories"));
                    out.push(format!("{}{at} ({:.2}) is below the random policy ({random:.2})", r.algorithm, r.mean_return));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let mut keys: Vec<(Option<usize>, Algorithm)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.traj_count, r.algorithm)) {
                keys.push((r.traj_count, r.algorithm));
            }
        }
        keys.into_iter()
            .map(|(traj_count, algorithm)| {
                let xs = self.returns(algorithm, traj_count);
                let (mean, std) = mean_std(&xs);
                SweepSummaryRow {
                    traj_count,
                    algorithm,
                    repeats: xs.len(),
                    mean_return: mean,
                    std_return: std,
                    stderr_return: std / (xs.len() as f64).sqrt(),
                    median_return: median(&xs),
                }
            })
            .collect()
    }
}

/// Result of one (trajectory count, repeat) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub traj_count: usize,
    pub repeat_index: usize,
    pub reports: Vec<(Algorithm, EvalReport)>,
}

/// Trains and evaluates every requested algorithm on one cell of the sweep.
pub fn run_cell(env_id: EnvId, pool: &[Trajectory], config: &SweepConfig, traj_count: usize, repeat: usize) -> Result<CellResult> {
    let cell = (traj_count as u64) << 32 | repeat as u64;
    let mut draw_rng = derived_rng(config.seed, stream::SWEEP_DRAW, cell);
    let demos = draw_without_replacement(pool, traj_count, &mut draw_rng)?;
    let train_seed = derive_seed(config.seed, stream::INIT, repeat as u64);
    // Shared across trajectory counts within a repeat, so ladder points are
    // compared on the same start states.
    let eval_seed = derive_seed(config.seed, stream::ROLLOUT_RESET, repeat as u64) >> 16;
    let mut reports = Vec::new();
    let needs_cache = config.algorithms.contains(&Algorithm::Ckil);
    let (buffer, cache) = if needs_cache {
        let (b, c) = config.estimator.prepare(env_id, &demos)?;
        (b, Some(c))
    } else {
        let grid = config.estimator.grid(env_id)?;
        (to_buffer_with(&demos, env_spec(env_id).action_count, true, grid)?, None)
    };
    for &alg in &config.algorithms {
        let params = match alg {
            Algorithm::Ckil => {
                let cfg = TrainConfig { seed: train_seed, ..config.train.clone() };
                train_ckil(&buffer, cache.as_ref().expect("cache built for ckil"), &cfg)?.params
            }
            Algorithm::Bc => {
                let base = config.bc_train.as_ref().unwrap_or(&config.train);
                let cfg = TrainConfig { seed: train_seed, ..base.clone() };
                train_bc(&buffer, &cfg)?.params
            }
            _ => continue,
        };
        let policy = LearnedPolicy::new(params, &buffer);
        let report = evaluate(env_id, &Actor::Learned(&policy, config.eval_mode), config.eval_episodes, eval_seed)?;
        reports.push((alg, report));
    }
    Ok(CellResult { traj_count, repeat_index: repeat, reports })
}

/// Sample-complexity sweep over trajectory counts and repeats, plus one
/// expert and one random reference row.
pub fn sweep(env_id: EnvId, pool: &[Trajectory], expert: &ScriptedExpert, config: &SweepConfig) -> Result<SweepReport> {
    let max_count = config.traj_counts.iter().copied().max().unwrap_or(0);
    if config.traj_counts.is_empty() || config.repeats == 0 {
        return Err(Error::Config("a sweep needs at least one trajectory count and one repeat".into()));
    }
    if pool.len() < max_count {
        return Err(Error::Config(format!("pool of {} trajectories is smaller than the largest count {max_count}", pool.len())));
    }
    let cells: Vec<(usize, usize)> =
        config.traj_counts.iter().flat_map(|&c| (0..config.repeats).map(move |r| (c, r))).collect();
    let results = cells
        .par_iter()
        .map(|&(c, r)| run_cell(env_id, pool, config, c, r))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let ref_seed = derive_seed(config.seed, stream::ROLLOUT_RESET, u64::MAX) >> 16;
    for (alg, actor) in [(Algorithm::Expert, Actor::Expert(*expert)), (Algorithm::Random, Actor::Random)] {
        let rep = evaluate(env_id, &actor, config.eval_episodes, ref_seed)?;
        rows.push(SweepRow { traj_count: None, repeat_index: 0, algorithm: alg, mean_return: rep.mean_return, std_return: rep.std_return });
    }
    for cell in results {
        for (alg, rep) in cell.reports {
            rows.push(SweepRow {
                traj_count: Some(cell.traj_count),
                repeat_index: cell.repeat_index,
                algorithm: alg,
                mean_return: rep.mean_return,
                std_return: rep.std_return,
            });
        }
    }
    Ok(SweepReport { env: env_id, rows })
}

/// 1-D synthetic MDP with a closed-form transition density:
/// `s ~ U[-range, range]`, `a ~ U{0, 1}`, `s' = s + shift[a] + σ ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMdp {
    pub sigma: f64,
    pub shift: [f64; 2],
    pub state_range: f64,
}

impl Default for SyntheticMdp {
    fn default() -> Self {
        Self { sigma: 0.7, shift: [-0.5, 0.5], state_range: 1.5 }
    }
}

impl SyntheticMdp {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("synthetic noise scale must be positive (the density is unbounded at 0)".into()));
        }
        if !(self.state_range > 0.0) {
            return Err(Error::Config("synthetic state range must be positive".into()));
        }
        Ok(())
    }

    pub fn true_density(&self, s: f64, a: usize, s_next: f64) -> f64 {
        let z = (s_next - s - self.shift[a]) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// `n` iid tuples, each stored as its own two-step episode.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Trajectory> {
        (0..n as u64)
            .map(|id| {
                let s = rng.random_range(-self.state_range..self.state_range);
                let a = rng.random_range(0..2usize);
                let eps: f64 = StandardNormal.sample(rng);
                let s_next = s + self.shift[a] + self.sigma * eps;
                let a_next = rng.random_range(0..2usize);
                Trajectory { episode_id: id, steps: vec![(vec![s], a), (vec![s_next], a_next)], terminal: false }
            })
            .collect()
    }

    /// 20 × 2 × 20 probe points: `s` over the central half of the state
    /// range, `s'` within two noise scales of the conditional mean.
    pub fn probe_grid(&self) -> Vec<(f64, usize, f64)> {
        let half = self.state_range / 2.0;
        let mut out = Vec::with_capacity(800);
        for i in 0..20 {
            let s = -half + 2.0 * half * i as f64 / 19.0;
            for a in 0..2 {
                for j in 0..20 {
                    let s_next = s + self.shift[a] - 2.0 * self.sigma + 4.0 * self.sigma * j as f64 / 19.0;
                    out.push((s, a, s_next));
                }
            }
        }
        out
    }
}

/// Shrinking bandwidth `h(n) = h_ref · (n / n_ref)^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRule {
    pub h_ref: f64,
    pub n_ref: usize,
    pub exponent: f64,
}

impl Default for BandwidthRule {
    fn default() -> Self {
        Self { h_ref: 0.02, n_ref: 100, exponent: 1.0 / 3.0 }
    }
}

impl BandwidthRule {
    pub fn bandwidth(&self, n: usize) -> f64 {
        self.h_ref * (n as f64 / self.n_ref as f64).powf(-self.exponent)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_ref > 0.0 && self.h_ref.is_finite()) || self.n_ref == 0 {
            return Err(Error::Config("bandwidth rule needs h_ref > 0 and n_ref ≥ 1".into()));
        }
        if !(self.exponent >= 0.0 && self.exponent.is_finite()) {
            return Err(Error::Config("bandwidth exponent must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub bandwidth: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
}

pub const DEFAULT_PROBE_REPLICATES: usize = 5;

/// Mean absolute error of the kernel `T̂` against the closed-form density,
/// for each sample size in `n_values`. Each row averages the probe-grid
/// error over `replicates` independent buffers of that size.
pub fn consistency_probe(
    mdp: &SyntheticMdp,
    n_values: &[usize],
    rule: &BandwidthRule,
    replicates: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    mdp.validate()?;
    rule.validate()?;
    if n_values.is_empty() || n_values.windows(2).any(|w| w[1] <= w[0]) || n_values[0] == 0 {
        return Err(Error::Config("probe sample sizes must be positive and strictly increasing".into()));
    }
    if replicates == 0 {
        return Err(Error::Config("probe needs at least one replicate".into()));
    }
    let probes = mdp.probe_grid();
    let rows = n_values
        .iter()
        .map(|&n| {
            let h = rule.bandwidth(n);
            let cfg = KernelConfig::new(h, h, h, ActionDistance::ExactMatch, 1, 2)?;
            let mut total = 0.0;
            for rep in 0..replicates {
                let mut rng = derived_rng(seed, stream::PROBE, (n as u64) << 16 | rep as u64);
                let buffer = to_buffer(&mdp.sample(n, &mut rng), 2, false)?;
                let errors: Vec<f64> = probes
                    .par_iter()
                    .map(|&(s, a, sn)| {
                        let q = QueryPoint { s: vec![s], a, s_next: vec![sn], a_next: None };
                        (ckde_t(&buffer, &q, &cfg) - mdp.true_density(s, a, sn)).abs()
                    })
                    .collect();
                total += errors.iter().sum::<f64>() / probes.len() as f64;
            }
            Ok(ConsistencyRow { n, bandwidth: h, mean_abs_error: total / replicates as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyReport { rows })
}
