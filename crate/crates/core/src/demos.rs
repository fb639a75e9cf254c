//! Scripted demonstrators, dataset generation and persistence, and the
//! conversion of trajectories into `(s, a, s', a')` transition tuples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{env_spec, EnvId, Environment, GridSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng, stream};

/// Lower bound on a standardizer scale component.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Hand-written controller for one environment family, optionally softened
/// by taking a uniformly random action with probability `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedExpert {
    pub env: EnvId,
    pub epsilon: f64,
}

impl ScriptedExpert {
    pub fn new(env: EnvId, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self { env, epsilon })
    }

    /// The expert for `env`, or a configuration error when `expert` names another family.
    pub fn for_env(expert: EnvId, env: EnvId, epsilon: f64) -> Result<Self> {
        if expert != env {
            return Err(Error::Config(format!("expert `{expert}` cannot drive environment `{env}`")));
        }
        Self::new(env, epsilon)
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> usize {
        let spec = env_spec(self.env);
        // Always consume the coin so the random stream does not depend on epsilon == 0.
        let coin: f64 = rng.random();
        if coin < self.epsilon {
            return rng.random_range(0..spec.action_count);
        }
        greedy_action(self.env, state)
    }
}

/// Deterministic part of the scripted experts.
pub fn greedy_action(env: EnvId, state: &[f64]) -> usize {
    match env {
        // Energy pumping: push in the direction of motion.
        EnvId::MountainCar => {
            if state[1] > 0.0 {
                2
            } else {
                0
            }
        }
        // Linear state feedback on (x, ẋ, θ, θ̇).
        EnvId::CartPole => {
            let u = 0.1 * state[0] + 0.5 * state[1] + 10.0 * state[2] + 2.0 * state[3];
            usize::from(u > 0.0)
        }
        // Swing-up: torque the elbow against the shoulder's angular velocity,
        // whose reaction on the upper link pumps energy into the swing.
        EnvId::Acrobot => {
            if state[4] > 0.0 {
                0
            } else {
                2
            }
        }
    }
}

/// One demonstration episode. `steps[t]` is the state observed at time `t`
/// and the action the demonstrator took there.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub steps: Vec<(Vec<f64>, usize)>,
    /// `true` when the episode ended by termination rather than truncation.
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the expert for one episode and records the visited (state, action) pairs.
pub fn run_episode(env_id: EnvId, expert: &ScriptedExpert, seed: u64, episode_id: u64) -> Result<Trajectory> {
    let mut env = Environment::new(env_id, derive_seed(seed, stream::EPISODE_RESET, episode_id));
    let mut rng = derived_rng(seed, stream::EPISODE_EXPERT, episode_id);
    let mut steps = Vec::new();
    let mut terminal = false;
    while !env.is_done() {
        let state = env.state().to_vec();
        let action = expert.act(&state, &mut rng);
        let r = env.step(action)?;
        steps.push((state, action));
        terminal = r.terminated;
    }
    Ok(Trajectory { episode_id, steps, terminal })
}

pub fn generate_dataset(
    env_id: EnvId,
    expert: &ScriptedExpert,
    n_trajectories: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_trajectories == 0 {
        return Err(Error::Input("n_trajectories must be at least 1".into()));
    }
    if expert.env != env_id {
        return Err(Error::Config(format!("expert `{}` cannot drive environment `{env_id}`", expert.env)));
    }
    (0..n_trajectories as u64)
        .into_par_iter()
        .map(|e| run_episode(env_id, expert, seed, e))
        .collect()
}

/// Per-dimension z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn fit<'a>(states: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let states: Vec<&[f64]> = states.into_iter().collect();
        for s in &states {
            n += 1;
            for (acc, x) in sum.iter_mut().zip(s.iter()) {
                *acc += x;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for s in &states {
            for d in 0..dim {
                let dx = s[d] - mean[d];
                sq[d] += dx * dx;
            }
        }
        let scale = sq.iter().map(|v| (v / n.max(1) as f64).sqrt().max(SCALE_FLOOR)).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Maps a raw observation to the feature vector seen by densities and the
/// policy: optional snapping to a grid cell centre, then standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub grid: Option<GridSpec>,
    pub standardizer: Standardizer,
}

impl Preprocessor {
    pub fn snap(&self, state: &[f64]) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.cell_center(g.discretize(state)),
            None => state.to_vec(),
        }
    }

    pub fn features(&self, state: &[f64]) -> Vec<f64> {
        self.standardizer.apply(&self.snap(state))
    }
}

/// A consecutive `(s, a, s', a')` quadruple from one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTuple {
    pub s: Vec<f64>,
    pub a: usize,
    pub s_next: Vec<f64>,
    pub a_next: usize,
    /// Episode the tuple came from.
    pub episode_id: u64,
}

/// The buffer of transition tuples. Raw states are kept alongside their
/// standardized features; grid-snapped buffers also keep cell indices.
#[derive(Debug, Clone)]
pub struct TupleBuffer {
    pub tuples: Vec<TransitionTuple>,
    pub preprocessor: Preprocessor,
    pub state_dim: usize,
    pub action_count: usize,
    /// Standardized `s` of every tuple, row-major `n × state_dim`.
    pub features: Vec<f64>,
    /// Standardized `s'` of every tuple, row-major `n × state_dim`.
    pub next_features: Vec<f64>,
}

impl TupleBuffer {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_feature(&self, i: usize) -> &[f64] {
        &self.next_features[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Grid cell of `s` and `s'` for tuple `i`, when built on a grid.
    pub fn cells(&self, i: usize) -> Option<(usize, usize)> {
        let g = self.preprocessor.grid.as_ref()?;
        let t = &self.tuples[i];
        Some((g.discretize(&t.s), g.discretize(&t.s_next)))
    }
}

/// Collects the tuples of all episodes without crossing episode boundaries.
pub fn extract_tuples(trajectories: &[Trajectory]) -> Vec<TransitionTuple> {
    trajectories
        .iter()
        .flat_map(|traj| {
            traj.steps.windows(2).map(move |w| TransitionTuple {
                s: w[0].0.clone(),
                a: w[0].1,
                s_next: w[1].0.clone(),
                a_next: w[1].1,
                episode_id: traj.episode_id,
            })
        })
        .collect()
}

/// Builds the tuple buffer. With a grid, every state is snapped to its cell
/// centre first. With `standardize`, features are z-scored over all states
/// appearing in the buffer; otherwise the identity transform is used.
pub fn to_buffer_with(
    trajectories: &[Trajectory],
    action_count: usize,
    standardize: bool,
    grid: Option<GridSpec>,
) -> Result<TupleBuffer> {
    let mut tuples = extract_tuples(trajectories);
    if tuples.is_empty() {
        return Err(Error::Input("dataset yields no transition tuples (every episode has < 2 steps)".into()));
    }
    let state_dim = tuples[0].s.len();
    for t in &tuples {
        if t.s.len() != state_dim || t.s_next.len() != state_dim {
            return Err(Error::Input("states of differing dimension in one dataset".into()));
        }
        if t.a >= action_count || t.a_next >= action_count {
            return Err(Error::Input(format!("action outside 0..{action_count} in episode {}", t.episode_id)));
        }
    }
    if let Some(g) = &grid {
        if g.cells_per_dim.len() != state_dim {
            return Err(Error::Config("grid dimension differs from state dimension".into()));
        }
        for t in tuples.iter_mut() {
            t.s = g.cell_center(g.discretize(&t.s));
            t.s_next = g.cell_center(g.discretize(&t.s_next));
        }
    }
    let standardizer = if standardize {
        Standardizer::fit(
            tuples.iter().flat_map(|t| [t.s.as_slice(), t.s_next.as_slice()]),
            state_dim,
        )
    } else {
        Standardizer::identity(state_dim)
    };
    let features = tuples.iter().flat_map(|t| standardizer.apply(&t.s)).collect();
    let next_features = tuples.iter().flat_map(|t| standardizer.apply(&t.s_next)).collect();
    Ok(TupleBuffer {
        tuples,
        preprocessor: Preprocessor { grid, standardizer },
        state_dim,
        action_count,
        features,
        next_features,
    })
}

/// Continuous-state buffer; see [`to_buffer_with`].
pub fn to_buffer(trajectories: &[Trajectory], action_count: usize, standardize: bool) -> Result<TupleBuffer> {
    to_buffer_with(trajectories, action_count, standardize, None)
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub episode_id: u64,
    pub step_index: usize,
    pub state: Vec<f64>,
    pub action: usize,
    /// Episode-level flag: whether the episode ended by termination.
    #[serde(default)]
    pub terminal: bool,
}

pub fn write_dataset<W: Write>(trajectories: &[Trajectory], mut w: W) -> Result<()> {
    for traj in trajectories {
        for (t, (state, action)) in traj.steps.iter().enumerate() {
            let rec = StepRecord {
                episode_id: traj.episode_id,
                step_index: t,
                state: state.clone(),
                action: *action,
                terminal: traj.terminal,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_dataset(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(trajectories, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses line-delimited step records. Steps of one episode must be
/// contiguous and numbered from 0; blank lines are ignored.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if rec.state.is_empty() || rec.state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: lineno, message: "field `state` must be a non-empty finite vector".into() });
        }
        let fresh = out.last().map_or(true, |t| t.episode_id != rec.episode_id);
        if fresh {
            if out.iter().any(|t| t.episode_id == rec.episode_id) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("episode {} is not contiguous", rec.episode_id),
                });
            }
            out.push(Trajectory { episode_id: rec.episode_id, steps: Vec::new(), terminal: rec.terminal });
        }
        let traj = out.last_mut().expect("pushed above");
        if rec.step_index != traj.steps.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "field `step_index` is {} but episode {} expects {}",
                    rec.step_index,
                    rec.episode_id,
                    traj.steps.len()
                ),
            });
        }
        if let Some((first, _)) = out.first().and_then(|t| t.steps.first()) {
            if first.len() != rec.state.len() {
                return Err(Error::Parse { line: lineno, message: "field `state` changes dimension".into() });
            }
        }
        let traj = out.last_mut().expect("pushed above");
        traj.terminal = rec.terminal;
        traj.steps.push((rec.state, rec.action));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Subset of `pool` chosen uniformly without replacement.
pub fn draw_without_replacement<R: Rng + ?Sized>(pool: &[Trajectory], count: usize, rng: &mut R) -> Result<Vec<Trajectory>> {
    if count > pool.len() {
        return Err(Error::Config(format!("pool of {} trajectories cannot supply {count}", pool.len())));
    }
    let picked = rand::seq::index::sample(rng, pool.len(), count);
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}
