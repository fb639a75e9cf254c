//! Classic-control environments: MountainCar, CartPole and Acrobot.
//!
//! The dynamics follow the standard published equations of motion with the
//! usual physical constants. Stepping is a pure function of
//! `(state, action, step_index)`; only `reset` draws randomness, and it does
//! so from a generator seeded by the caller.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    MountainCar,
    CartPole,
    Acrobot,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::MountainCar, EnvId::CartPole, EnvId::Acrobot];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::MountainCar => "mountaincar",
            EnvId::CartPole => "cartpole",
            EnvId::Acrobot => "acrobot",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mountaincar" => Ok(EnvId::MountainCar),
            "cartpole" => Ok(EnvId::CartPole),
            "acrobot" => Ok(EnvId::Acrobot),
            other => Err(Error::Config(format!(
                "unknown environment `{other}` (expected mountaincar, cartpole or acrobot)"
            ))),
        }
    }
}

/// Static description of an environment's observation and action spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_count: usize,
    pub state_bounds: Vec<(f64, f64)>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn clip(&self, state: &mut [f64]) {
        for (x, &(lo, hi)) in state.iter_mut().zip(&self.state_bounds) {
            *x = x.clamp(lo, hi);
        }
    }

    pub fn contains(&self, state: &[f64]) -> bool {
        state.len() == self.state_dim
            && state
                .iter()
                .zip(&self.state_bounds)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

// MountainCar
const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL_POS: f64 = 0.5;
const MC_FORCE: f64 = 0.001;
const MC_GRAVITY: f64 = 0.0025;

// CartPole
const CP_GRAVITY: f64 = 9.8;
const CP_MASS_CART: f64 = 1.0;
const CP_MASS_POLE: f64 = 0.1;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_FORCE: f64 = 10.0;
const CP_TAU: f64 = 0.02;
const CP_THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
const CP_X_LIMIT: f64 = 2.4;
// Surrogate bounds for the unbounded velocity dimensions.
const CP_VEL_BOUND: f64 = 10.0;

// Acrobot
const AC_DT: f64 = 0.2;
const AC_LINK_LENGTH_1: f64 = 1.0;
const AC_MASS_1: f64 = 1.0;
const AC_MASS_2: f64 = 1.0;
const AC_COM_1: f64 = 0.5;
const AC_COM_2: f64 = 0.5;
const AC_MOI: f64 = 1.0;
const AC_MAX_VEL_1: f64 = 4.0 * PI;
const AC_MAX_VEL_2: f64 = 9.0 * PI;
const AC_GRAVITY: f64 = 9.8;

pub fn env_spec(id: EnvId) -> EnvSpec {
    match id {
        EnvId::MountainCar => EnvSpec {
            state_dim: 2,
            action_count: 3,
            state_bounds: vec![(MC_MIN_POS, MC_MAX_POS), (-MC_MAX_SPEED, MC_MAX_SPEED)],
            max_episode_steps: 200,
        },
        EnvId::CartPole => EnvSpec {
            state_dim: 4,
            action_count: 2,
            state_bounds: vec![
                (-2.0 * CP_X_LIMIT, 2.0 * CP_X_LIMIT),
                (-CP_VEL_BOUND, CP_VEL_BOUND),
                (-2.0 * CP_THETA_LIMIT, 2.0 * CP_THETA_LIMIT),
                (-CP_VEL_BOUND, CP_VEL_BOUND),
            ],
            max_episode_steps: 500,
        },
        EnvId::Acrobot => EnvSpec {
            state_dim: 6,
            action_count: 3,
            state_bounds: vec![
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-AC_MAX_VEL_1, AC_MAX_VEL_1),
                (-AC_MAX_VEL_2, AC_MAX_VEL_2),
            ],
            max_episode_steps: 500,
        },
    }
}

/// Draws an initial state from the environment's canonical start distribution.
pub fn reset(id: EnvId, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    match id {
        EnvId::MountainCar => vec![rng.random_range(-0.6..=-0.4), 0.0],
        EnvId::CartPole => (0..4).map(|_| rng.random_range(-0.05..=0.05)).collect(),
        EnvId::Acrobot => {
            let s: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.1..=0.1));
            acrobot_observation(&s)
        }
    }
}

/// Advances one step. `step_index` is the zero-based index of this transition
/// within the episode and only drives truncation.
pub fn step(id: EnvId, state: &[f64], action: usize, step_index: usize) -> Result<StepResult> {
    let spec = env_spec(id);
    if action >= spec.action_count {
        return Err(Error::Input(format!(
            "action {action} out of range for {id} ({} actions)",
            spec.action_count
        )));
    }
    if state.len() != spec.state_dim || state.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input(format!(
            "{id} expects a finite state of dimension {}, got {state:?}",
            spec.state_dim
        )));
    }
    let (mut next_state, reward, terminated) = match id {
        EnvId::MountainCar => mountaincar_step(state, action),
        EnvId::CartPole => cartpole_step(state, action),
        EnvId::Acrobot => acrobot_step(state, action),
    };
    spec.clip(&mut next_state);
    Ok(StepResult {
        next_state,
        reward,
        terminated,
        truncated: step_index + 1 >= spec.max_episode_steps,
    })
}

fn mountaincar_step(state: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let (mut position, mut velocity) = (state[0], state[1]);
    velocity += (action as f64 - 1.0) * MC_FORCE + (3.0 * position).cos() * (-MC_GRAVITY);
    velocity = velocity.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
    position += velocity;
    position = position.clamp(MC_MIN_POS, MC_MAX_POS);
    if position == MC_MIN_POS && velocity < 0.0 {
        velocity = 0.0;
    }
    let terminated = position >= MC_GOAL_POS && velocity >= 0.0;
    (vec![position, velocity], -1.0, terminated)
}

fn cartpole_step(state: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
    let force = if action == 1 { CP_FORCE } else { -CP_FORCE };
    let total_mass = CP_MASS_CART + CP_MASS_POLE;
    let pole_mass_length = CP_MASS_POLE * CP_HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();

    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (CP_GRAVITY * sin - cos * temp)
        / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

    let next = vec![
        x + CP_TAU * x_dot,
        x_dot + CP_TAU * x_acc,
        theta + CP_TAU * theta_dot,
        theta_dot + CP_TAU * theta_acc,
    ];
    let terminated = next[0].abs() > CP_X_LIMIT || next[2].abs() > CP_THETA_LIMIT;
    (next, 1.0, terminated)
}

/// Maps internal joint angles/velocities to the 6-component observation
/// `(cos θ1, sin θ1, cos θ2, sin θ2, θ̇1, θ̇2)`.
pub fn acrobot_observation(s: &[f64; 4]) -> Vec<f64> {
    vec![s[0].cos(), s[0].sin(), s[1].cos(), s[1].sin(), s[2], s[3]]
}

/// Inverse of [`acrobot_observation`], with angles in `(-π, π]`.
pub fn acrobot_internal(obs: &[f64]) -> [f64; 4] {
    [obs[1].atan2(obs[0]), obs[3].atan2(obs[2]), obs[4], obs[5]]
}

fn acrobot_derivs(s: &[f64; 4], torque: f64) -> [f64; 4] {
    let (m1, m2, l1, lc1, lc2) = (AC_MASS_1, AC_MASS_2, AC_LINK_LENGTH_1, AC_COM_1, AC_COM_2);
    let (i1, i2, g) = (AC_MOI, AC_MOI, AC_GRAVITY);
    let [theta1, theta2, dtheta1, dtheta2] = *s;
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
    let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
        - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
        + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
        + phi2;
    let ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
    [dtheta1, dtheta2, ddtheta1, ddtheta2]
}

fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut y = x;
    while y > PI {
        y -= two_pi;
    }
    while y < -PI {
        y += two_pi;
    }
    y
}

fn acrobot_step(obs: &[f64], action: usize) -> (Vec<f64>, f64, bool) {
    let s = acrobot_internal(obs);
    let torque = action as f64 - 1.0;
    // One classical fourth-order Runge-Kutta step over the control interval.
    let add = |a: &[f64; 4], k: &[f64; 4], h: f64| -> [f64; 4] { std::array::from_fn(|i| a[i] + h * k[i]) };
    let k1 = acrobot_derivs(&s, torque);
    let k2 = acrobot_derivs(&add(&s, &k1, AC_DT / 2.0), torque);
    let k3 = acrobot_derivs(&add(&s, &k2, AC_DT / 2.0), torque);
    let k4 = acrobot_derivs(&add(&s, &k3, AC_DT), torque);
    let mut ns: [f64; 4] =
        std::array::from_fn(|i| s[i] + AC_DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    ns[0] = wrap_angle(ns[0]);
    ns[1] = wrap_angle(ns[1]);
    ns[2] = ns[2].clamp(-AC_MAX_VEL_1, AC_MAX_VEL_1);
    ns[3] = ns[3].clamp(-AC_MAX_VEL_2, AC_MAX_VEL_2);
    let terminated = -ns[0].cos() - (ns[1] + ns[0]).cos() > 1.0;
    let reward = if terminated { 0.0 } else { -1.0 };
    (acrobot_observation(&ns), reward, terminated)
}

/// Uniform axis-aligned grid over a box of the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_per_dim: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn new(cells_per_dim: Vec<usize>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if cells_per_dim.len() != bounds.len() || cells_per_dim.is_empty() {
            return Err(Error::Config("grid cell counts and bounds differ in length".into()));
        }
        if cells_per_dim.iter().any(|&c| c == 0) {
            return Err(Error::Config("grid needs at least one cell per dimension".into()));
        }
        if bounds.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("grid bounds must satisfy low < high".into()));
        }
        Ok(Self { cells_per_dim, bounds })
    }

    /// The same number of cells along every dimension of `spec`.
    pub fn uniform(spec: &EnvSpec, cells: usize) -> Result<Self> {
        Self::new(vec![cells; spec.state_dim], spec.state_bounds.clone())
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_dim.iter().product()
    }

    fn axis_index(&self, dim: usize, x: f64) -> usize {
        let (lo, hi) = self.bounds[dim];
        let cells = self.cells_per_dim[dim];
        let x = x.clamp(lo, hi);
        let idx = ((x - lo) / (hi - lo) * cells as f64).floor() as usize;
        idx.min(cells - 1)
    }

    /// Row-major cell index; the first dimension varies slowest.
    pub fn discretize(&self, state: &[f64]) -> usize {
        state
            .iter()
            .enumerate()
            .fold(0, |acc, (d, &x)| acc * self.cells_per_dim[d] + self.axis_index(d, x))
    }

    /// Centre point of a cell, the canonical representative of a discrete state.
    pub fn cell_center(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut center = vec![0.0; self.cells_per_dim.len()];
        for d in (0..self.cells_per_dim.len()).rev() {
            let cells = self.cells_per_dim[d];
            let i = rem % cells;
            rem /= cells;
            let (lo, hi) = self.bounds[d];
            center[d] = lo + (i as f64 + 0.5) * (hi - lo) / cells as f64;
        }
        center
    }
}

/// Single-owner episode state machine wrapping [`reset`] and [`step`].
#[derive(Debug, Clone)]
pub struct Environment {
    id: EnvId,
    spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
    done: bool,
}

impl Environment {
    pub fn new(id: EnvId, seed: u64) -> Self {
        Self { id, spec: env_spec(id), state: reset(id, seed), steps: 0, done: false }
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, seed: u64) -> &[f64] {
        self.state = reset(self.id, seed);
        self.steps = 0;
        self.done = false;
        &self.state
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Input(format!("{} episode already finished", self.id)));
        }
        let result = step(self.id, &self.state, action, self.steps)?;
        self.state.clone_from(&result.next_state);
        self.steps += 1;
        self.done = result.done();
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        assert_eq!(reset(EnvId::CartPole, 7), reset(EnvId::CartPole, 7));
        assert_ne!(reset(EnvId::CartPole, 7), reset(EnvId::CartPole, 8));
    }

    #[test]
    fn mountaincar_reset_range() {
        for seed in 0..200 {
            let s = reset(EnvId::MountainCar, seed);
            assert!((-0.6..=-0.4).contains(&s[0]));
            assert_eq!(s[1], 0.0);
        }
    }

    #[test]
    fn acrobot_reset_range() {
        for seed in 0..200 {
            let obs = reset(EnvId::Acrobot, seed);
            let s = acrobot_internal(&obs);
            for x in s {
                assert!(x.abs() <= 0.1 + 1e-12, "{x}");
            }
        }
    }

    #[test]
    fn unknown_env_is_config_error() {
        assert!(matches!("pendulum".parse::<EnvId>(), Err(Error::Config(_))));
    }

    #[test]
    fn specs() {
        let cp = env_spec(EnvId::CartPole);
        assert_eq!((cp.state_dim, cp.action_count), (4, 2));
        let mc = env_spec(EnvId::MountainCar);
        assert_eq!((mc.state_dim, mc.action_count), (2, 3));
        let ac = env_spec(EnvId::Acrobot);
        assert_eq!((ac.state_dim, ac.action_count), (6, 3));
        for id in EnvId::ALL {
            let s = env_spec(id);
            assert!(s.state_bounds.iter().all(|&(lo, hi)| lo < hi));
            assert!(s.max_episode_steps >= 1);
        }
    }

    #[test]
    fn cartpole_push_right_from_rest() {
        let r = step(EnvId::CartPole, &[0.0; 4], 1, 0).unwrap();
        // x_acc = F/M_total minus the pole's reaction; positive for a rightward push.
        assert!(r.next_state[1] > 0.0);
        assert_eq!(r.reward, 1.0);
        assert!(!r.terminated && !r.truncated);
    }

    #[test]
    fn cartpole_closed_form_first_step() {
        // From rest with θ = 0: temp = F/M, θ̈ = -temp / (l(4/3 - m/M)), ẍ = temp - m l θ̈ / M.
        let m_total = 1.1;
        let temp = 10.0 / m_total;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / m_total));
        let x_acc = temp - 0.05 * theta_acc / m_total;
        let r = step(EnvId::CartPole, &[0.0; 4], 1, 0).unwrap();
        assert!((r.next_state[1] - 0.02 * x_acc).abs() < 1e-15);
        assert!((r.next_state[3] - 0.02 * theta_acc).abs() < 1e-15);
    }

    #[test]
    fn mountaincar_goal_terminates() {
        let r = step(EnvId::MountainCar, &[0.49, 0.05], 2, 10).unwrap();
        assert!(r.next_state[0] >= 0.5);
        assert!(r.terminated);
        assert_eq!(r.reward, -1.0);
    }

    #[test]
    fn truncation_at_step_limit() {
        for id in EnvId::ALL {
            let spec = env_spec(id);
            let s = reset(id, 3);
            let r = step(id, &s, 0, spec.max_episode_steps - 1).unwrap();
            assert!(r.truncated);
            let r = step(id, &s, 0, spec.max_episode_steps - 2).unwrap();
            assert!(!r.truncated);
        }
    }

    #[test]
    fn out_of_range_action() {
        assert!(matches!(step(EnvId::CartPole, &[0.0; 4], 2, 0), Err(Error::Input(_))));
        assert!(step(EnvId::MountainCar, &[-0.5, 0.0], 3, 0).is_err());
    }

    #[test]
    fn acrobot_observation_roundtrip() {
        let s = [0.3, -2.0, 1.5, -4.0];
        let back = acrobot_internal(&acrobot_observation(&s));
        for (a, b) in s.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn acrobot_at_rest_hanging_stays_put() {
        let obs = acrobot_observation(&[0.0; 4]);
        let r = step(EnvId::Acrobot, &obs, 1, 0).unwrap();
        for (a, b) in obs.iter().zip(&r.next_state) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.reward, -1.0);
    }

    #[test]
    fn discretize_corners_and_midpoint() {
        let spec = env_spec(EnvId::MountainCar);
        let grid = GridSpec::uniform(&spec, 15).unwrap();
        assert_eq!(grid.discretize(&[-1.2, -0.07]), 0);
        assert_eq!(grid.discretize(&[0.6, 0.07]), 224);
        let sym = GridSpec::new(vec![15, 15], vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
        assert_eq!(sym.discretize(&[0.0, 0.0]), 112);
        // Out-of-bounds states are clipped first.
        assert_eq!(grid.discretize(&[-5.0, -5.0]), 0);
        assert_eq!(grid.discretize(&[5.0, 5.0]), 224);
    }

    #[test]
    fn discretize_boundary_goes_up() {
        let g = GridSpec::new(vec![4], vec![(0.0, 4.0)]).unwrap();
        assert_eq!(g.discretize(&[1.0]), 1);
        assert_eq!(g.discretize(&[0.999]), 0);
        assert_eq!(g.discretize(&[4.0]), 3);
    }

    #[test]
    fn cell_center_maps_back() {
        let spec = env_spec(EnvId::MountainCar);
        let grid = GridSpec::uniform(&spec, 15).unwrap();
        for idx in 0..grid.cell_count() {
            assert_eq!(grid.discretize(&grid.cell_center(idx)), idx);
        }
    }

    #[test]
    fn environment_stops_after_done() {
        let mut env = Environment::new(EnvId::CartPole, 0);
        let mut n = 0;
        while !env.is_done() {
            env.step(0).unwrap();
            n += 1;
        }
        assert!(n < 500);
        assert!(env.step(0).is_err());
    }
}
