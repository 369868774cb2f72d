//! Built-in deterministic environments.
//!
//! The discrete environments (chain, four rooms) expose both a step
//! interface and their exact [`FiniteHitMdp`] model, so tabular solutions
//! and learned agents can be cross-checked on the identical process. The
//! pendulum is the continuous desk-scale task. All environments are
//! deterministic under a fixed seed stream.

use crate::math;
use crate::mdp::{FiniteHitMdp, RegularizerMode};
use crate::rng::Stream;
use alloc::vec;
use alloc::vec::Vec;

/// Continuous-interface environment description.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action: ActionSpace,
    pub max_episode_steps: usize,
    pub reward_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    /// Box `[-bound, bound]^dim`.
    Continuous { dim: usize, bound: f64 },
    /// Finite action set (driven through the continuous interface by
    /// binning the first action coordinate).
    Discrete { count: usize },
}

impl ActionSpace {
    /// Dimension of the continuous action vector an agent must emit.
    pub fn agent_action_dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim, .. } => *dim,
            ActionSpace::Discrete { .. } => 1,
        }
    }
}

/// One transition through the continuous interface.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode over (terminal state reached or step cap hit).
    pub done: bool,
    /// Episode ended only because of the step cap.
    pub truncated: bool,
}

/// Continuous-interface environment. The caller owns the random stream so
/// determinism composes with the rest of a run.
pub trait Env {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, stream: &mut Stream) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
}

/// Finite tabular environment with an exact HiT-MDP export.
pub trait FiniteEnv {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn max_episode_steps(&self) -> usize;
    fn state(&self) -> usize;
    fn reset(&mut self) -> usize;
    /// `(next_state, reward, terminal)`.
    fn step(&mut self, action: usize) -> (usize, f64, bool);
    /// Low-dimensional observation of a state for function approximation.
    fn observe(&self, state: usize) -> Vec<f64>;
    fn obs_dim(&self) -> usize;
    /// Exact model of this process: same dynamics, same rewards. `K` only
    /// sizes the policy tables; the environment itself has no options.
    fn to_hitmdp(&self, n_options: usize, discount: f64) -> FiniteHitMdp;
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvError {
    ChainLengthOutOfRange(usize),
}

impl core::fmt::Display for EnvError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvError::ChainLengthOutOfRange(n) => {
                write!(f, "chain length {n} outside [2, 50]")
            }
        }
    }
}

impl core::error::Error for EnvError {}

/// An `n`-state chain. Action 0 moves left, action 1 moves right; the
/// right terminus is absorbing and pays reward 1 on every step taken from
/// it (at which point the episode is over). Reset always starts at state 0.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    n: usize,
    state: usize,
}

impl ChainEnv {
    pub fn new(n: usize) -> Result<Self, EnvError> {
        if !(2..=50).contains(&n) {
            return Err(EnvError::ChainLengthOutOfRange(n));
        }
        Ok(ChainEnv { n, state: 0 })
    }

    fn terminus(&self) -> usize {
        self.n - 1
    }
}

impl FiniteEnv for ChainEnv {
    fn n_states(&self) -> usize {
        self.n
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn max_episode_steps(&self) -> usize {
        200
    }

    fn state(&self) -> usize {
        self.state
    }

    fn reset(&mut self) -> usize {
        self.state = 0;
        self.state
    }

    fn step(&mut self, action: usize) -> (usize, f64, bool) {
        debug_assert!(action < 2);
        let s = self.state;
        if s == self.terminus() {
            // Absorbing: stepping from the terminus pays 1 and ends the
            // episode, mirroring the exported model's self-loop reward.
            return (s, 1.0, true);
        }
        let next = if action == 0 { s.saturating_sub(1) } else { s + 1 };
        self.state = next;
        (next, 0.0, false)
    }

    fn observe(&self, state: usize) -> Vec<f64> {
        vec![2.0 * state as f64 / (self.n - 1) as f64 - 1.0]
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn to_hitmdp(&self, n_options: usize, discount: f64) -> FiniteHitMdp {
        let s_n = self.n;
        let a_n = 2;
        let mut transition = vec![0.0; s_n * a_n * s_n];
        let mut reward = vec![0.0; s_n * a_n];
        let terminus = self.terminus();
        for s in 0..s_n {
            for a in 0..a_n {
                let next = if s == terminus {
                    terminus
                } else if a == 0 {
                    s.saturating_sub(1)
                } else {
                    s + 1
                };
                transition[(s * a_n + a) * s_n + next] = 1.0;
                if s == terminus {
                    reward[s * a_n + a] = 1.0;
                }
            }
        }
        let mut initial = vec![0.0; s_n * n_options];
        initial[0] = 1.0; // state 0, previous option 0
        FiniteHitMdp::new(
            s_n,
            n_options,
            a_n,
            transition,
            reward,
            RegularizerMode::Zero,
            discount,
            initial,
        )
        .expect("chain tables are valid")
    }
}

/// The classic 13x13 four-rooms grid (104 open cells). Deterministic
/// moves; bumping a wall stays put. Reward 1 on the transition into the
/// goal; the goal is absorbing with zero reward and ends the episode.
#[derive(Clone, Debug)]
pub struct FourRoomsEnv {
    /// Open-cell index per (row, col), `usize::MAX` for walls.
    cell_index: Vec<usize>,
    /// (row, col) per open-cell index.
    cells: Vec<(usize, usize)>,
    start: usize,
    goal: usize,
    state: usize,
}

const FOUR_ROOMS_LAYOUT: [&str; 13] = [
    "wwwwwwwwwwwww",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "w     w     w",
    "ww wwww     w",
    "w     www www",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "wwwwwwwwwwwww",
];

pub const FOUR_ROOMS_SIDE: usize = 13;
/// Up, down, left, right.
pub const FOUR_ROOMS_ACTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

impl FourRoomsEnv {
    pub fn new() -> Self {
        let mut cell_index = vec![usize::MAX; FOUR_ROOMS_SIDE * FOUR_ROOMS_SIDE];
        let mut cells = Vec::new();
        for (r, row) in FOUR_ROOMS_LAYOUT.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch == b' ' {
                    cell_index[r * FOUR_ROOMS_SIDE + c] = cells.len();
                    cells.push((r, c));
                }
            }
        }
        let start = cell_index[FOUR_ROOMS_SIDE + 1]; // (1, 1)
        let goal = cell_index[11 * FOUR_ROOMS_SIDE + 11]; // (11, 11)
        debug_assert_ne!(start, usize::MAX);
        debug_assert_ne!(goal, usize::MAX);
        FourRoomsEnv { cell_index, cells, start, goal, state: start }
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn cell_of(&self, state: usize) -> (usize, usize) {
        self.cells[state]
    }

    fn next_cell(&self, state: usize, action: usize) -> usize {
        let (r, c) = self.cells[state];
        let (dr, dc) = FOUR_ROOMS_ACTIONS[action];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        let idx = self.cell_index[nr as usize * FOUR_ROOMS_SIDE + nc as usize];
        if idx == usize::MAX {
            state
        } else {
            idx
        }
    }
}

impl Default for FourRoomsEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl FiniteEnv for FourRoomsEnv {
    fn n_states(&self) -> usize {
        self.cells.len()
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn max_episode_steps(&self) -> usize {
        500
    }

    fn state(&self) -> usize {
        self.state
    }

    fn reset(&mut self) -> usize {
        self.state = self.start;
        self.state
    }

    fn step(&mut self, action: usize) -> (usize, f64, bool) {
        debug_assert!(action < 4);
        let s = self.state;
        if s == self.goal {
            return (s, 0.0, true);
        }
        let next = self.next_cell(s, action);
        self.state = next;
        if next == self.goal {
            (next, 1.0, true)
        } else {
            (next, 0.0, false)
        }
    }

    fn observe(&self, state: usize) -> Vec<f64> {
        let (r, c) = self.cells[state];
        vec![r as f64 / 6.0 - 1.0, c as f64 / 6.0 - 1.0]
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn to_hitmdp(&self, n_options: usize, discount: f64) -> FiniteHitMdp {
        let s_n = self.n_states();
        let a_n = 4;
        let mut transition = vec![0.0; s_n * a_n * s_n];
        let mut reward = vec![0.0; s_n * a_n];
        for s in 0..s_n {
            for a in 0..a_n {
                let next = if s == self.goal { self.goal } else { self.next_cell(s, a) };
                transition[(s * a_n + a) * s_n + next] = 1.0;
                if s != self.goal && next == self.goal {
                    reward[s * a_n + a] = 1.0;
                }
            }
        }
        let mut initial = vec![0.0; s_n * n_options];
        initial[self.start * n_options] = 1.0;
        FiniteHitMdp::new(
            s_n,
            n_options,
            a_n,
            transition,
            reward,
            RegularizerMode::Zero,
            discount,
            initial,
        )
        .expect("four rooms tables are valid")
    }
}

/// Drives a [`FiniteEnv`] through the continuous interface: observations
/// come from [`FiniteEnv::observe`], the first action coordinate in
/// `[-1, 1]` is binned uniformly into the discrete actions, and the step
/// cap truncates episodes.
#[derive(Clone, Debug)]
pub struct Discretized<E: FiniteEnv> {
    pub inner: E,
    steps: usize,
}

impl<E: FiniteEnv> Discretized<E> {
    pub fn new(inner: E) -> Self {
        Discretized { inner, steps: 0 }
    }

    pub fn bin_action(&self, a: f64) -> usize {
        let count = self.inner.n_actions();
        let clamped = a.clamp(-1.0, 1.0);
        let idx = math::floor((clamped + 1.0) / 2.0 * count as f64) as usize;
        idx.min(count - 1)
    }
}

impl<E: FiniteEnv> Env for Discretized<E> {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: self.inner.obs_dim(),
            action: ActionSpace::Discrete { count: self.inner.n_actions() },
            max_episode_steps: self.inner.max_episode_steps(),
            reward_range: (0.0, 1.0),
        }
    }

    fn reset(&mut self, _stream: &mut Stream) -> Vec<f64> {
        self.steps = 0;
        let s = self.inner.reset();
        self.inner.observe(s)
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = self.bin_action(action[0]);
        let (next, reward, terminal) = self.inner.step(a);
        self.steps += 1;
        let truncated = !terminal && self.steps >= self.inner.max_episode_steps();
        StepResult {
            obs: self.inner.observe(next),
            reward,
            done: terminal || truncated,
            truncated,
        }
    }
}

/// Classic torque-limited pendulum swing-up. State `(theta, theta_dot)`
/// with `theta = 0` upright; observation `(cos theta, sin theta,
/// theta_dot)`; reward `-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2)`;
/// semi-implicit Euler at `dt = 0.05`; episodes of 200 steps.
#[derive(Clone, Debug)]
pub struct PendulumEnv {
    pub theta: f64,
    pub theta_dot: f64,
    steps: usize,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
}

impl PendulumEnv {
    pub fn new() -> Self {
        PendulumEnv {
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
        }
    }

    fn observation(&self) -> Vec<f64> {
        vec![math::cos(self.theta), math::sin(self.theta), self.theta_dot]
    }

    /// One integrator step at an arbitrary `dt`, without the episode
    /// bookkeeping (used by the fine-step integration checks).
    pub fn integrate(&mut self, torque: f64, dt: f64) {
        let accel = 3.0 * self.gravity / (2.0 * self.length) * math::sin(self.theta)
            + 3.0 / (self.mass * self.length * self.length) * torque;
        self.theta_dot = (self.theta_dot + accel * dt).clamp(-self.max_speed, self.max_speed);
        self.theta += self.theta_dot * dt;
    }

    /// Total mechanical energy of the uncontrolled rod pendulum
    /// (`theta = 0` is upright, so the potential is `+mg(l/2) cos theta`).
    pub fn energy(&self) -> f64 {
        let inertia = self.mass * self.length * self.length / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + self.mass * self.gravity * (self.length / 2.0) * math::cos(self.theta)
    }
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PendulumEnv {
    fn spec(&self) -> EnvSpec {
        let worst = core::f64::consts::PI * core::f64::consts::PI
            + 0.1 * self.max_speed * self.max_speed
            + 0.001 * self.max_torque * self.max_torque;
        EnvSpec {
            obs_dim: 3,
            action: ActionSpace::Continuous { dim: 1, bound: self.max_torque },
            max_episode_steps: 200,
            reward_range: (-worst, 0.0),
        }
    }

    fn reset(&mut self, stream: &mut Stream) -> Vec<f64> {
        self.theta = stream.uniform_in(-core::f64::consts::PI, core::f64::consts::PI);
        self.theta_dot = stream.uniform_in(-1.0, 1.0);
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let u = action[0].clamp(-self.max_torque, self.max_torque);
        let angle = math::wrap_angle(self.theta);
        let reward = -(angle * angle + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        self.integrate(u, self.dt);
        self.steps += 1;
        let truncated = self.steps >= 200;
        StepResult { obs: self.observation(), reward, done: truncated, truncated }
    }
}

/// Running mean/variance normalizer (Welford update). Normalization is the
/// identity until two samples have been folded in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        RunningNormalizer { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    /// Population variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|&m| m / self.count as f64).collect()
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// `(x - mean) / sqrt(var + 1e-8)`, folding `x` into the moments first
    /// when `update` is set.
    pub fn normalize(&mut self, x: &[f64], update: bool) -> Vec<f64> {
        if update {
            self.update(x);
        }
        if self.count < 2 {
            return x.to_vec();
        }
        let var = self.variance();
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i]) / math::sqrt(var[i] + 1e-8))
            .collect()
    }
}
