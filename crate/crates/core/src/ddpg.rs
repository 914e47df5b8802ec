//! Deep deterministic policy gradient agent for the reserve environment.
//!
//! The actor maps a normalized state (caps, prices, request) to a raw action
//! in `[0, 1]^n`; the critic scores the concatenation of state and raw
//! action. Both have slowly tracking target copies. Training follows the
//! usual loop: act with Gaussian exploration, store the transition, and once
//! the replay buffer holds a full batch, run one critic regression step, one
//! actor ascent step and one soft update of each target per environment step.

use crate::allocator::capacity_based;
use crate::environment::{project_action, reward, EnvConfig, EnvError, ReserveAction, ReserveEnv, ReserveState, SamplingRanges};
use crate::feeder::FeederModel;
use crate::neural::{Activation, AdamState, Direction, Mlp, NeuralError};
use crate::powerflow::{Network, PowerFlowError};
use crate::scalar::Real;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Discount factor.
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Exploration noise std in raw-action units at the first episode.
    pub noise_std: f64,
    /// Noise std reached at the last episode (linear decay).
    pub noise_std_final: f64,
    /// Weight kept by a target network on each soft update.
    pub polyak_retention: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Store rewards relative to the capacity-proportional schedule's
    /// reward in the same state. The baseline depends on the state only, so
    /// the best action per state is unchanged, but the critic no longer has
    /// to model the large state-to-state spread of the raw reward. Logged
    /// rewards are always raw.
    pub capacity_baseline: bool,
    /// Gradient updates per environment step once warmed up.
    pub updates_per_step: usize,
    /// Ranges used to scale states into `[0, 1]`. Defaults to the
    /// environment's sampling ranges, which must then be non-degenerate.
    pub normalization: Option<SamplingRanges>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            actor_lr: 0.001,
            critic_lr: 0.002,
            gamma: 0.99,
            replay_capacity: 1500,
            batch_size: 200,
            hidden: vec![8, 8],
            noise_std: 0.1,
            noise_std_final: 0.01,
            polyak_retention: 0.995,
            episodes: 1500,
            seed: 0,
            updates_per_step: 1,
            capacity_baseline: true,
            normalization: None,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.polyak_retention) {
            return Err(format!("polyak_retention must lie in [0, 1], got {}", self.polyak_retention));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return Err(format!(
                "batch_size must be in 1..=replay_capacity ({}), got {}",
                self.replay_capacity, self.batch_size
            ));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err("learning rates must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std_final >= 0.0) {
            return Err("noise std must be non-negative".into());
        }
        if self.hidden.contains(&0) {
            return Err("hidden layer widths must be non-zero".into());
        }
        Ok(())
    }

    /// Exploration std for a given episode.
    pub fn noise_at(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.noise_std;
        }
        let frac = episode.min(self.episodes - 1) as f64 / (self.episodes - 1) as f64;
        self.noise_std + (self.noise_std_final - self.noise_std) * frac
    }

    fn ranges<'a>(&'a self, env: &'a EnvConfig) -> &'a SamplingRanges {
        self.normalization.as_ref().unwrap_or(&env.sampling)
    }
}

#[derive(Debug, Error)]
pub enum TrainError<T = f64> {
    #[error("agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("training diverged in episode {episode}: {source}")]
    Diverged {
        episode: usize,
        source: NeuralError,
        /// Agent as it stood at the end of the previous episode.
        last_good: Box<Agent<T>>,
    },
}

/// Min-max scales a state into `[0, 1]^(2n+1)`: caps, then prices, then
/// the request.
pub fn normalize_state(state: &ReserveState, ranges: &SamplingRanges) -> Result<Vec<f64>, EnvError> {
    let n = state.len();
    let degenerate = |field: &'static str, lo: f64, hi: f64| EnvError::EmptyRange { field, lo, hi };
    let mut out = Vec::with_capacity(2 * n + 1);
    for (i, &x) in state.r_max.iter().enumerate() {
        let r = ranges.r_max.get(i);
        if !(r.hi > r.lo) {
            return Err(degenerate("r_max", r.lo, r.hi));
        }
        out.push(r.normalize(x));
    }
    for (i, &x) in state.prices.iter().enumerate() {
        let r = ranges.price.get(i);
        if !(r.hi > r.lo) {
            return Err(degenerate("price", r.lo, r.hi));
        }
        out.push(r.normalize(x));
    }
    let r = ranges.r_tot;
    if !(r.hi > r.lo) {
        return Err(degenerate("r_tot", r.lo, r.hi));
    }
    out.push(r.normalize(state.r_tot));
    Ok(out)
}

fn cast<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub state: Vec<T>,
    pub action: Vec<T>,
    pub reward: T,
    pub next_state: Vec<T>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten once
/// full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<Transition<T>>,
    cursor: usize,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition<T>) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Slot-indexed access (not insertion order).
    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        self.items.get(i)
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition<T>> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Distinct slot indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(batch <= self.items.len(), "batch larger than buffer");
        index::sample(rng, self.items.len(), batch).into_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition<T>> {
        self.sample_indices(batch, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Actor output plus clipped Gaussian noise.
pub fn select_action<T: Real, R: Rng + ?Sized>(
    actor: &Mlp<T>,
    state: &[T],
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<T>, NeuralError> {
    let mut a = actor.forward(state)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite non-negative std");
        for x in &mut a {
            *x += T::lit(normal.sample(rng));
        }
    }
    for x in &mut a {
        *x = x.max(T::zero()).min(T::one());
    }
    Ok(a)
}

fn concat<T: Real>(s: &[T], a: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(s.len() + a.len());
    v.extend_from_slice(s);
    v.extend_from_slice(a);
    v
}

/// Bellman targets `y = r + gamma * Q'(s', mu'(s'))`, or `y = r` for
/// terminal transitions.
pub fn critic_target<T: Real>(
    critic_targ: &Mlp<T>,
    actor_targ: &Mlp<T>,
    batch: &[&Transition<T>],
    gamma: T,
) -> Result<Vec<T>, NeuralError> {
    batch
        .iter()
        .map(|t| {
            if t.done || gamma == T::zero() {
                return Ok(t.reward);
            }
            let a = actor_targ.forward(&t.next_state)?;
            let q = critic_targ.forward(&concat(&t.next_state, &a))?[0];
            Ok(t.reward + gamma * q)
        })
        .collect()
}

fn ensure_finite<T: Real>(net: &Mlp<T>) -> Result<(), NeuralError> {
    match net.params().iter().position(|p| !p.is_finite()) {
        Some(index) => Err(NeuralError::NonFinite {
            what: "parameter",
            index,
        }),
        None => Ok(()),
    }
}

/// One descent step on the mean squared Bellman error. Returns the loss
/// before the step.
pub fn critic_update<T: Real>(
    critic: &mut Mlp<T>,
    batch: &[&Transition<T>],
    targets: &[T],
    adam: &mut AdamState<T>,
) -> Result<T, NeuralError> {
    if targets.len() != batch.len() || batch.is_empty() {
        return Err(NeuralError::Dimension {
            context: "critic targets",
            expected: batch.len(),
            got: targets.len(),
        });
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut grads = vec![T::zero(); critic.param_count()];
    let mut loss = T::zero();
    for (t, &y) in batch.iter().zip(targets) {
        let trace = critic.forward_trace(&concat(&t.state, &t.action))?;
        let d = trace.output()[0] - y;
        loss += d * d * scale;
        critic.backward_into(&trace, &[T::lit(2.0) * d * scale], &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(NeuralError::NonFinite {
            what: "critic loss",
            index: 0,
        });
    }
    adam.step(critic, &grads, Direction::Descent)?;
    ensure_finite(critic)?;
    Ok(loss)
}

/// One ascent step on `J = mean Q(s, mu(s))`, differentiating through the
/// critic's action input. The critic is not modified. Returns `J` before
/// the step.
pub fn actor_update<T: Real>(
    actor: &mut Mlp<T>,
    critic: &Mlp<T>,
    batch: &[&Transition<T>],
    adam: &mut AdamState<T>,
) -> Result<T, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::Dimension {
            context: "actor batch",
            expected: 1,
            got: 0,
        });
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut grads = vec![T::zero(); actor.param_count()];
    let mut scratch = vec![T::zero(); critic.param_count()];
    let mut objective = T::zero();
    for t in batch {
        let a_trace = actor.forward_trace(&t.state)?;
        let c_trace = critic.forward_trace(&concat(&t.state, a_trace.output()))?;
        objective += c_trace.output()[0] * scale;
        let input_grad = critic.backward_into(&c_trace, &[scale], &mut scratch)?;
        actor.backward_into(&a_trace, &input_grad[t.state.len()..], &mut grads)?;
    }
    if !objective.is_finite() {
        return Err(NeuralError::NonFinite {
            what: "actor objective",
            index: 0,
        });
    }
    adam.step(actor, &grads, Direction::Ascent)?;
    ensure_finite(actor)?;
    Ok(objective)
}

/// `target <- retention * target + (1 - retention) * main`.
pub fn soft_update<T: Real>(target: &mut Mlp<T>, main: &Mlp<T>, retention: T) -> Result<(), NeuralError> {
    if !target.same_shape(main) {
        return Err(NeuralError::Dimension {
            context: "soft update",
            expected: target.param_count(),
            got: main.param_count(),
        });
    }
    let keep = T::one() - retention;
    for (t, &m) in target.params_mut().iter_mut().zip(main.params()) {
        *t = retention * *t + keep * m;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats<T> {
    pub critic_loss: T,
    pub actor_objective: T,
}

/// Actor, critic, their targets and optimizer state.
#[derive(Debug, Clone)]
pub struct Agent<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub actor_target: Mlp<T>,
    pub critic_target: Mlp<T>,
    actor_adam: AdamState<T>,
    critic_adam: AdamState<T>,
    config: AgentConfig,
}

const CHECKPOINT_FILES: [&str; 4] = ["actor.ckpt", "critic.ckpt", "actor_target.ckpt", "critic_target.ckpt"];

impl<T: Real> Agent<T> {
    /// Fresh agent for `n` DERs; targets start as copies of the main nets.
    pub fn new<R: Rng + ?Sized>(n: usize, config: &AgentConfig, rng: &mut R) -> Result<Self, NeuralError> {
        let state_dim = 2 * n + 1;
        let layers = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend(&config.hidden);
            d.push(output);
            d
        };
        let actor = Mlp::random(&layers(state_dim, n), Activation::Sigmoid, rng)?;
        let critic = Mlp::random(&layers(state_dim + n, 1), Activation::Linear, rng)?;
        Ok(Self::from_nets(actor.clone(), critic.clone(), actor, critic, config))
    }

    fn from_nets(actor: Mlp<T>, critic: Mlp<T>, actor_target: Mlp<T>, critic_target: Mlp<T>, config: &AgentConfig) -> Self {
        Self {
            actor_adam: AdamState::for_net(&actor, T::lit(config.actor_lr)),
            critic_adam: AdamState::for_net(&critic, T::lit(config.critic_lr)),
            actor,
            critic,
            actor_target,
            critic_target,
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn der_count(&self) -> usize {
        self.actor.output_dim()
    }

    /// One critic step, one actor step and both soft updates on a batch
    /// drawn from `buffer`.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer<T>, rng: &mut R) -> Result<UpdateStats<T>, NeuralError> {
        let batch = buffer.sample(self.config.batch_size.min(buffer.len()), rng);
        let gamma = T::lit(self.config.gamma);
        let y = critic_target(&self.critic_target, &self.actor_target, &batch, gamma)?;
        let critic_loss = critic_update(&mut self.critic, &batch, &y, &mut self.critic_adam)?;
        let actor_objective = actor_update(&mut self.actor, &self.critic, &batch, &mut self.actor_adam)?;
        let rho = T::lit(self.config.polyak_retention);
        soft_update(&mut self.actor_target, &self.actor, rho)?;
        soft_update(&mut self.critic_target, &self.critic, rho)?;
        Ok(UpdateStats {
            critic_loss,
            actor_objective,
        })
    }

    /// Writes the four networks into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NeuralError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let nets = [&self.actor, &self.critic, &self.actor_target, &self.critic_target];
        for (net, file) in nets.iter().zip(CHECKPOINT_FILES) {
            net.save(dir.join(file))?;
        }
        Ok(())
    }

    /// Reads networks written by [`save`](Self::save). Optimizer state
    /// starts fresh.
    pub fn load(dir: impl AsRef<Path>, config: &AgentConfig) -> Result<Self, NeuralError> {
        let dir = dir.as_ref();
        let [a, c, at, ct] = CHECKPOINT_FILES.map(|f| Mlp::load(dir.join(f)));
        Ok(Self::from_nets(a?, c?, at?, ct?, config))
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Sum of rewards over the episode's steps.
    pub total_reward: f64,
    pub cost_term: f64,
    pub violation_term: f64,
    pub loss_term: f64,
    pub voltage_term: f64,
    pub noise_std: f64,
    pub updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub agent: Agent<T>,
    pub log: Vec<EpisodeLog>,
}

/// Runs the full training loop on `feeder`.
pub fn train<T: Real>(
    env_cfg: &EnvConfig,
    agent_cfg: &AgentConfig,
    feeder: &FeederModel,
) -> Result<TrainOutcome<T>, TrainError<T>> {
    agent_cfg.validate().map_err(TrainError::Config)?;
    let network = Network::<f64>::new(feeder)?;
    let n = network.der_count();
    let mut env = ReserveEnv::new(network, env_cfg.clone(), agent_cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    let ranges = agent_cfg.ranges(env_cfg).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(agent_cfg.seed);
    let mut agent = Agent::<T>::new(n, agent_cfg, &mut rng)?;
    let mut buffer = ReplayBuffer::new(agent_cfg.replay_capacity);
    let mut log = Vec::with_capacity(agent_cfg.episodes);

    for episode in 0..agent_cfg.episodes {
        let last_good = agent.clone();
        let diverged = |source: NeuralError| TrainError::Diverged {
            episode,
            source,
            last_good: Box::new(last_good.clone()),
        };
        let noise_std = agent_cfg.noise_at(episode);
        let state = env.reset()?;
        let mut s = cast::<T>(&normalize_state(&state, &ranges)?);
        let mut entry = EpisodeLog {
            episode: episode + 1,
            total_reward: 0.0,
            cost_term: 0.0,
            violation_term: 0.0,
            loss_term: 0.0,
            voltage_term: 0.0,
            noise_std,
            updates: 0,
        };
        let baseline = if agent_cfg.capacity_baseline {
            let cap = capacity_based(&state);
            reward(&state, &cap, env.config(), env.network()).total
        } else {
            0.0
        };
        let mut steps = 0usize;
        loop {
            let a = select_action(&agent.actor, &s, noise_std, &mut rng).map_err(diverged)?;
            let raw: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
            let out = env.step(&raw)?;
            let s2 = cast::<T>(&normalize_state(&out.next_state, &ranges)?);
            let r = &out.reward;
            entry.total_reward += r.total;
            entry.cost_term += r.cost_term;
            entry.violation_term += r.violation_term;
            entry.loss_term += r.loss_term;
            entry.voltage_term += r.voltage_term;
            steps += 1;
            buffer.push(Transition {
                state: s,
                action: a,
                reward: T::lit(r.total - baseline),
                next_state: s2.clone(),
                done: out.done,
            });
            if buffer.len() >= agent_cfg.batch_size {
                for _ in 0..agent_cfg.updates_per_step {
                    agent.update(&buffer, &mut rng).map_err(diverged)?;
                    entry.updates += 1;
                }
            }
            if out.done {
                break;
            }
            s = s2;
        }
        let k = steps as f64;
        entry.cost_term /= k;
        entry.violation_term /= k;
        entry.loss_term /= k;
        entry.voltage_term /= k;
        log.push(entry);
    }
    Ok(TrainOutcome { agent, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub action: ReserveAction,
    pub latency: Duration,
}

/// Deterministic allocation for a state: normalize, run the actor, project.
pub fn infer<T: Real>(actor: &Mlp<T>, state: &ReserveState, ranges: &SamplingRanges) -> Result<Inference, TrainError<T>> {
    let start = Instant::now();
    let s = cast::<T>(&normalize_state(state, ranges)?);
    let raw = actor.forward(&s)?;
    let raw: Vec<f64> = raw.iter().map(|x| x.as_f64()).collect();
    let action = project_action(&raw, state);
    Ok(Inference {
        action,
        latency: start.elapsed(),
    })
}

/// Normalization ranges an agent trained under `env_cfg` expects.
pub fn normalization_ranges(env_cfg: &EnvConfig, agent_cfg: &AgentConfig) -> SamplingRanges {
    agent_cfg.ranges(env_cfg).clone()
}
