//! The full agent: epsilon-greedy acting over mixed value estimates,
//! transition recording, TD training on replay samples, periodic target
//! sync, and periodic planning that refills the value buffer.
//!
//! Mixing orientation: `Q = (1 - lambda) * Q_theta + lambda * Q_NP`, so
//! `lambda = 0` is the plain parametric baseline and larger lambda leans
//! harder on planned values. Planned adjustments are ephemeral: they live in
//! the value buffer and are never written back into network weights.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{AgentConfig, TraceMode};
use crate::knn::{Embedding, IndexError};
use crate::qfunc::{
    sync_target, train_step, AdamState, ApproxError, BatchItem, MlpQFunction, QFunction, TrainBatch,
};
use crate::replay::{ReplayError, ReplayMemory, Transition};
use crate::trace::{kbrl_qtables, nstep_trace, tcp_trace, TraceError};
use crate::value_buffer::ValueBuffer;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Monotone counters and episode bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentStats {
    pub env_steps: u64,
    pub train_steps: u64,
    pub planning_invocations: u64,
    /// Greedy act() calls that consulted the value buffer.
    pub value_buffer_lookups: u64,
    /// Lookups that returned an estimate.
    pub value_buffer_hits: u64,
    pub episodes_completed: u64,
    pub last_loss: Option<f32>,
    pub current_episode_return: f64,
    /// Returns of the most recent episodes (at most 100 kept).
    pub recent_returns: VecDeque<f64>,
}

impl AgentStats {
    /// Fraction of value-buffer lookups that found an estimate.
    pub fn hit_rate(&self) -> f64 {
        if self.value_buffer_lookups == 0 {
            0.0
        } else {
            self.value_buffer_hits as f64 / self.value_buffer_lookups as f64
        }
    }

    /// Mean return over the last (up to) 100 completed episodes.
    pub fn mean_recent_return(&self) -> Option<f64> {
        if self.recent_returns.is_empty() {
            return None;
        }
        Some(self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64)
    }
}

/// Linear decay of lambda to zero, armed by [`EvaAgent::set_lambda_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub start_step: u64,
    pub horizon: u32,
    pub initial_lambda: f32,
}

const RECENT_RETURN_WINDOW: usize = 100;

/// Owned pieces of an agent, as carried by a checkpoint.
pub struct AgentParts {
    pub cfg: AgentConfig,
    pub online: MlpQFunction,
    pub target: MlpQFunction,
    pub optimizer: AdamState,
    pub replay: ReplayMemory,
    pub value_buffer: ValueBuffer,
    pub rng: ChaCha8Rng,
    pub lambda: f32,
    pub anneal: Option<AnnealSchedule>,
    pub episode_id: u64,
    pub step_in_episode: u32,
    pub planning_enabled: bool,
    pub stats: AgentStats,
}

/// Cached encoder output for the observation the agent last acted on, so
/// `observe` does not re-run the encoder on the same observation.
#[derive(Debug, Clone)]
struct ActCache {
    obs: Vec<f32>,
    embedding: Embedding,
}

#[derive(Debug)]
pub struct EvaAgent {
    cfg: AgentConfig,
    online: MlpQFunction,
    target: MlpQFunction,
    optimizer: AdamState,
    replay: ReplayMemory,
    value_buffer: ValueBuffer,
    rng: ChaCha8Rng,
    lambda: f32,
    anneal: Option<AnnealSchedule>,
    episode_id: u64,
    step_in_episode: u32,
    planning_enabled: bool,
    stats: AgentStats,
    act_cache: Option<ActCache>,
}

impl Clone for EvaAgent {
    fn clone(&self) -> Self {
        EvaAgent {
            cfg: self.cfg.clone(),
            online: self.online.clone(),
            target: self.target.clone(),
            optimizer: self.optimizer.clone(),
            replay: self.replay.clone(),
            value_buffer: self.value_buffer.clone(),
            rng: self.rng.clone(),
            lambda: self.lambda,
            anneal: self.anneal,
            episode_id: self.episode_id,
            step_in_episode: self.step_in_episode,
            planning_enabled: self.planning_enabled,
            stats: self.stats.clone(),
            act_cache: self.act_cache.clone(),
        }
    }
}

impl EvaAgent {
    /// Build a fresh agent for observations of length `obs_dim`. With
    /// `planning` false the agent never plans and never consults the value
    /// buffer: a plain parametric baseline.
    pub fn new(cfg: AgentConfig, obs_dim: usize, planning: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cfg.network_dims(obs_dim);
        let online = MlpQFunction::new_random(&dims, &mut rng);
        let target = online.clone();
        let optimizer = AdamState::new(&online, cfg.learning_rate);
        let replay = ReplayMemory::new(cfg.replay_capacity, cfg.embedding_dim);
        let value_buffer = ValueBuffer::new(
            cfg.value_buffer_capacity,
            cfg.embedding_dim,
            crate::gridworld::NUM_ACTIONS,
        );
        let lambda = cfg.lambda;
        EvaAgent {
            cfg,
            online,
            target,
            optimizer,
            replay,
            value_buffer,
            rng,
            lambda,
            anneal: None,
            episode_id: 0,
            step_in_episode: 0,
            planning_enabled: planning,
            stats: AgentStats::default(),
            act_cache: None,
        }
    }

    /// Reassemble an agent from checkpointed pieces.
    pub fn from_parts(parts: AgentParts) -> Self {
        EvaAgent {
            cfg: parts.cfg,
            online: parts.online,
            target: parts.target,
            optimizer: parts.optimizer,
            replay: parts.replay,
            value_buffer: parts.value_buffer,
            rng: parts.rng,
            lambda: parts.lambda,
            anneal: parts.anneal,
            episode_id: parts.episode_id,
            step_in_episode: parts.step_in_episode,
            planning_enabled: parts.planning_enabled,
            stats: parts.stats,
            act_cache: None,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    pub fn target(&self) -> &MlpQFunction {
        &self.target
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }

    pub fn step_in_episode(&self) -> u32 {
        self.step_in_episode
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    /// Set lambda directly (used by evaluation sweeps); disarms any anneal.
    pub fn set_lambda(&mut self, lambda: f32) {
        assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0, 1]");
        self.lambda = lambda;
        self.anneal = None;
    }

    pub fn planning_enabled(&self) -> bool {
        self.planning_enabled
    }

    pub fn set_planning_enabled(&mut self, enabled: bool) {
        self.planning_enabled = enabled;
    }

    pub fn online(&self) -> &MlpQFunction {
        &self.online
    }

    pub fn replay(&self) -> &ReplayMemory {
        &self.replay
    }

    pub fn value_buffer(&self) -> &ValueBuffer {
        &self.value_buffer
    }

    pub fn clear_value_buffer(&mut self) {
        self.value_buffer.clear();
    }

    /// Exploration rate at the agent's current step count.
    pub fn current_epsilon(&self) -> f32 {
        epsilon_at(&self.cfg, self.stats.env_steps)
    }

    /// The online network's embedding of an observation.
    pub fn embed(&self, obs: &[f32]) -> Embedding {
        self.online.embedding(obs)
    }

    /// Mixed action values for an observation: `(1-lambda) * Q_theta +
    /// lambda * Q_NP` when the value buffer can estimate, `Q_theta` exactly
    /// otherwise. Pure: no counters, no exploration.
    pub fn q_eva(&self, obs: &[f32]) -> Vec<f32> {
        let h = self.online.embedding(obs);
        let q_theta = self.online.q_from_embedding(&h);
        self.mixed_values(&h, q_theta).0
    }

    fn mixed_values(&self, h: &Embedding, q_theta: Vec<f32>) -> (Vec<f32>, Option<bool>) {
        // lambda = 0 cannot move the argmax, so skip the lookup entirely;
        // this also makes the baseline identity structural.
        if !self.planning_enabled || self.lambda == 0.0 {
            return (q_theta, None);
        }
        match self
            .value_buffer
            .estimate(h, self.cfg.value_buffer_k, self.cfg.temperature)
        {
            Some(q_np) => {
                let lam = self.lambda;
                let mixed = q_theta
                    .iter()
                    .zip(&q_np)
                    .map(|(t, n)| (1.0 - lam) * t + lam * n)
                    .collect();
                (mixed, Some(true))
            }
            None => (q_theta, Some(false)),
        }
    }

    /// Epsilon-greedy action for `obs`. Ties in the greedy case break toward
    /// the lowest action index.
    pub fn act(&mut self, obs: &[f32], epsilon: f32) -> usize {
        assert_eq!(
            obs.len(),
            self.online.input_dim(),
            "observation length does not match the network input"
        );
        let h = self.online.embedding(obs);
        self.act_cache = Some(ActCache {
            obs: obs.to_vec(),
            embedding: h.clone(),
        });
        let explore: f32 = self.rng.random();
        if explore < epsilon {
            return self.rng.random_range(0..self.online.num_actions());
        }
        let q_theta = self.online.q_from_embedding(&h);
        let (q, looked_up) = self.mixed_values(&h, q_theta);
        if let Some(hit) = looked_up {
            self.stats.value_buffer_lookups += 1;
            if hit {
                self.stats.value_buffer_hits += 1;
            }
        }
        argmax(&q)
    }

    /// Record the environment's response to the last action taken from
    /// `obs`: append to replay, advance schedules, and run training, target
    /// sync, and planning on their cadences.
    pub fn observe(
        &mut self,
        obs: &[f32],
        action: usize,
        reward: f32,
        done: bool,
    ) -> Result<(), AgentError> {
        let embedding = match self.act_cache.take() {
            Some(cache) if cache.obs == obs => cache.embedding,
            _ => self.online.embedding(obs),
        };
        self.replay.append(Transition {
            obs: obs.to_vec(),
            action,
            reward,
            embedding: embedding.clone(),
            episode_id: self.episode_id,
            step_index: self.step_in_episode,
            terminal: done,
        });

        self.stats.env_steps += 1;
        self.stats.current_episode_return += f64::from(reward);
        if done {
            self.episode_id += 1;
            self.step_in_episode = 0;
            self.stats.episodes_completed += 1;
            if self.stats.recent_returns.len() == RECENT_RETURN_WINDOW {
                self.stats.recent_returns.pop_front();
            }
            self.stats
                .recent_returns
                .push_back(self.stats.current_episode_return);
            self.stats.current_episode_return = 0.0;
        } else {
            self.step_in_episode += 1;
        }

        self.advance_anneal();

        let s = self.stats.env_steps;
        let warmup = u64::from(self.cfg.warmup_steps);
        if s >= warmup && (s - warmup).is_multiple_of(u64::from(self.cfg.update_period)) {
            self.train()?;
        }
        if self.planning_enabled
            && s > warmup
            && (s - warmup).is_multiple_of(u64::from(self.cfg.insert_period))
        {
            self.plan(&embedding)?;
        }
        Ok(())
    }

    fn advance_anneal(&mut self) {
        let Some(anneal) = self.anneal else {
            return;
        };
        let elapsed = self.stats.env_steps.saturating_sub(anneal.start_step);
        if anneal.horizon == 0 || elapsed >= u64::from(anneal.horizon) {
            self.lambda = 0.0;
            return;
        }
        let frac = elapsed as f64 / f64::from(anneal.horizon);
        self.lambda = (f64::from(anneal.initial_lambda) * (1.0 - frac)) as f32;
    }

    /// Arm a linear decay of lambda to zero over `horizon` env steps,
    /// starting now. Horizon zero zeroes lambda immediately.
    pub fn set_lambda_schedule(&mut self, horizon: u32) {
        self.anneal = Some(AnnealSchedule {
            start_step: self.stats.env_steps,
            horizon,
            initial_lambda: self.lambda,
        });
        if horizon == 0 {
            self.lambda = 0.0;
        }
    }

    pub fn anneal_schedule(&self) -> Option<AnnealSchedule> {
        self.anneal
    }

    fn train(&mut self) -> Result<(), AgentError> {
        let sampled = self.replay.sample_steps(&mut self.rng, self.cfg.batch_size);
        if sampled.is_empty() {
            return Ok(());
        }
        let items = sampled
            .iter()
            .map(|s| BatchItem {
                obs: s.transition.obs.clone(),
                action: s.transition.action,
                reward: s.transition.reward,
                next_obs: s.next_obs.map(<[f32]>::to_vec),
            })
            .collect();
        let batch = TrainBatch { items };
        let loss = train_step(
            &mut self.online,
            &self.target,
            &batch,
            self.cfg.gamma,
            &mut self.optimizer,
        )?;
        self.stats.train_steps += 1;
        self.stats.last_loss = Some(loss);
        if self
            .stats
            .train_steps
            .is_multiple_of(u64::from(self.cfg.target_period))
        {
            sync_target(&self.online, &mut self.target)?;
        }
        Ok(())
    }

    /// Plan around `h`: retrieve the nearest trajectories, run the configured
    /// trace computation on each, and store every per-step value vector in
    /// the value buffer. Empty replay is a no-op.
    pub fn plan(&mut self, h: &Embedding) -> Result<(), AgentError> {
        self.stats.planning_invocations += 1;
        let slices =
            self.replay
                .knn_trajectories(h, self.cfg.planning_neighbours, self.cfg.rollout_len)?;
        if slices.is_empty() {
            return Ok(());
        }
        let online = &self.online;
        let gamma = self.cfg.gamma;
        let tables: Vec<crate::trace::QTable> = match self.cfg.trace_mode {
            TraceMode::NStep => slices
                .iter()
                .map(|s| nstep_trace(s, online, gamma))
                .collect::<Result<_, _>>()?,
            TraceMode::Tcp => slices
                .iter()
                .map(|s| tcp_trace(s, online, gamma))
                .collect::<Result<_, _>>()?,
            TraceMode::Kbrl => kbrl_qtables(&slices, self.cfg.kernel, online, gamma)?,
        };
        for (slice, table) in slices.iter().zip(tables) {
            for (t, row) in table.q.into_iter().enumerate() {
                self.value_buffer
                    .insert(slice.transitions[t].embedding.clone(), row);
            }
        }
        Ok(())
    }
}

/// Exploration schedule: linear from `epsilon_start` to `epsilon_end` over
/// the warm-up period, then constant.
pub fn epsilon_at(cfg: &AgentConfig, env_steps: u64) -> f32 {
    if cfg.warmup_steps == 0 || env_steps >= u64::from(cfg.warmup_steps) {
        return cfg.epsilon_end;
    }
    let frac = env_steps as f64 / f64::from(cfg.warmup_steps);
    (f64::from(cfg.epsilon_start)
        + (f64::from(cfg.epsilon_end) - f64::from(cfg.epsilon_start)) * frac) as f32
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::Embedding;

    fn tiny_cfg() -> AgentConfig {
        AgentConfig {
            replay_capacity: 256,
            value_buffer_capacity: 64,
            warmup_steps: 10,
            insert_period: 5,
            update_period: 4,
            batch_size: 4,
            hidden_sizes: vec![8],
            embedding_dim: 6,
            rollout_len: 10,
            ..AgentConfig::default()
        }
    }

    fn obs_of(x: f32) -> Vec<f32> {
        vec![x, 1.0 - x, x * 0.5]
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        let cfg = AgentConfig::default();
        assert_eq!(epsilon_at(&cfg, 0), 1.0);
        assert_eq!(epsilon_at(&cfg, u64::from(cfg.warmup_steps)), 0.01);
        assert_eq!(epsilon_at(&cfg, u64::from(cfg.warmup_steps) * 10), 0.01);
        let mid = epsilon_at(&cfg, u64::from(cfg.warmup_steps) / 2);
        assert!((mid - 0.505).abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_matches_parametric_argmax_regardless_of_buffer() {
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.0;
        let mut agent = EvaAgent::new(cfg, 3, true, 7);
        // Poison the buffer with values that would flip the argmax if mixed.
        for i in 0..20 {
            let mut e = vec![0.1 * i as f32; 6];
            e[0] = 1.0;
            agent
                .value_buffer
                .insert(Embedding::new(e).unwrap(), vec![1000.0, -1000.0, 0.0, 0.0]);
        }
        let mut checked = 0;
        for i in 0..10_000 {
            let obs = obs_of((i % 97) as f32 / 97.0);
            let expected = argmax(&agent.online.q_values(&obs));
            assert_eq!(agent.act(&obs, 0.0), expected);
            checked += 1;
        }
        assert_eq!(checked, 10_000);
        assert_eq!(
            agent.stats().value_buffer_lookups,
            0,
            "lambda 0 never looks up"
        );
    }

    #[test]
    fn mixing_is_exactly_convex_when_an_estimate_exists() {
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.6;
        cfg.value_buffer_k = 1;
        let mut agent = EvaAgent::new(cfg, 3, true, 3);
        let obs = obs_of(0.25);
        let h = agent.embed(&obs);
        let q_np = vec![2.0, 0.0, -1.0, 5.0];
        agent.value_buffer.insert(h.clone(), q_np.clone());
        let q_theta = agent.online.q_from_embedding(&h);
        let got = agent.q_eva(&obs);
        for a in 0..4 {
            let lam = 0.6f32;
            let want = (1.0 - lam) * q_theta[a] + lam * q_np[a];
            assert_eq!(got[a], want, "action {a}");
        }
    }

    #[test]
    fn worked_mixing_example_picks_action_zero() {
        // Parametric [1, 3] and planned [2, 0] with weight 0.6 on the planned
        // side mix to [1.6, 1.2], so the greedy action is 0.
        let q_theta = [1.0f32, 3.0];
        let q_np = [2.0f32, 0.0];
        let lam = 0.6f32;
        let mixed: Vec<f32> = q_theta
            .iter()
            .zip(&q_np)
            .map(|(t, n)| (1.0 - lam) * t + lam * n)
            .collect();
        assert!((mixed[0] - 1.6).abs() < 1e-6);
        assert!((mixed[1] - 1.2).abs() < 1e-6);
        assert_eq!(argmax(&mixed), 0);
    }

    #[test]
    fn lambda_one_follows_the_planned_values() {
        let mut cfg = tiny_cfg();
        cfg.lambda = 1.0;
        cfg.value_buffer_k = 1;
        let mut agent = EvaAgent::new(cfg, 3, true, 11);
        let obs = obs_of(0.8);
        let h = agent.embed(&obs);
        agent
            .value_buffer
            .insert(h.clone(), vec![-5.0, 4.0, 1.0, 0.0]);
        assert_eq!(agent.act(&obs, 0.0), 1);
    }

    #[test]
    fn planning_cadence_matches_the_floor_formula() {
        let cfg = tiny_cfg(); // warmup 10, insert period 5
        let mut agent = EvaAgent::new(cfg.clone(), 3, true, 1);
        for s in 1..=100u64 {
            let obs = obs_of((s % 13) as f32 / 13.0);
            let a = agent.act(&obs, 1.0);
            agent.observe(&obs, a, -0.01, s % 9 == 0).unwrap();
            let warmup = u64::from(cfg.warmup_steps);
            let expected = if s < warmup {
                0
            } else {
                (s - warmup) / u64::from(cfg.insert_period)
            };
            assert_eq!(
                agent.stats().planning_invocations,
                expected,
                "after {s} steps"
            );
        }
    }

    #[test]
    fn no_training_or_planning_before_warmup() {
        let cfg = tiny_cfg();
        let mut agent = EvaAgent::new(cfg, 3, true, 2);
        for s in 1..10u64 {
            let obs = obs_of(s as f32 / 10.0);
            let a = agent.act(&obs, 1.0);
            agent.observe(&obs, a, 0.0, false).unwrap();
        }
        assert_eq!(agent.stats().train_steps, 0);
        assert_eq!(agent.stats().planning_invocations, 0);
        assert_eq!(agent.value_buffer().len(), 0);
    }

    #[test]
    fn one_trajectory_yields_one_insertion_per_step() {
        let mut cfg = tiny_cfg();
        cfg.planning_neighbours = 1;
        cfg.trace_mode = TraceMode::Tcp;
        let mut agent = EvaAgent::new(cfg, 3, true, 5);
        // One finished 5-step episode.
        let mut first = None;
        for t in 0..5 {
            let obs = obs_of(t as f32 / 5.0);
            let h = agent.embed(&obs);
            if t == 0 {
                first = Some(h.clone());
            }
            agent.replay.append(Transition {
                obs,
                action: t % 4,
                reward: 1.0,
                embedding: h,
                episode_id: 0,
                step_index: t as u32,
                terminal: t == 4,
            });
        }
        agent.plan(&first.unwrap()).unwrap();
        assert_eq!(agent.value_buffer().len(), 5);
    }

    #[test]
    fn planned_values_match_the_standalone_trace() {
        let mut cfg = tiny_cfg();
        cfg.planning_neighbours = 1;
        cfg.trace_mode = TraceMode::Tcp;
        let mut agent = EvaAgent::new(cfg.clone(), 3, true, 8);
        for t in 0..6 {
            let obs = obs_of(t as f32 * 0.15);
            let h = agent.embed(&obs);
            agent.replay.append(Transition {
                obs,
                action: (t * 2) % 4,
                reward: (t as f32) - 2.0,
                embedding: h,
                episode_id: 0,
                step_index: t as u32,
                terminal: t == 5,
            });
        }
        let query = agent.replay.get(0).unwrap().embedding.clone();
        agent.plan(&query).unwrap();
        let slice = agent.replay.extract_trajectory(0, cfg.rollout_len).unwrap();
        let oracle = tcp_trace(&slice, agent.online(), cfg.gamma).unwrap();
        let stored: Vec<&Vec<f32>> = agent
            .value_buffer
            .entries_in_order()
            .map(|(_, e)| &e.q_np)
            .collect();
        assert_eq!(stored.len(), oracle.len());
        for (row, want) in stored.iter().zip(&oracle.q) {
            assert_eq!(*row, want, "agent insertions match the oracle trace");
        }
    }

    #[test]
    fn anneal_decays_linearly_and_clamps_at_zero() {
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.4;
        let mut agent = EvaAgent::new(cfg, 3, true, 4);
        agent.set_lambda_schedule(100);
        // 50 steps in: halfway.
        for s in 0..100u32 {
            let obs = obs_of(0.5);
            let a = agent.act(&obs, 1.0);
            agent.observe(&obs, a, 0.0, false).unwrap();
            if s == 49 {
                assert!((agent.lambda() - 0.2).abs() < 1e-3, "{}", agent.lambda());
            }
        }
        assert_eq!(agent.lambda(), 0.0);
        // Horizon zero: immediate.
        let mut agent2 = EvaAgent::new(tiny_cfg(), 3, true, 4);
        agent2.set_lambda_schedule(0);
        assert_eq!(agent2.lambda(), 0.0);
    }

    #[test]
    fn identical_seeds_identical_streams() {
        let run = || {
            let mut agent = EvaAgent::new(tiny_cfg(), 3, true, 99);
            let mut actions = Vec::new();
            for s in 0..200u64 {
                let obs = obs_of((s % 11) as f32 / 11.0);
                let eps = agent.current_epsilon();
                let a = agent.act(&obs, eps);
                actions.push(a);
                agent
                    .observe(&obs, a, if s % 7 == 0 { 1.0 } else { -0.01 }, s % 23 == 0)
                    .unwrap();
            }
            (actions, agent.stats().clone())
        };
        let (a1, s1) = run();
        let (a2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn recent_returns_window_caps_at_100() {
        let mut agent = EvaAgent::new(tiny_cfg(), 3, false, 0);
        for e in 0..150u32 {
            let obs = obs_of(0.3);
            let a = agent.act(&obs, 1.0);
            agent.observe(&obs, a, e as f32, true).unwrap();
        }
        assert_eq!(agent.stats().recent_returns.len(), 100);
        assert_eq!(agent.stats().episodes_completed, 150);
        // Oldest kept episode is #50.
        assert_eq!(agent.stats().recent_returns[0], 50.0);
        let mean = agent.stats().mean_recent_return().unwrap();
        assert!((mean - 99.5).abs() < 1e-9);
    }
}
