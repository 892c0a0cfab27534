//! Experiment configuration.
//!
//! Flat `key=value` text, one setting per line, `#`-prefixed comment lines,
//! last write wins. The hyperparameter table's names appear verbatim as keys
//! (`Insert period=20`); settings this implementation adds use lower-case
//! keys (`trace mode=tcp`). [`ExperimentConfig::to_string`] emits every key
//! in a fixed order so serialisation is canonical: parsing its own output
//! reproduces the config byte for byte.

use std::fmt;

use thiserror::Error;

use crate::gridworld::ObsMode;
use crate::trace::KernelParams;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected key=value, got {text:?}")]
    MissingEquals { line: usize, text: String },
    #[error("bad value for {key:?}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which trace computation the planner runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    NStep,
    Tcp,
    Kbrl,
}

impl TraceMode {
    pub fn name(self) -> &'static str {
        match self {
            TraceMode::NStep => "nstep",
            TraceMode::Tcp => "tcp",
            TraceMode::Kbrl => "kbrl",
        }
    }
}

/// Everything the agent itself needs: mixing, schedules, planning, training.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Mixing weight on the non-parametric estimate; 0 is the baseline.
    pub lambda: f32,
    pub gamma: f32,
    pub epsilon_start: f32,
    pub epsilon_end: f32,
    /// Env steps between planning invocations.
    pub insert_period: u32,
    /// Trajectory rollout length for planning.
    pub rollout_len: usize,
    /// Trajectories retrieved per planning invocation.
    pub planning_neighbours: usize,
    /// Value-buffer neighbours consulted when acting.
    pub value_buffer_k: usize,
    /// Softmax temperature for value-buffer estimates (0 = unweighted mean).
    pub temperature: f32,
    pub trace_mode: TraceMode,
    pub kernel: KernelParams,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub value_buffer_capacity: usize,
    /// Train steps between target-network syncs.
    pub target_period: u32,
    /// Env steps before any training or planning.
    pub warmup_steps: u32,
    /// Env steps per train step after warm-up.
    pub update_period: u32,
    pub hidden_sizes: Vec<usize>,
    pub embedding_dim: usize,
    /// Env steps over which lambda decays to zero, once armed.
    pub anneal_horizon: Option<u32>,
    /// Accepted for table completeness; this build steps one environment.
    pub parallel_envs: u32,
    /// Convolutional settings: recorded, inert without a conv encoder.
    pub filter_sizes: Vec<usize>,
    pub filter_strides: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            lambda: 0.4,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            insert_period: 20,
            rollout_len: 50,
            planning_neighbours: 10,
            value_buffer_k: 5,
            temperature: 1e-5,
            trace_mode: TraceMode::Tcp,
            kernel: KernelParams::default(),
            learning_rate: 1e-4,
            batch_size: 48,
            replay_capacity: 50_000,
            value_buffer_capacity: 2000,
            target_period: 50,
            warmup_steps: 5000,
            update_period: 4,
            hidden_sizes: vec![256],
            embedding_dim: 64,
            anneal_horizon: None,
            parallel_envs: 1,
            filter_sizes: vec![8, 4, 3],
            filter_strides: vec![4, 2, 1],
            channels: vec![16, 32, 32],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg.to_owned()))
            }
        };
        check(
            (0.0..=1.0).contains(&self.lambda),
            "lambda must be in [0, 1]",
        )?;
        check((0.0..=1.0).contains(&self.gamma), "gamma must be in [0, 1]")?;
        check(
            (0.0..=1.0).contains(&self.epsilon_start) && (0.0..=1.0).contains(&self.epsilon_end),
            "epsilon bounds must be in [0, 1]",
        )?;
        check(self.insert_period >= 1, "Insert period must be at least 1")?;
        check(self.rollout_len >= 1, "T must be at least 1")?;
        check(self.planning_neighbours >= 1, "M must be at least 1")?;
        check(self.value_buffer_k >= 1, "k must be at least 1")?;
        check(self.temperature >= 0.0, "Temperature must be non-negative")?;
        check(self.learning_rate > 0.0, "Learning rate must be positive")?;
        check(
            self.batch_size >= 1,
            "Training batch size must be at least 1",
        )?;
        check(
            self.replay_capacity >= 1,
            "Replay buffer capacity must be at least 1",
        )?;
        check(
            self.value_buffer_capacity >= 1,
            "Value buffer size must be at least 1",
        )?;
        check(
            self.target_period >= 1,
            "Target network period must be at least 1",
        )?;
        check(self.update_period >= 1, "update period must be at least 1")?;
        check(self.embedding_dim >= 1, "embedding size must be at least 1")?;
        check(
            self.parallel_envs == 1,
            "Number of parallel environments: this build steps a single \
             environment; parallel batching is not implemented",
        )?;
        self.kernel
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Network layer sizes for a given observation length.
    pub fn network_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 3);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(self.embedding_dim);
        dims.push(crate::gridworld::NUM_ACTIONS);
        dims
    }
}

/// A whole experiment: agent settings plus task, duration, and output knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub agent: AgentConfig,
    pub n_coins: usize,
    pub total_steps: u64,
    /// Env steps between metrics rows.
    pub eval_period: u32,
    /// Episodes played per condition by the single-episode evaluation.
    pub eval_episodes: u32,
    /// Seeds used by multi-seed protocols (ablation, sweep).
    pub seeds: u32,
    pub out_dir: String,
    pub preset: String,
    pub obs_mode: ObsMode,
    /// Interior-wall map, rows separated by `|`; `none` = open 5x13 field.
    pub map: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            agent: AgentConfig::default(),
            n_coins: 1,
            total_steps: 300_000,
            eval_period: 1000,
            eval_episodes: 200,
            seeds: 3,
            out_dir: "runs".to_owned(),
            preset: "gridworld-1coin".to_owned(),
            obs_mode: ObsMode::Symbolic,
            map: None,
        }
    }
}

impl ExperimentConfig {
    /// Named presets: `gridworld-1coin` (the default) and `gridworld-2coin`.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "gridworld-1coin" => Ok(ExperimentConfig::default()),
            "gridworld-2coin" => Ok(ExperimentConfig {
                n_coins: 2,
                preset: "gridworld-2coin".to_owned(),
                ..ExperimentConfig::default()
            }),
            other => Err(ConfigError::Invalid(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.agent.validate()?;
        if self.n_coins == 0 {
            return Err(ConfigError::Invalid("coins must be at least 1".into()));
        }
        if self.total_steps < u64::from(self.agent.warmup_steps) {
            return Err(ConfigError::Invalid(
                "total steps must be at least the warm-up period".into(),
            ));
        }
        if self.eval_period == 0 {
            return Err(ConfigError::Invalid(
                "eval period must be at least 1".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(ConfigError::Invalid(
                "eval episodes must be at least 1".into(),
            ));
        }
        if self.seeds == 0 {
            return Err(ConfigError::Invalid("seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Parse a full config from text, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides on top of the current settings. Values are
    /// not validated here; call [`validate`](Self::validate) before use.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MissingEquals {
                    line: idx + 1,
                    text: line.to_owned(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set a single key. Keys are matched verbatim (case-sensitive).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let a = &mut self.agent;
        match key {
            "Temperature" => a.temperature = parse_num(key, value)?,
            "Insert period" => a.insert_period = parse_num(key, value)?,
            "k" => a.value_buffer_k = parse_num(key, value)?,
            "lambda" => a.lambda = parse_num(key, value)?,
            "M" => a.planning_neighbours = parse_num(key, value)?,
            "T" => a.rollout_len = parse_num(key, value)?,
            "No training period" => a.warmup_steps = parse_num(key, value)?,
            "Learning rate" => a.learning_rate = parse_num(key, value)?,
            "Replay buffer capacity" => a.replay_capacity = parse_num(key, value)?,
            "Value buffer size" => a.value_buffer_capacity = parse_num(key, value)?,
            "Training batch size" => a.batch_size = parse_num(key, value)?,
            "Target network period" => a.target_period = parse_num(key, value)?,
            "Number of parallel environments" => a.parallel_envs = parse_num(key, value)?,
            "Filter sizes" => a.filter_sizes = parse_list(key, value)?,
            "Filter strides" => a.filter_strides = parse_list(key, value)?,
            "Channels" => a.channels = parse_list(key, value)?,
            "Number of fully connected activations" => {
                a.hidden_sizes = parse_list(key, value)?;
            }
            "gamma" => a.gamma = parse_num(key, value)?,
            "epsilon start" => a.epsilon_start = parse_num(key, value)?,
            "epsilon end" => a.epsilon_end = parse_num(key, value)?,
            "update period" => a.update_period = parse_num(key, value)?,
            "embedding size" => a.embedding_dim = parse_num(key, value)?,
            "trace mode" => {
                a.trace_mode = match value {
                    "nstep" => TraceMode::NStep,
                    "tcp" => TraceMode::Tcp,
                    "kbrl" => TraceMode::Kbrl,
                    other => {
                        return Err(bad(key, format!("expected nstep|tcp|kbrl, got {other:?}")))
                    }
                };
            }
            "kernel bandwidth" => a.kernel.bandwidth = parse_num(key, value)?,
            "kernel pseudo similarity" => a.kernel.pseudo_similarity = parse_num(key, value)?,
            "kernel max iterations" => a.kernel.max_iters = parse_num(key, value)?,
            "kernel tolerance" => a.kernel.tol = parse_num(key, value)?,
            "lambda anneal horizon" => {
                a.anneal_horizon = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
            }
            "coins" => self.n_coins = parse_num(key, value)?,
            "total steps" => self.total_steps = parse_num(key, value)?,
            "eval period" => self.eval_period = parse_num(key, value)?,
            "eval episodes" => self.eval_episodes = parse_num(key, value)?,
            "seeds" => self.seeds = parse_num(key, value)?,
            "output dir" => self.out_dir = value.to_owned(),
            "preset" => self.preset = value.to_owned(),
            "obs mode" => {
                self.obs_mode = match value {
                    "symbolic" => ObsMode::Symbolic,
                    "rgb" => ObsMode::Rgb,
                    other => return Err(bad(key, format!("expected symbolic|rgb, got {other:?}"))),
                };
            }
            "map" => {
                self.map = if value == "none" {
                    None
                } else {
                    Some(value.to_owned())
                };
            }
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.agent;
        writeln!(f, "Temperature={}", a.temperature)?;
        writeln!(f, "Insert period={}", a.insert_period)?;
        writeln!(f, "k={}", a.value_buffer_k)?;
        writeln!(f, "lambda={}", a.lambda)?;
        writeln!(f, "M={}", a.planning_neighbours)?;
        writeln!(f, "T={}", a.rollout_len)?;
        writeln!(f, "No training period={}", a.warmup_steps)?;
        writeln!(f, "Learning rate={}", a.learning_rate)?;
        writeln!(f, "Replay buffer capacity={}", a.replay_capacity)?;
        writeln!(f, "Value buffer size={}", a.value_buffer_capacity)?;
        writeln!(f, "Training batch size={}", a.batch_size)?;
        writeln!(f, "Target network period={}", a.target_period)?;
        writeln!(f, "Number of parallel environments={}", a.parallel_envs)?;
        writeln!(f, "Filter sizes={}", fmt_list(&a.filter_sizes))?;
        writeln!(f, "Filter strides={}", fmt_list(&a.filter_strides))?;
        writeln!(f, "Channels={}", fmt_list(&a.channels))?;
        writeln!(
            f,
            "Number of fully connected activations={}",
            fmt_list(&a.hidden_sizes)
        )?;
        writeln!(f, "gamma={}", a.gamma)?;
        writeln!(f, "epsilon start={}", a.epsilon_start)?;
        writeln!(f, "epsilon end={}", a.epsilon_end)?;
        writeln!(f, "update period={}", a.update_period)?;
        writeln!(f, "embedding size={}", a.embedding_dim)?;
        writeln!(f, "trace mode={}", a.trace_mode.name())?;
        writeln!(f, "kernel bandwidth={}", a.kernel.bandwidth)?;
        writeln!(f, "kernel pseudo similarity={}", a.kernel.pseudo_similarity)?;
        writeln!(f, "kernel max iterations={}", a.kernel.max_iters)?;
        writeln!(f, "kernel tolerance={}", a.kernel.tol)?;
        match a.anneal_horizon {
            Some(h) => writeln!(f, "lambda anneal horizon={h}")?,
            None => writeln!(f, "lambda anneal horizon=none")?,
        }
        writeln!(f, "coins={}", self.n_coins)?;
        writeln!(f, "total steps={}", self.total_steps)?;
        writeln!(f, "eval period={}", self.eval_period)?;
        writeln!(f, "eval episodes={}", self.eval_episodes)?;
        writeln!(f, "seeds={}", self.seeds)?;
        writeln!(f, "output dir={}", self.out_dir)?;
        writeln!(f, "preset={}", self.preset)?;
        let mode = match self.obs_mode {
            ObsMode::Symbolic => "symbolic",
            ObsMode::Rgb => "rgb",
        };
        writeln!(f, "obs mode={mode}")?;
        match &self.map {
            Some(m) => writeln!(f, "map={m}"),
            None => writeln!(f, "map=none"),
        }
    }
}

fn bad(key: &str, reason: String) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_owned(),
        reason,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(key, format!("{e} ({value:?})")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| bad(key, format!("expected a [..] list, got {value:?}")))?;
    let inner = inner.trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|item| parse_num(key, item.trim()))
        .collect()
}

fn fmt_list(items: &[usize]) -> String {
    let body = items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    format!("[{body}]")
}
