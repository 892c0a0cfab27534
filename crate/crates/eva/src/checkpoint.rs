//! Binary checkpoints of a whole training run.
//!
//! Layout: the 4-byte magic `EVA1`, then tagged chunks, each `[tag: 4 ASCII
//! bytes][length: u64 LE][payload]`. All integers and floats are
//! little-endian; floats are raw IEEE bits, so round-trips are exact.
//!
//! Chunks (written in this order): `CONF` canonical config text, `NETP`
//! online network, `TGTP` target network, `OPTS` optimizer, `RPLY` replay
//! memory, `VBUF` value buffer, `AGST` agent counters and schedules, `RNGS`
//! agent and environment RNG states, `ENVS` environment episode state, and
//! `HARN` harness bookkeeping. `VBUF` is optional on load (an absent buffer
//! loads empty), but continuation equality holds only when it is present;
//! save always writes it. Unknown tags are an error naming the tag.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::{AgentParts, AgentStats, AnnealSchedule, EvaAgent};
use crate::config::{ConfigError, ExperimentConfig};
use crate::gridworld::GridState;
use crate::knn::Embedding;
use crate::qfunc::{AdamState, ApproxError, MlpQFunction};
use crate::replay::{ReplayMemory, Transition};
use crate::value_buffer::{ValueBuffer, ValueBufferEntry};

pub const MAGIC: &[u8; 4] = b"EVA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic (expected \"EVA1\")")]
    BadMagic,
    #[error("unknown chunk tag {0:?}")]
    UnknownChunk(String),
    #[error("truncated file inside chunk {tag:?}")]
    Truncated { tag: String },
    #[error("corrupt {tag} chunk: {reason}")]
    Corrupt { tag: String, reason: String },
    #[error("missing required chunk {0:?}")]
    MissingChunk(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

/// Everything needed to resume a run: the experiment config, the agent, the
/// mid-episode environment state, the environment RNG, and the run seed.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub cfg: ExperimentConfig,
    pub agent: EvaAgent,
    pub env_state: Option<GridState>,
    pub env_rng: ChaCha8Rng,
    pub base_seed: u64,
    /// Whether the file carried a value buffer (always true for our saves).
    pub had_value_buffer: bool,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ExperimentConfig,
    agent: &EvaAgent,
    env_state: Option<&GridState>,
    env_rng: &ChaCha8Rng,
    base_seed: u64,
) -> Result<(), CheckpointError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    write_chunk(&mut file, b"CONF", encode_config(cfg))?;
    write_chunk(&mut file, b"NETP", encode_network(agent.online()))?;
    write_chunk(&mut file, b"TGTP", encode_network(agent.target()))?;
    write_chunk(&mut file, b"OPTS", encode_optimizer(agent.optimizer()))?;
    write_chunk(&mut file, b"RPLY", encode_replay(agent.replay()))?;
    write_chunk(
        &mut file,
        b"VBUF",
        encode_value_buffer(agent.value_buffer()),
    )?;
    write_chunk(&mut file, b"AGST", encode_agent_state(agent))?;
    write_chunk(&mut file, b"RNGS", encode_rngs(agent.rng(), env_rng))?;
    write_chunk(&mut file, b"ENVS", encode_env_state(env_state))?;
    write_chunk(&mut file, b"HARN", encode_u64_payload(base_seed))?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    if file.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }

    let mut conf: Option<Vec<u8>> = None;
    let mut netp = None;
    let mut tgtp = None;
    let mut opts = None;
    let mut rply = None;
    let mut vbuf = None;
    let mut agst = None;
    let mut rngs = None;
    let mut envs = None;
    let mut harn = None;

    loop {
        let mut tag = [0u8; 4];
        match file.read(&mut tag)? {
            0 => break,
            4 => {}
            _ => {
                return Err(CheckpointError::Truncated {
                    tag: String::from_utf8_lossy(&tag).into_owned(),
                })
            }
        }
        let tag_name = String::from_utf8_lossy(&tag).into_owned();
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| CheckpointError::Truncated {
                tag: tag_name.clone(),
            })?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut payload = vec![0u8; len];
        file.read_exact(&mut payload)
            .map_err(|_| CheckpointError::Truncated {
                tag: tag_name.clone(),
            })?;
        match &tag {
            b"CONF" => conf = Some(payload),
            b"NETP" => netp = Some(payload),
            b"TGTP" => tgtp = Some(payload),
            b"OPTS" => opts = Some(payload),
            b"RPLY" => rply = Some(payload),
            b"VBUF" => vbuf = Some(payload),
            b"AGST" => agst = Some(payload),
            b"RNGS" => rngs = Some(payload),
            b"ENVS" => envs = Some(payload),
            b"HARN" => harn = Some(payload),
            _ => return Err(CheckpointError::UnknownChunk(tag_name)),
        }
    }

    let cfg_text =
        decode_string_payload("CONF", conf.ok_or(CheckpointError::MissingChunk("CONF"))?)?;
    let cfg = ExperimentConfig::parse(&cfg_text)?;
    let online = decode_network("NETP", netp.ok_or(CheckpointError::MissingChunk("NETP"))?)?;
    let target = decode_network("TGTP", tgtp.ok_or(CheckpointError::MissingChunk("TGTP"))?)?;
    let optimizer = decode_optimizer(
        "OPTS",
        opts.ok_or(CheckpointError::MissingChunk("OPTS"))?,
        &online,
    )?;
    let replay = decode_replay("RPLY", rply.ok_or(CheckpointError::MissingChunk("RPLY"))?)?;
    let had_value_buffer = vbuf.is_some();
    let value_buffer = match vbuf {
        Some(payload) => decode_value_buffer("VBUF", payload)?,
        None => ValueBuffer::new(
            cfg.agent.value_buffer_capacity,
            cfg.agent.embedding_dim,
            crate::gridworld::NUM_ACTIONS,
        ),
    };
    let agent_state =
        decode_agent_state("AGST", agst.ok_or(CheckpointError::MissingChunk("AGST"))?)?;
    let (agent_rng, env_rng) =
        decode_rngs("RNGS", rngs.ok_or(CheckpointError::MissingChunk("RNGS"))?)?;
    let env_state = decode_env_state("ENVS", envs.ok_or(CheckpointError::MissingChunk("ENVS"))?)?;
    let base_seed = decode_u64_payload("HARN", harn.ok_or(CheckpointError::MissingChunk("HARN"))?)?;

    let agent = EvaAgent::from_parts(AgentParts {
        cfg: cfg.agent.clone(),
        online,
        target,
        optimizer,
        replay,
        value_buffer,
        rng: agent_rng,
        lambda: agent_state.lambda,
        anneal: agent_state.anneal,
        episode_id: agent_state.episode_id,
        step_in_episode: agent_state.step_in_episode,
        planning_enabled: agent_state.planning_enabled,
        stats: agent_state.stats,
    });

    Ok(LoadedCheckpoint {
        cfg,
        agent,
        env_state,
        env_rng,
        base_seed,
        had_value_buffer,
    })
}

fn write_chunk(
    out: &mut impl Write,
    tag: &[u8; 4],
    payload: Vec<u8>,
) -> Result<(), CheckpointError> {
    out.write_all(tag)?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(&payload)?;
    Ok(())
}

// ---- encoding ----

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.usize(vs.len());
        for v in vs {
            self.f32(*v);
        }
    }
    fn bytes(&mut self, vs: &[u8]) {
        self.usize(vs.len());
        self.0.extend_from_slice(vs);
    }
}

fn encode_config(cfg: &ExperimentConfig) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(cfg.to_string().as_bytes());
    e.0
}

fn encode_network(net: &MlpQFunction) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(net.dims().len());
    for d in net.dims() {
        e.usize(*d);
    }
    for layer in 0..net.layers() {
        let (w, b) = net.layer_params(layer);
        e.f32s(w);
        e.f32s(b);
    }
    e.0
}

fn encode_optimizer(opt: &AdamState) -> Vec<u8> {
    let mut e = Enc::default();
    e.f32(opt.lr);
    e.u64(opt.step);
    e.usize(opt.m_weights.len());
    for l in 0..opt.m_weights.len() {
        e.f32s(&opt.m_weights[l]);
        e.f32s(&opt.v_weights[l]);
        e.f32s(&opt.m_biases[l]);
        e.f32s(&opt.v_biases[l]);
    }
    e.0
}

fn encode_transition(e: &mut Enc, t: &Transition) {
    e.f32s(&t.obs);
    e.usize(t.action);
    e.f32(t.reward);
    e.f32s(t.embedding.as_slice());
    e.u64(t.episode_id);
    e.u32(t.step_index);
    e.bool(t.terminal);
}

fn encode_replay(replay: &ReplayMemory) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(replay.capacity());
    e.usize(replay.embedding_dim());
    e.usize(replay.next_slot());
    e.u64(replay.evictions());
    e.usize(replay.len());
    for slot in 0..replay.len() {
        encode_transition(&mut e, replay.get(slot).expect("slot < len is live"));
    }
    e.0
}

fn encode_value_buffer(vb: &ValueBuffer) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(vb.capacity());
    e.usize(vb.embedding_dim());
    e.usize(vb.num_actions());
    e.u64(vb.next_id());
    e.usize(vb.len());
    for (id, entry) in vb.entries_in_order() {
        e.u64(id);
        e.f32s(entry.embedding.as_slice());
        e.f32s(&entry.q_np);
    }
    e.0
}

fn encode_agent_state(agent: &EvaAgent) -> Vec<u8> {
    let mut e = Enc::default();
    e.f32(agent.lambda());
    match agent.anneal_schedule() {
        None => e.bool(false),
        Some(a) => {
            e.bool(true);
            e.u64(a.start_step);
            e.u32(a.horizon);
            e.f32(a.initial_lambda);
        }
    }
    e.u64(agent.episode_id());
    e.u32(agent.step_in_episode());
    e.bool(agent.planning_enabled());
    let s = agent.stats();
    e.u64(s.env_steps);
    e.u64(s.train_steps);
    e.u64(s.planning_invocations);
    e.u64(s.value_buffer_lookups);
    e.u64(s.value_buffer_hits);
    e.u64(s.episodes_completed);
    match s.last_loss {
        None => e.bool(false),
        Some(l) => {
            e.bool(true);
            e.f32(l);
        }
    }
    e.f64(s.current_episode_return);
    e.usize(s.recent_returns.len());
    for r in &s.recent_returns {
        e.f64(*r);
    }
    e.0
}

fn encode_rngs(agent_rng: &ChaCha8Rng, env_rng: &ChaCha8Rng) -> Vec<u8> {
    let mut e = Enc::default();
    for rng in [agent_rng, env_rng] {
        e.0.extend_from_slice(&rng.get_seed());
        e.u128(rng.get_word_pos());
    }
    e.0
}

fn encode_env_state(state: Option<&GridState>) -> Vec<u8> {
    let mut e = Enc::default();
    match state {
        None => e.bool(false),
        Some(s) => {
            e.bool(true);
            e.usize(s.agent.0);
            e.usize(s.agent.1);
            e.usize(s.coins.len());
            for (r, c) in &s.coins {
                e.usize(*r);
                e.usize(*c);
            }
            e.u32(s.steps_elapsed);
            e.bool(s.done);
        }
    }
    e.0
}

fn encode_u64_payload(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

// ---- decoding ----

struct Dec<'a> {
    tag: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(tag: &'a str, data: &'a [u8]) -> Self {
        Dec { tag, data, pos: 0 }
    }

    fn corrupt(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            tag: self.tag.to_owned(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(self.corrupt(format!(
                "wanted {n} bytes at offset {}, chunk has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt(format!("length {v} overflows usize")))
    }
    fn bool(&mut self) -> Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.corrupt(format!("bad bool byte {other}"))),
        }
    }
    fn f32s(&mut self) -> Result<Vec<f32>, CheckpointError> {
        let n = self.usize()?;
        let mut out = Vec::with_capacity(n.min(self.data.len() / 4 + 1));
        for _ in 0..n {
            out.push(self.f32()?);
        }
        Ok(out)
    }
    fn embedding(&mut self) -> Result<Embedding, CheckpointError> {
        let vs = self.f32s()?;
        Embedding::new(vs).map_err(|e| self.corrupt(e.to_string()))
    }
    fn finish(self) -> Result<(), CheckpointError> {
        if self.pos != self.data.len() {
            return Err(self.corrupt(format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_string_payload(tag: &str, payload: Vec<u8>) -> Result<String, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let n = d.usize()?;
    let bytes = d.take(n)?.to_vec();
    d.finish()?;
    String::from_utf8(bytes).map_err(|_| CheckpointError::Corrupt {
        tag: tag.to_owned(),
        reason: "config text is not UTF-8".into(),
    })
}

fn decode_network(tag: &str, payload: Vec<u8>) -> Result<MlpQFunction, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let n_dims = d.usize()?;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(d.usize()?);
    }
    let layers = n_dims.saturating_sub(1);
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for _ in 0..layers {
        weights.push(d.f32s()?);
        biases.push(d.f32s()?);
    }
    d.finish()?;
    Ok(MlpQFunction::from_params(dims, weights, biases)?)
}

fn decode_optimizer(
    tag: &str,
    payload: Vec<u8>,
    net: &MlpQFunction,
) -> Result<AdamState, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let lr = d.f32()?;
    let step = d.u64()?;
    let layers = d.usize()?;
    if layers != net.layers() {
        return Err(d.corrupt(format!(
            "optimizer has {layers} layers, network has {}",
            net.layers()
        )));
    }
    let mut opt = AdamState::new(net, lr);
    opt.step = step;
    for l in 0..layers {
        opt.m_weights[l] = d.f32s()?;
        opt.v_weights[l] = d.f32s()?;
        opt.m_biases[l] = d.f32s()?;
        opt.v_biases[l] = d.f32s()?;
        let (w, b) = net.layer_params(l);
        if opt.m_weights[l].len() != w.len()
            || opt.v_weights[l].len() != w.len()
            || opt.m_biases[l].len() != b.len()
            || opt.v_biases[l].len() != b.len()
        {
            return Err(d.corrupt(format!("optimizer tensor shape mismatch at layer {l}")));
        }
    }
    d.finish()?;
    Ok(opt)
}

fn decode_transition(d: &mut Dec) -> Result<Transition, CheckpointError> {
    Ok(Transition {
        obs: d.f32s()?,
        action: d.usize()?,
        reward: d.f32()?,
        embedding: d.embedding()?,
        episode_id: d.u64()?,
        step_index: d.u32()?,
        terminal: d.bool()?,
    })
}

fn decode_replay(tag: &str, payload: Vec<u8>) -> Result<ReplayMemory, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let capacity = d.usize()?;
    let dim = d.usize()?;
    let next_slot = d.usize()?;
    let evictions = d.u64()?;
    let len = d.usize()?;
    if len > capacity || (capacity > 0 && next_slot >= capacity) {
        return Err(d.corrupt("replay geometry out of range"));
    }
    let mut transitions = Vec::with_capacity(len);
    for _ in 0..len {
        let t = decode_transition(&mut d)?;
        if t.embedding.dim() != dim {
            return Err(d.corrupt("transition embedding dimension mismatch"));
        }
        transitions.push(t);
    }
    d.finish()?;
    Ok(ReplayMemory::from_transitions(
        capacity,
        dim,
        transitions,
        next_slot,
        evictions,
    ))
}

fn decode_value_buffer(tag: &str, payload: Vec<u8>) -> Result<ValueBuffer, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let capacity = d.usize()?;
    let dim = d.usize()?;
    let num_actions = d.usize()?;
    let next_id = d.u64()?;
    let len = d.usize()?;
    let mut entries = Vec::with_capacity(len);
    for _ in 0..len {
        let id = d.u64()?;
        let embedding = d.embedding()?;
        let q_np = d.f32s()?;
        if embedding.dim() != dim || q_np.len() != num_actions {
            return Err(d.corrupt("value-buffer entry shape mismatch"));
        }
        entries.push((id, ValueBufferEntry { embedding, q_np }));
    }
    d.finish()?;
    Ok(ValueBuffer::from_entries(
        capacity,
        dim,
        num_actions,
        entries,
        next_id,
    ))
}

struct AgentStateChunk {
    lambda: f32,
    anneal: Option<AnnealSchedule>,
    episode_id: u64,
    step_in_episode: u32,
    planning_enabled: bool,
    stats: AgentStats,
}

fn decode_agent_state(tag: &str, payload: Vec<u8>) -> Result<AgentStateChunk, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let lambda = d.f32()?;
    let anneal = if d.bool()? {
        Some(AnnealSchedule {
            start_step: d.u64()?,
            horizon: d.u32()?,
            initial_lambda: d.f32()?,
        })
    } else {
        None
    };
    let episode_id = d.u64()?;
    let step_in_episode = d.u32()?;
    let planning_enabled = d.bool()?;
    let mut stats = AgentStats {
        env_steps: d.u64()?,
        train_steps: d.u64()?,
        planning_invocations: d.u64()?,
        value_buffer_lookups: d.u64()?,
        value_buffer_hits: d.u64()?,
        episodes_completed: d.u64()?,
        last_loss: None,
        current_episode_return: 0.0,
        recent_returns: VecDeque::new(),
    };
    if d.bool()? {
        stats.last_loss = Some(d.f32()?);
    }
    stats.current_episode_return = d.f64()?;
    let n = d.usize()?;
    for _ in 0..n {
        stats.recent_returns.push_back(d.f64()?);
    }
    d.finish()?;
    Ok(AgentStateChunk {
        lambda,
        anneal,
        episode_id,
        step_in_episode,
        planning_enabled,
        stats,
    })
}

fn decode_rngs(tag: &str, payload: Vec<u8>) -> Result<(ChaCha8Rng, ChaCha8Rng), CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let mut out = Vec::with_capacity(2);
    for _ in 0..2 {
        let seed: [u8; 32] = d.take(32)?.try_into().unwrap();
        let pos = d.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        out.push(rng);
    }
    d.finish()?;
    let env = out.pop().expect("two rngs");
    let agent = out.pop().expect("two rngs");
    Ok((agent, env))
}

fn decode_env_state(tag: &str, payload: Vec<u8>) -> Result<Option<GridState>, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    if !d.bool()? {
        d.finish()?;
        return Ok(None);
    }
    let agent = (d.usize()?, d.usize()?);
    let n_coins = d.usize()?;
    let mut coins = BTreeSet::new();
    for _ in 0..n_coins {
        coins.insert((d.usize()?, d.usize()?));
    }
    let steps_elapsed = d.u32()?;
    let done = d.bool()?;
    d.finish()?;
    Ok(Some(GridState {
        agent,
        coins,
        steps_elapsed,
        done,
    }))
}

fn decode_u64_payload(tag: &str, payload: Vec<u8>) -> Result<u64, CheckpointError> {
    let mut d = Dec::new(tag, &payload);
    let v = d.u64()?;
    d.finish()?;
    Ok(v)
}
