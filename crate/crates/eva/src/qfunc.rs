//! Action-value approximation: an MLP trained by TD regression, plus a
//! tabular stand-in for tests on enumerable MDPs.
//!
//! The MLP's second-to-final layer is the embedding layer: its post-activation
//! vector is what gets stored in replay and queried for neighbours. The output
//! head is linear, so action values can be recovered from a stored embedding
//! alone without re-running the encoder.

use rand::Rng;
use thiserror::Error;

use crate::knn::Embedding;

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("training loss is not finite ({0}); the run has diverged")]
    NonFiniteLoss(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Anything that maps observations to per-action values through an embedding
/// bottleneck.
pub trait QFunction {
    fn num_actions(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    /// Per-action values for an observation.
    fn q_values(&self, obs: &[f32]) -> Vec<f32>;
    /// The embedding for an observation.
    fn embedding(&self, obs: &[f32]) -> Embedding;
    /// Per-action values recovered from an embedding without touching the
    /// encoder. For observations passing through `embedding`, this composes
    /// bit-for-bit with `q_values`.
    fn q_from_embedding(&self, embedding: &Embedding) -> Vec<f32>;
}

/// One TD training example; `next_obs` is `None` exactly for terminal steps.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub obs: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub next_obs: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
}

/// Fully connected ReLU network: `dims = [input, hidden.., E, A]`. All hidden
/// layers (including the embedding layer of width E) are ReLU; the head is
/// linear. Weights are 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpQFunction {
    dims: Vec<usize>,
    /// Per layer: `dims[l+1] x dims[l]`, row-major.
    weights: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
}

impl MlpQFunction {
    /// Uniform fan-in initialisation: each weight drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new_random(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(dims);
        for (layer, fan_in) in net.weights.iter_mut().zip(dims) {
            let bound = 1.0 / (*fan_in as f32).sqrt();
            for w in layer.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(
            dims.len() >= 3,
            "network needs at least input, embedding and output layers"
        );
        assert!(dims.iter().all(|d| *d > 0), "layer widths must be positive");
        let weights = (0..dims.len() - 1)
            .map(|l| vec![0.0; dims[l + 1] * dims[l]])
            .collect();
        let biases = (0..dims.len() - 1)
            .map(|l| vec![0.0; dims[l + 1]])
            .collect();
        MlpQFunction {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    /// Rebuild a network from explicit parameters (checkpoint restore).
    pub fn from_params(
        dims: Vec<usize>,
        weights: Vec<Vec<f32>>,
        biases: Vec<Vec<f32>>,
    ) -> Result<Self, ApproxError> {
        if dims.len() < 3 || dims.contains(&0) {
            return Err(ApproxError::InvalidParams(format!(
                "bad layer dims {dims:?}"
            )));
        }
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(ApproxError::InvalidParams(format!(
                "expected {} layers, got {} weight and {} bias tensors",
                dims.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..weights.len() {
            if weights[l].len() != dims[l + 1] * dims[l] || biases[l].len() != dims[l + 1] {
                return Err(ApproxError::InvalidParams(format!(
                    "layer {l} tensor sizes do not match dims {dims:?}"
                )));
            }
        }
        Ok(MlpQFunction {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_params(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.weights[layer], &self.biases[layer])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn affine(&self, layer: usize, input: &[f32]) -> Vec<f32> {
        let n_in = self.dims[layer];
        debug_assert_eq!(input.len(), n_in);
        let w = &self.weights[layer];
        let mut out = self.biases[layer].clone();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * n_in..(j + 1) * n_in];
            let mut acc = 0.0f32;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *o += acc;
        }
        out
    }

    /// Forward pass keeping every post-activation; used by backprop.
    fn forward_trace(&self, obs: &[f32]) -> Vec<Vec<f32>> {
        let hidden_layers = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(obs.to_vec());
        for l in 0..hidden_layers {
            let mut z = self.affine(l, acts.last().unwrap());
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            acts.push(z);
        }
        let q = self.affine(hidden_layers, acts.last().unwrap());
        acts.push(q);
        acts
    }

    /// Mean squared TD error and its gradient over a batch.
    ///
    /// Targets are `r` for terminal items and `r + gamma * max_a Q_target`
    /// otherwise; only the taken action's output carries error.
    pub fn loss_and_gradients(
        &self,
        target: &MlpQFunction,
        batch: &TrainBatch,
        gamma: f32,
    ) -> Result<(f32, Gradients), ApproxError> {
        assert!(!batch.items.is_empty(), "batch must be non-empty");
        let mut grads = Gradients::zeros(self);
        let inv_b = 1.0 / batch.items.len() as f32;
        let mut loss = 0.0f64;
        for item in &batch.items {
            let y = match &item.next_obs {
                None => item.reward,
                Some(next) => {
                    let next_q = target.q_values(next);
                    let max = next_q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    item.reward + gamma * max
                }
            };
            let acts = self.forward_trace(&item.obs);
            let q = acts.last().unwrap();
            let err = q[item.action] - y;
            loss += f64::from(err) * f64::from(err);

            // Output delta: d(mean squared error)/dq, nonzero only at the
            // taken action.
            let mut delta = vec![0.0f32; self.dims[self.dims.len() - 1]];
            delta[item.action] = 2.0 * err * inv_b;
            for l in (0..self.weights.len()).rev() {
                let n_in = self.dims[l];
                let input = &acts[l];
                for (j, dj) in delta.iter().enumerate() {
                    if *dj == 0.0 {
                        continue;
                    }
                    let row = &mut grads.weights[l][j * n_in..(j + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(input) {
                        *g += dj * xi;
                    }
                    grads.biases[l][j] += dj;
                }
                if l == 0 {
                    break;
                }
                let w = &self.weights[l];
                let mut prev = vec![0.0f32; n_in];
                for (j, dj) in delta.iter().enumerate() {
                    if *dj == 0.0 {
                        continue;
                    }
                    let row = &w[j * n_in..(j + 1) * n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += dj * wi;
                    }
                }
                // ReLU derivative masked by the stored post-activation; the
                // layers below the head are all ReLU.
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        let loss = loss / batch.items.len() as f64;
        if !loss.is_finite() {
            return Err(ApproxError::NonFiniteLoss(loss));
        }
        Ok((loss as f32, grads))
    }
}

impl QFunction for MlpQFunction {
    fn num_actions(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn embedding_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    fn q_values(&self, obs: &[f32]) -> Vec<f32> {
        self.q_from_embedding(&self.embedding(obs))
    }

    fn embedding(&self, obs: &[f32]) -> Embedding {
        assert_eq!(obs.len(), self.dims[0], "observation dimension mismatch");
        let mut act = obs.to_vec();
        for l in 0..self.weights.len() - 1 {
            act = self.affine(l, &act);
            for v in act.iter_mut() {
                *v = v.max(0.0);
            }
        }
        Embedding::new(act).expect("finite parameters produce finite embeddings")
    }

    fn q_from_embedding(&self, embedding: &Embedding) -> Vec<f32> {
        assert_eq!(
            embedding.dim(),
            self.embedding_dim(),
            "embedding dimension mismatch"
        );
        self.affine(self.weights.len() - 1, embedding.as_slice())
    }
}

/// Per-parameter gradients with the same shape as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros(net: &MlpQFunction) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Adam with bias-corrected step size: beta1 = 0.9, beta2 = 0.999,
/// epsilon = 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub step: u64,
    pub m_weights: Vec<Vec<f32>>,
    pub v_weights: Vec<Vec<f32>>,
    pub m_biases: Vec<Vec<f32>>,
    pub v_biases: Vec<Vec<f32>>,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;

impl AdamState {
    pub fn new(net: &MlpQFunction, lr: f32) -> Self {
        AdamState {
            lr,
            step: 0,
            m_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn matches(&self, net: &MlpQFunction) -> bool {
        self.m_weights.len() == net.weights.len()
            && self
                .m_weights
                .iter()
                .zip(&net.weights)
                .all(|(m, w)| m.len() == w.len())
            && self
                .m_biases
                .iter()
                .zip(&net.biases)
                .all(|(m, b)| m.len() == b.len())
    }

    pub fn apply(&mut self, net: &mut MlpQFunction, grads: &Gradients) -> Result<(), ApproxError> {
        if !self.matches(net) {
            return Err(ApproxError::ArchitectureMismatch(
                "optimizer state does not match network shape".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.lr * (1.0 - ADAM_BETA2.powi(t)).sqrt() / (1.0 - ADAM_BETA1.powi(t));
        for l in 0..net.weights.len() {
            adam_update(
                lr_t,
                &mut net.weights[l],
                &grads.weights[l],
                &mut self.m_weights[l],
                &mut self.v_weights[l],
            );
            adam_update(
                lr_t,
                &mut net.biases[l],
                &grads.biases[l],
                &mut self.m_biases[l],
                &mut self.v_biases[l],
            );
        }
        Ok(())
    }
}

fn adam_update(lr_t: f32, params: &mut [f32], grads: &[f32], m: &mut [f32], v: &mut [f32]) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        params[i] -= lr_t * m[i] / (v[i].sqrt() + ADAM_EPSILON);
    }
}

/// One TD regression step on `online` against frozen `target` values.
/// Returns the batch loss.
pub fn train_step(
    online: &mut MlpQFunction,
    target: &MlpQFunction,
    batch: &TrainBatch,
    gamma: f32,
    opt: &mut AdamState,
) -> Result<f32, ApproxError> {
    let (loss, grads) = online.loss_and_gradients(target, batch, gamma)?;
    opt.apply(online, &grads)?;
    Ok(loss)
}

/// Copy online parameters into the target network bit-for-bit.
pub fn sync_target(online: &MlpQFunction, target: &mut MlpQFunction) -> Result<(), ApproxError> {
    if online.dims != target.dims {
        return Err(ApproxError::ArchitectureMismatch(format!(
            "online dims {:?} vs target dims {:?}",
            online.dims, target.dims
        )));
    }
    target.weights.clone_from(&online.weights);
    target.biases.clone_from(&online.biases);
    Ok(())
}

/// Exact per-state action values for enumerable MDPs (test use). Observations
/// are `[state_id]`; embeddings are one-hot over states.
#[derive(Debug, Clone)]
pub struct TabularQFunction {
    table: Vec<Vec<f32>>,
}

impl TabularQFunction {
    pub fn new(table: Vec<Vec<f32>>) -> Self {
        assert!(!table.is_empty(), "table must have at least one state");
        let actions = table[0].len();
        assert!(actions > 0, "table must have at least one action");
        assert!(table.iter().all(|row| row.len() == actions));
        TabularQFunction { table }
    }

    pub fn num_states(&self) -> usize {
        self.table.len()
    }

    fn state_of(&self, obs: &[f32]) -> usize {
        assert_eq!(obs.len(), 1, "tabular observations are [state_id]");
        let state = obs[0] as usize;
        assert!(state < self.table.len(), "state id out of range");
        state
    }
}

impl QFunction for TabularQFunction {
    fn num_actions(&self) -> usize {
        self.table[0].len()
    }

    fn embedding_dim(&self) -> usize {
        self.table.len()
    }

    fn q_values(&self, obs: &[f32]) -> Vec<f32> {
        self.table[self.state_of(obs)].clone()
    }

    fn embedding(&self, obs: &[f32]) -> Embedding {
        let mut one_hot = vec![0.0; self.table.len()];
        one_hot[self.state_of(obs)] = 1.0;
        Embedding::new(one_hot).unwrap()
    }

    fn q_from_embedding(&self, embedding: &Embedding) -> Vec<f32> {
        assert_eq!(embedding.dim(), self.table.len());
        let state = embedding
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        self.table[state].clone()
    }
}
