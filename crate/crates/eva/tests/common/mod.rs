//! Oracles shared by the integration tests: an exactly solvable chain MDP,
//! a 64-bit shadow of the network loss for finite-difference checks, and
//! small numeric helpers.

use eva::knn::Embedding;
use eva::qfunc::{MlpQFunction, QFunction, TrainBatch};
use eva::replay::{TrajectorySlice, Transition};

/// Deterministic chain of `n` states with two actions. Action 1 moves right,
/// action 0 moves left (clamped at state 0). Entering the rightmost state
/// ends the episode with reward 1; every other transition pays 0.
pub struct ChainMdp {
    pub n: usize,
    pub gamma: f64,
}

impl ChainMdp {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 2);
        ChainMdp { n, gamma }
    }

    /// `(next_state, reward, terminal)` under 64-bit arithmetic.
    pub fn step(&self, state: usize, action: usize) -> (usize, f64, bool) {
        match action {
            1 => {
                let next = state + 1;
                if next == self.n - 1 {
                    (next, 1.0, true)
                } else {
                    (next, 0.0, false)
                }
            }
            0 => (state.saturating_sub(1), 0.0, false),
            other => panic!("chain has two actions, got {other}"),
        }
    }

    /// Exact Q* via value iteration run to fixpoint in 64-bit floats.
    pub fn optimal_q(&self) -> Vec<Vec<f64>> {
        let states = self.n - 1; // the terminal state has no action values
        let mut q = vec![vec![0.0f64; 2]; states];
        loop {
            let mut next_q = q.clone();
            let mut delta = 0.0f64;
            for (s, row) in next_q.iter_mut().enumerate() {
                for (a, entry) in row.iter_mut().enumerate() {
                    let (ns, r, terminal) = self.step(s, a);
                    let bootstrap = if terminal {
                        0.0
                    } else {
                        q[ns].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    };
                    let updated = r + self.gamma * bootstrap;
                    delta = delta.max((updated - *entry).abs());
                    *entry = updated;
                }
            }
            q = next_q;
            if delta == 0.0 {
                return q;
            }
        }
    }

    /// One-hot embedding for a chain state.
    pub fn embed(&self, state: usize) -> Embedding {
        Embedding::new(one_hot(state, self.n, 1.0)).unwrap()
    }

    /// Roll out `actions` from `start`, packaging the visited transitions the
    /// way the replay memory would hand them to a trace computation.
    pub fn trajectory(&self, start: usize, actions: &[usize]) -> TrajectorySlice {
        let mut transitions = Vec::with_capacity(actions.len());
        let mut state = start;
        let mut terminal = false;
        for (i, &a) in actions.iter().enumerate() {
            assert!(!terminal, "trajectory continues past the terminal state");
            let (next, r, done) = self.step(state, a);
            transitions.push(Transition {
                obs: vec![state as f32],
                action: a,
                reward: r as f32,
                embedding: self.embed(state),
                episode_id: 0,
                step_index: i as u32,
                terminal: done,
            });
            state = next;
            terminal = done;
        }
        TrajectorySlice {
            transitions,
            truncated: !terminal,
            bootstrap: if terminal {
                None
            } else {
                Some(self.embed(state))
            },
        }
    }
}

pub fn one_hot(index: usize, dim: usize, scale: f32) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    v[index] = scale;
    v
}

/// Relative error, treating a pair that is jointly tiny as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// The network's training loss recomputed entirely in 64-bit arithmetic from
/// an explicit parameter vector (weights then biases, layer by layer, in the
/// order [`flatten_params`] produces).
pub fn shadow_loss(
    params: &[f64],
    dims: &[usize],
    target: &MlpQFunction,
    batch: &TrainBatch,
    gamma: f32,
) -> f64 {
    let mut offset = 0usize;
    let mut weights: Vec<&[f64]> = Vec::new();
    let mut biases: Vec<&[f64]> = Vec::new();
    for l in 0..dims.len() - 1 {
        let w_len = dims[l] * dims[l + 1];
        weights.push(&params[offset..offset + w_len]);
        offset += w_len;
        biases.push(&params[offset..offset + dims[l + 1]]);
        offset += dims[l + 1];
    }
    assert_eq!(offset, params.len());

    let forward = |obs: &[f32]| -> Vec<f64> {
        let mut act: Vec<f64> = obs.iter().map(|&x| f64::from(x)).collect();
        for l in 0..weights.len() {
            let n_in = dims[l];
            let n_out = dims[l + 1];
            let mut next = vec![0.0f64; n_out];
            for (j, out) in next.iter_mut().enumerate() {
                let row = &weights[l][j * n_in..(j + 1) * n_in];
                *out = biases[l][j] + row.iter().zip(&act).map(|(w, x)| w * x).sum::<f64>();
                if l + 1 < weights.len() {
                    *out = out.max(0.0);
                }
            }
            act = next;
        }
        act
    };

    let mut loss = 0.0f64;
    for item in &batch.items {
        // The TD target comes from the frozen target network exactly as in
        // training; it does not depend on the perturbed parameters.
        let y = match &item.next_obs {
            None => f64::from(item.reward),
            Some(next) => {
                let next_q = target.q_values(next);
                let max = next_q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                f64::from(item.reward) + f64::from(gamma) * f64::from(max)
            }
        };
        let q = forward(&item.obs);
        let err = q[item.action] - y;
        loss += err * err;
    }
    loss / batch.items.len() as f64
}

/// Network parameters flattened to 64-bit in the order [`shadow_loss`] reads.
pub fn flatten_params(net: &MlpQFunction) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for l in 0..net.layers() {
        let (w, b) = net.layer_params(l);
        out.extend(w.iter().map(|&x| f64::from(x)));
        out.extend(b.iter().map(|&x| f64::from(x)));
    }
    out
}

/// Analytic gradients flattened to the same layout as [`flatten_params`].
pub fn flatten_grads(grads: &eva::qfunc::Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in grads.weights.iter().zip(&grads.biases) {
        out.extend(w.iter().map(|&x| f64::from(x)));
        out.extend(b.iter().map(|&x| f64::from(x)));
    }
    out
}
