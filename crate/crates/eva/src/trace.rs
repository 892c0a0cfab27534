//! Non-parametric value estimation over retrieved trajectory slices.
//!
//! Three estimators of increasing sophistication, all producing per-step
//! action-value tables:
//!
//! * `nstep_trace` accumulates the discounted on-trajectory return and fills
//!   counterfactual actions with parametric values.
//! * `tcp_trace` (trajectory-centric planning) additionally applies one step
//!   of policy improvement at every visited state: the backed-up value is the
//!   max over on-trajectory and parametric action values.
//! * `KbrlPlanner` treats every stored transition as an independent kernel
//!   sample and solves the induced finite MDP by value iteration, with an
//!   absorbing pseudo-state that anchors estimates to the parametric values
//!   wherever data support is thin.
//!
//! All tail handling is shared: a slice ending in a terminal transition
//! bootstraps with zero, a slice cut with a live successor bootstraps with
//! `max_a Q(bootstrap)`, and a slice cut at the episode frontier falls back to
//! purely parametric values at its final step.

use thiserror::Error;

use crate::knn::{squared_l2, Embedding};
use crate::qfunc::QFunction;
use crate::replay::TrajectorySlice;

/// Kernel weights this small are treated as exact zeros.
pub const WEIGHT_UNDERFLOW: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trajectory slice is empty")]
    EmptyTrajectory,
    #[error("no information for action {action}: its store is empty and the pseudo-state similarity is 0")]
    NoInformation { action: usize },
    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-step value table over one trajectory slice: `q[t][a]` and
/// `v[t]`, both length `T` with `A` actions per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub q: Vec<Vec<f32>>,
    pub v: Vec<f32>,
}

impl QTable {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Value of the state following the slice's last transition, when known.
fn tail_value(traj: &TrajectorySlice, qf: &dyn QFunction) -> Option<f32> {
    let last = traj.transitions.last().expect("non-empty slice");
    if last.terminal {
        Some(0.0)
    } else {
        traj.bootstrap.as_ref().map(|e| {
            qf.q_from_embedding(e)
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        })
    }
}

/// Discounted n-step returns along the trajectory, parametric values
/// elsewhere. The backed-up state value is the on-trajectory action's value.
pub fn nstep_trace(
    traj: &TrajectorySlice,
    qf: &dyn QFunction,
    gamma: f32,
) -> Result<QTable, TraceError> {
    backward_trace(traj, qf, gamma, false)
}

/// Trajectory-centric planning: like `nstep_trace`, but the backed-up state
/// value takes a max over all actions at every step, so improvements found by
/// the parametric function propagate into the return.
pub fn tcp_trace(
    traj: &TrajectorySlice,
    qf: &dyn QFunction,
    gamma: f32,
) -> Result<QTable, TraceError> {
    backward_trace(traj, qf, gamma, true)
}

fn backward_trace(
    traj: &TrajectorySlice,
    qf: &dyn QFunction,
    gamma: f32,
    improve: bool,
) -> Result<QTable, TraceError> {
    if traj.transitions.is_empty() {
        return Err(TraceError::EmptyTrajectory);
    }
    let t_len = traj.transitions.len();
    let tail = tail_value(traj, qf);
    let mut q = vec![Vec::new(); t_len];
    let mut v = vec![0.0f32; t_len];
    for t in (0..t_len).rev() {
        let tr = &traj.transitions[t];
        let mut row = qf.q_from_embedding(&tr.embedding);
        let next_v = if t + 1 < t_len { Some(v[t + 1]) } else { tail };
        match next_v {
            Some(next_v) => {
                row[tr.action] = tr.reward + gamma * next_v;
                v[t] = if improve {
                    row.iter().copied().fold(f32::NEG_INFINITY, f32::max)
                } else {
                    row[tr.action]
                };
            }
            // Frontier cut with no bootstrap state: the final step stays
            // purely parametric.
            None => {
                v[t] = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            }
        }
        q[t] = row;
    }
    Ok(QTable { q, v })
}

/// Gaussian-kernel parameters for `KbrlPlanner`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Bandwidth `b` of `exp(-||x - y||^2 / b)`.
    pub bandwidth: f32,
    /// Unnormalised similarity of the absorbing pseudo-state to every state.
    pub pseudo_similarity: f32,
    pub max_iters: usize,
    pub tol: f32,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            bandwidth: 1e-4,
            pseudo_similarity: 1e-2,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.bandwidth <= 0.0 || !self.bandwidth.is_finite() {
            return Err(TraceError::InvalidKernel(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        if self.pseudo_similarity < 0.0 || !self.pseudo_similarity.is_finite() {
            return Err(TraceError::InvalidKernel(format!(
                "pseudo-state similarity must be non-negative, got {}",
                self.pseudo_similarity
            )));
        }
        if self.max_iters == 0 {
            return Err(TraceError::InvalidKernel("max_iters must be >= 1".into()));
        }
        if self.tol <= 0.0 || !self.tol.is_finite() {
            return Err(TraceError::InvalidKernel(format!(
                "tolerance must be positive and finite, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// One kernel sample: an origin embedding, the observed reward, and the
/// resultant embedding (`None` for absorbing terminal transitions).
#[derive(Debug, Clone)]
pub struct StoredTransition {
    pub origin: Embedding,
    pub reward: f32,
    pub resultant: Option<Embedding>,
}

/// Per-action transition sets feeding the kernel planner.
#[derive(Debug, Clone)]
pub struct KbrlStores {
    per_action: Vec<Vec<StoredTransition>>,
}

impl KbrlStores {
    pub fn new(num_actions: usize) -> Self {
        assert!(num_actions > 0);
        KbrlStores {
            per_action: vec![Vec::new(); num_actions],
        }
    }

    pub fn num_actions(&self) -> usize {
        self.per_action.len()
    }

    pub fn action(&self, a: usize) -> &[StoredTransition] {
        &self.per_action[a]
    }

    pub fn push(&mut self, action: usize, t: StoredTransition) {
        self.per_action[action].push(t);
    }

    /// Pool every transition of the given slices, independent of trajectory
    /// membership. Terminal transitions become absorbing samples; a frontier
    /// cut's final transition has no resultant state and is skipped.
    pub fn from_slices(slices: &[TrajectorySlice], num_actions: usize) -> Self {
        let mut stores = KbrlStores::new(num_actions);
        for slice in slices {
            for (t, tr) in slice.transitions.iter().enumerate() {
                let resultant = if tr.terminal {
                    None
                } else if t + 1 < slice.transitions.len() {
                    Some(slice.transitions[t + 1].embedding.clone())
                } else {
                    match &slice.bootstrap {
                        Some(e) => Some(e.clone()),
                        None => continue,
                    }
                };
                stores.push(
                    tr.action,
                    StoredTransition {
                        origin: tr.embedding.clone(),
                        reward: tr.reward,
                        resultant,
                    },
                );
            }
        }
        stores
    }
}

/// Where a stored transition lands: an absorbing terminal or the i-th
/// entry of the planner's resultant-state list.
#[derive(Clone, Copy)]
enum Landing {
    Terminal,
    State(usize),
}

/// Kernel-based planner over pooled transition stores.
///
/// Building the planner runs value iteration once over all resultant states;
/// queries for arbitrary (embedding, action) pairs are then cheap reads of the
/// converged values.
pub struct KbrlPlanner<'a> {
    stores: &'a KbrlStores,
    params: KernelParams,
    qf: &'a dyn QFunction,
    gamma: f32,
    dim: usize,
    /// Converged (or last-iterate) values of each resultant state.
    values: Vec<f64>,
    /// Landing of stored transition `k` of action `a`.
    landings: Vec<Vec<Landing>>,
    deltas: Vec<f64>,
    converged: bool,
}

/// ln(WEIGHT_UNDERFLOW); exponents below this underflow the cutoff.
const LN_WEIGHT_UNDERFLOW: f64 = -69.07755278982137;

fn kernel_weight(d2: f32, bandwidth: f64) -> f64 {
    let exponent = -f64::from(d2) / bandwidth;
    // exp underflows past the cutoff; skip the call entirely.
    if exponent < LN_WEIGHT_UNDERFLOW {
        return 0.0;
    }
    let w = exponent.exp();
    if w < WEIGHT_UNDERFLOW {
        0.0
    } else {
        w
    }
}

impl<'a> KbrlPlanner<'a> {
    pub fn new(
        stores: &'a KbrlStores,
        params: KernelParams,
        qf: &'a dyn QFunction,
        gamma: f32,
    ) -> Result<Self, TraceError> {
        params.validate()?;
        assert_eq!(
            stores.num_actions(),
            qf.num_actions(),
            "store count must match the action count"
        );
        let dim = qf.embedding_dim();
        for store in &stores.per_action {
            for t in store {
                if t.origin.dim() != dim {
                    return Err(TraceError::DimensionMismatch {
                        expected: dim,
                        got: t.origin.dim(),
                    });
                }
                if let Some(r) = &t.resultant {
                    if r.dim() != dim {
                        return Err(TraceError::DimensionMismatch {
                            expected: dim,
                            got: r.dim(),
                        });
                    }
                }
            }
        }

        // Enumerate resultant states in deterministic store order.
        let mut resultants: Vec<&Embedding> = Vec::new();
        let mut landings = Vec::with_capacity(stores.num_actions());
        for store in &stores.per_action {
            let mut per = Vec::with_capacity(store.len());
            for t in store {
                per.push(match &t.resultant {
                    None => Landing::Terminal,
                    Some(e) => {
                        resultants.push(e);
                        Landing::State(resultants.len() - 1)
                    }
                });
            }
            landings.push(per);
        }

        let mut planner = KbrlPlanner {
            stores,
            params,
            qf,
            gamma,
            dim,
            values: vec![0.0; resultants.len()],
            landings,
            deltas: Vec::new(),
            converged: resultants.is_empty(),
        };
        planner.value_iteration(&resultants);
        Ok(planner)
    }

    fn value_iteration(&mut self, resultants: &[&Embedding]) {
        if resultants.is_empty() {
            return;
        }
        let bandwidth = f64::from(self.params.bandwidth);
        let pseudo = f64::from(self.params.pseudo_similarity);
        let n_actions = self.stores.num_actions();

        // Precompute, per resultant state: its parametric action values and
        // its kernel weight against every stored origin.
        let parametric: Vec<Vec<f32>> = resultants
            .iter()
            .map(|e| self.qf.q_from_embedding(e))
            .collect();
        let kernels: Vec<Vec<Vec<f64>>> = resultants
            .iter()
            .map(|e| {
                (0..n_actions)
                    .map(|a| {
                        self.stores.per_action[a]
                            .iter()
                            .map(|t| {
                                kernel_weight(
                                    squared_l2(e.as_slice(), t.origin.as_slice()),
                                    bandwidth,
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        for _ in 0..self.params.max_iters {
            let mut next = vec![0.0f64; resultants.len()];
            let mut delta = 0.0f64;
            for (i, value) in next.iter_mut().enumerate() {
                let mut best = f64::NEG_INFINITY;
                for a in 0..n_actions {
                    let q = self.backup(a, &kernels[i][a], pseudo, f64::from(parametric[i][a]));
                    if q > best {
                        best = q;
                    }
                }
                *value = best;
                delta = delta.max((best - self.values[i]).abs());
            }
            self.values = next;
            self.deltas.push(delta);
            if delta < f64::from(self.params.tol) {
                self.converged = true;
                return;
            }
        }
        self.converged = false;
    }

    /// Normalised kernel expectation for one action given precomputed weights
    /// against that action's store. Falls back to the parametric value when
    /// every weight underflows and the pseudo-state carries no mass.
    fn backup(&self, action: usize, weights: &[f64], pseudo: f64, parametric: f64) -> f64 {
        let store = &self.stores.per_action[action];
        let mut total = pseudo;
        let mut acc = pseudo * parametric;
        for (k, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let v_next = match self.landings[action][k] {
                Landing::Terminal => 0.0,
                Landing::State(i) => self.values[i],
            };
            acc += w * (f64::from(store[k].reward) + f64::from(self.gamma) * v_next);
            total += w;
        }
        if total == 0.0 {
            parametric
        } else {
            acc / total
        }
    }

    /// Kernel value of an arbitrary (embedding, action) query.
    pub fn query(&self, embedding: &Embedding, action: usize) -> Result<f32, TraceError> {
        if embedding.dim() != self.dim {
            return Err(TraceError::DimensionMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        assert!(action < self.stores.num_actions(), "action out of range");
        if self.stores.per_action[action].is_empty() && self.params.pseudo_similarity == 0.0 {
            return Err(TraceError::NoInformation { action });
        }
        let bandwidth = f64::from(self.params.bandwidth);
        let weights: Vec<f64> = self.stores.per_action[action]
            .iter()
            .map(|t| {
                kernel_weight(
                    squared_l2(embedding.as_slice(), t.origin.as_slice()),
                    bandwidth,
                )
            })
            .collect();
        let parametric = f64::from(self.qf.q_from_embedding(embedding)[action]);
        Ok(self.backup(
            action,
            &weights,
            f64::from(self.params.pseudo_similarity),
            parametric,
        ) as f32)
    }

    /// Normalised weights of a query over the action's store plus the
    /// pseudo-state (in that order). Exposed so tests can check they sum to 1.
    pub fn query_weights(&self, embedding: &Embedding, action: usize) -> (Vec<f64>, f64) {
        let bandwidth = f64::from(self.params.bandwidth);
        let mut weights: Vec<f64> = self.stores.per_action[action]
            .iter()
            .map(|t| {
                kernel_weight(
                    squared_l2(embedding.as_slice(), t.origin.as_slice()),
                    bandwidth,
                )
            })
            .collect();
        let mut total: f64 = f64::from(self.params.pseudo_similarity);
        total += weights.iter().sum::<f64>();
        if total == 0.0 {
            return (weights, 0.0);
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        (weights, f64::from(self.params.pseudo_similarity) / total)
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Sup-norm change of the value vector per iteration.
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Full action-value table for one slice, by querying every step.
    pub fn qtable(&self, slice: &TrajectorySlice) -> Result<QTable, TraceError> {
        if slice.transitions.is_empty() {
            return Err(TraceError::EmptyTrajectory);
        }
        let n_actions = self.stores.num_actions();
        let mut q = Vec::with_capacity(slice.transitions.len());
        let mut v = Vec::with_capacity(slice.transitions.len());
        for tr in &slice.transitions {
            let mut row = Vec::with_capacity(n_actions);
            for a in 0..n_actions {
                row.push(self.query(&tr.embedding, a)?);
            }
            v.push(row.iter().copied().fold(f32::NEG_INFINITY, f32::max));
            q.push(row);
        }
        Ok(QTable { q, v })
    }
}

/// Kernel planning over a batch of slices: pool every transition into one
/// store, run value iteration once, then read back a table per slice.
pub fn kbrl_qtables(
    slices: &[TrajectorySlice],
    params: KernelParams,
    qf: &dyn QFunction,
    gamma: f32,
) -> Result<Vec<QTable>, TraceError> {
    let stores = KbrlStores::from_slices(slices, qf.num_actions());
    let planner = KbrlPlanner::new(&stores, params, qf, gamma)?;
    slices.iter().map(|s| planner.qtable(s)).collect()
}

/// One-shot kernel planning: build stores' planner, run value iteration, and
/// answer a single (embedding, action) query. The flag reports convergence.
pub fn kbrl_plan(
    stores: &KbrlStores,
    params: KernelParams,
    qf: &dyn QFunction,
    gamma: f32,
    query: (&Embedding, usize),
) -> Result<(f32, bool), TraceError> {
    let planner = KbrlPlanner::new(stores, params, qf, gamma)?;
    let value = planner.query(query.0, query.1)?;
    Ok((value, planner.converged()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qfunc::TabularQFunction;
    use crate::replay::Transition;
    use proptest::prelude::*;

    fn one_hot(state: usize, dim: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[state] = 1.0;
        Embedding::new(v).unwrap()
    }

    fn slice_of(
        states: &[usize],
        actions: &[usize],
        rewards: &[f32],
        dim: usize,
        terminal: bool,
        bootstrap: Option<usize>,
    ) -> TrajectorySlice {
        let transitions = (0..states.len())
            .map(|t| Transition {
                obs: vec![states[t] as f32],
                action: actions[t],
                reward: rewards[t],
                embedding: one_hot(states[t], dim),
                episode_id: 0,
                step_index: t as u32,
                terminal: terminal && t + 1 == states.len(),
            })
            .collect();
        TrajectorySlice {
            transitions,
            truncated: !terminal,
            bootstrap: bootstrap.map(|s| one_hot(s, dim)),
        }
    }

    #[test]
    fn nstep_backs_up_bootstrap() {
        // Rewards [1, 2], tail bootstrap max_a Q = 10, gamma = 0.5:
        // V(s1) = 2 + 0.5 * 10 = 7, V(s0) = 1 + 0.5 * 7 = 4.5.
        let qf = TabularQFunction::new(vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 3.0]]);
        let slice = slice_of(&[0, 1], &[0, 1], &[1.0, 2.0], 3, false, Some(2));
        let table = nstep_trace(&slice, &qf, 0.5).unwrap();
        assert_eq!(table.v, vec![4.5, 7.0]);
        assert_eq!(table.q[1][1], 7.0);
        assert_eq!(table.q[0][0], 4.5);
        // Off-trajectory entries are parametric.
        assert_eq!(table.q[0][1], 0.0);
    }

    #[test]
    fn nstep_terminal_step_is_reward() {
        let qf = TabularQFunction::new(vec![vec![5.0, 5.0]]);
        let slice = slice_of(&[0], &[1], &[0.25], 1, true, None);
        let table = nstep_trace(&slice, &qf, 0.9).unwrap();
        assert_eq!(table.q[0][1], 0.25);
        assert_eq!(table.v[0], 0.25);
    }

    #[test]
    fn nstep_frontier_cut_is_parametric_at_last_step() {
        let qf = TabularQFunction::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let slice = slice_of(&[0, 1], &[0, 0], &[1.0, 1.0], 2, false, None);
        let table = nstep_trace(&slice, &qf, 0.5).unwrap();
        // Last step carries pure parametric values.
        assert_eq!(table.q[1], vec![3.0, 4.0]);
        assert_eq!(table.v[1], 4.0);
        // Earlier steps back up from it.
        assert_eq!(table.q[0][0], 1.0 + 0.5 * 4.0);
    }

    #[test]
    fn zero_gamma_reduces_to_rewards() {
        let qf = TabularQFunction::new(vec![vec![9.0, 9.0], vec![9.0, 9.0], vec![9.0, 9.0]]);
        let slice = slice_of(&[0, 1, 2], &[1, 0, 1], &[0.5, -0.5, 2.0], 3, true, None);
        let table = nstep_trace(&slice, &qf, 0.0).unwrap();
        assert_eq!(table.q[0][1], 0.5);
        assert_eq!(table.q[1][0], -0.5);
        assert_eq!(table.q[2][1], 2.0);
    }

    #[test]
    fn tcp_propagates_the_best_action() {
        // Q_theta = [0, 100] everywhere, trajectory always takes action 0,
        // r_0 = 1, gamma = 0.5: the max at each later state pins V_NP = 100,
        // so Q_NP(s0, 0) = 1 + 0.5 * 100 = 51.
        let qf = TabularQFunction::new(vec![vec![0.0, 100.0], vec![0.0, 100.0], vec![0.0, 100.0]]);
        let slice = slice_of(&[0, 1, 2], &[0, 0, 0], &[1.0, 0.0, 0.0], 3, true, None);
        let table = tcp_trace(&slice, &qf, 0.5).unwrap();
        assert_eq!(table.q[0][0], 51.0);
        assert_eq!(table.q[0][1], 100.0);
        assert_eq!(table.v[0], 100.0);
        assert_eq!(table.v, vec![100.0, 100.0, 100.0]);
    }

    #[test]
    fn tcp_equals_nstep_when_trajectory_stays_greedy() {
        // With parametric values far below any return, the max never leaves
        // the trajectory and TCP reduces to the n-step trace.
        let qf = TabularQFunction::new(vec![vec![-1e6; 2]; 4]);
        let slice = slice_of(
            &[0, 1, 2, 3],
            &[1, 0, 1, 0],
            &[1.0, 2.0, 3.0, 4.0],
            4,
            true,
            None,
        );
        let nstep = nstep_trace(&slice, &qf, 0.75).unwrap();
        let tcp = tcp_trace(&slice, &qf, 0.75).unwrap();
        for t in 0..4 {
            let a = slice.transitions[t].action;
            assert_eq!(tcp.q[t][a], nstep.q[t][a]);
            assert_eq!(tcp.v[t], nstep.v[t]);
        }
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        let qf = TabularQFunction::new(vec![vec![0.0]]);
        let slice = TrajectorySlice {
            transitions: vec![],
            truncated: true,
            bootstrap: None,
        };
        assert_eq!(
            nstep_trace(&slice, &qf, 0.9).unwrap_err(),
            TraceError::EmptyTrajectory
        );
        assert_eq!(
            tcp_trace(&slice, &qf, 0.9).unwrap_err(),
            TraceError::EmptyTrajectory
        );
    }

    #[test]
    fn kbrl_far_query_returns_parametric_value() {
        let qf = TabularQFunction::new(vec![vec![1.5, -2.5], vec![0.0, 0.0]]);
        let mut stores = KbrlStores::new(2);
        stores.push(
            1,
            StoredTransition {
                origin: one_hot(1, 2),
                reward: 7.0,
                resultant: None,
            },
        );
        let params = KernelParams {
            bandwidth: 1e-12,
            ..KernelParams::default()
        };
        // state 0's one-hot is far from state 1's: every weight underflows
        // and the pseudo-state's weight normalises to 1.
        let (value, converged) = kbrl_plan(&stores, params, &qf, 0.9, (&one_hot(0, 2), 1)).unwrap();
        assert!(converged);
        assert!((value - (-2.5)).abs() < 1e-6);
    }

    #[test]
    fn kbrl_single_transition_backs_up_its_reward() {
        // Query exactly at the stored origin with a vanishing pseudo-state:
        // the sample dominates, and the isolated resultant state's value is
        // its parametric max.
        let qf = TabularQFunction::new(vec![vec![0.0, 0.0], vec![4.0, 2.0]]);
        let mut stores = KbrlStores::new(2);
        stores.push(
            0,
            StoredTransition {
                origin: one_hot(0, 2),
                reward: 1.0,
                resultant: Some(one_hot(1, 2)),
            },
        );
        let params = KernelParams {
            bandwidth: 1e-9,
            pseudo_similarity: 1e-9,
            ..KernelParams::default()
        };
        let (value, _) = kbrl_plan(&stores, params, &qf, 0.5, (&one_hot(0, 2), 0)).unwrap();
        assert!((value - (1.0 + 0.5 * 4.0)).abs() < 1e-5);
    }

    #[test]
    fn kbrl_weights_sum_to_one() {
        let qf = TabularQFunction::new(vec![vec![0.0, 0.0]; 4]);
        let mut stores = KbrlStores::new(2);
        for s in 0..3 {
            stores.push(
                0,
                StoredTransition {
                    origin: one_hot(s, 4),
                    reward: s as f32,
                    resultant: Some(one_hot(s + 1, 4)),
                },
            );
        }
        let params = KernelParams {
            bandwidth: 4.0,
            pseudo_similarity: 0.5,
            ..KernelParams::default()
        };
        let planner = KbrlPlanner::new(&stores, params, &qf, 0.9).unwrap();
        let (weights, pseudo) = planner.query_weights(&one_hot(1, 4), 0);
        let total: f64 = weights.iter().sum::<f64>() + pseudo;
        assert!((total - 1.0).abs() < 1e-6);
        assert!(pseudo > 0.0);
        assert!(weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn kbrl_empty_store_with_zero_pseudo_is_an_error() {
        let qf = TabularQFunction::new(vec![vec![0.0, 0.0]]);
        let stores = KbrlStores::new(2);
        let params = KernelParams {
            pseudo_similarity: 0.0,
            ..KernelParams::default()
        };
        assert_eq!(
            kbrl_plan(&stores, params, &qf, 0.9, (&one_hot(0, 1), 1)).unwrap_err(),
            TraceError::NoInformation { action: 1 }
        );
    }

    #[test]
    fn kbrl_value_iteration_contracts() {
        // On a randomly wired store the sup-norm deltas must not grow after
        // the first iteration (gamma-contraction).
        let qf = TabularQFunction::new(vec![vec![0.5, -0.5]; 6]);
        let mut stores = KbrlStores::new(2);
        let mut x = 9u64;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 6) as usize
        };
        for _ in 0..12 {
            let (s, s2) = (next(), next());
            stores.push(
                next() % 2,
                StoredTransition {
                    origin: one_hot(s, 6),
                    reward: (next() as f32) - 2.0,
                    resultant: Some(one_hot(s2, 6)),
                },
            );
        }
        let params = KernelParams {
            bandwidth: 2.0,
            pseudo_similarity: 0.1,
            max_iters: 50,
            tol: 1e-9,
        };
        let planner = KbrlPlanner::new(&stores, params, &qf, 0.9).unwrap();
        let deltas = planner.deltas();
        assert!(deltas.len() > 2);
        for pair in deltas.windows(2).skip(1) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "deltas grew: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    proptest! {
        /// Policy improvement: at every step the TCP state value dominates
        /// the plain n-step return.
        #[test]
        fn prop_tcp_dominates_nstep(
            rewards in proptest::collection::vec(-5.0f32..5.0, 1..8),
            q_vals in proptest::collection::vec(-5.0f32..5.0, 16),
            terminal in proptest::bool::ANY,
        ) {
            let n = rewards.len();
            let dim = 8;
            let table: Vec<Vec<f32>> = (0..dim)
                .map(|s| vec![q_vals[s * 2], q_vals[s * 2 + 1]])
                .collect();
            let qf = TabularQFunction::new(table);
            let states: Vec<usize> = (0..n).collect();
            let actions: Vec<usize> = (0..n).map(|t| t % 2).collect();
            let bootstrap = if terminal { None } else { Some(n) };
            let slice = slice_of(&states, &actions, &rewards, dim, terminal, bootstrap);
            let nstep = nstep_trace(&slice, &qf, 0.9).unwrap();
            let tcp = tcp_trace(&slice, &qf, 0.9).unwrap();
            for t in 0..n {
                prop_assert!(tcp.v[t] >= nstep.v[t] - 1e-5,
                    "tcp {} < nstep {} at {}", tcp.v[t], nstep.v[t], t);
            }
        }
    }
}
