//! Ring-buffer replay memory with trajectory extraction.
//!
//! Transitions are stored in strict FIFO ring order and indexed by their
//! embedding for nearest-neighbour lookup. Successor linkage is implicit:
//! slot `s` is followed by slot `(s + 1) % capacity` exactly when both hold
//! transitions of the same episode with consecutive step indices, which is
//! precisely when the later transition was appended immediately after the
//! earlier one and neither has been overwritten.

use rand::Rng;
use thiserror::Error;

use crate::knn::{Embedding, IndexError, KnnIndex};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("slot {0} does not hold a live transition")]
    DeadSlot(usize),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// One stored environment step. The observation is opaque to this module;
/// the embedding is the encoder output at storage time and is never
/// recomputed afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub embedding: Embedding,
    pub episode_id: u64,
    pub step_index: u32,
    pub terminal: bool,
}

/// A contiguous forward slice of one episode.
///
/// `truncated` is false only when the slice ends at a terminal transition.
/// When the slice was cut at `max_len` and the following transition is still
/// live, its embedding is carried in `bootstrap` so value estimates can
/// bootstrap at the cut; a slice cut at the frontier of an ongoing episode
/// has no bootstrap embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySlice {
    pub transitions: Vec<Transition>,
    pub truncated: bool,
    pub bootstrap: Option<Embedding>,
}

/// A transition sampled for training together with its successor observation
/// (`None` exactly when the transition is terminal).
pub struct SampledStep<'a> {
    pub transition: &'a Transition,
    pub next_obs: Option<&'a [f32]>,
}

/// Fixed-capacity FIFO ring of transitions with an embedding index over the
/// live entries. Index ids are ring slot numbers.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    slots: Vec<Transition>,
    next_slot: usize,
    index: KnnIndex,
    evictions: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize, embedding_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory {
            capacity,
            slots: Vec::new(),
            next_slot: 0,
            index: KnnIndex::new(embedding_dim),
            evictions: 0,
        }
    }

    /// Rebuild from checkpointed contents: the transitions in slot order,
    /// plus the ring cursor and eviction counter.
    pub fn from_transitions(
        capacity: usize,
        embedding_dim: usize,
        transitions: Vec<Transition>,
        next_slot: usize,
        evictions: u64,
    ) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        assert!(transitions.len() <= capacity, "more transitions than slots");
        assert!(next_slot < capacity, "ring cursor out of range");
        let mut index = KnnIndex::new(embedding_dim);
        for (slot, t) in transitions.iter().enumerate() {
            index
                .insert(slot as u64, &t.embedding)
                .expect("checkpointed embedding must match the replay dimension");
        }
        ReplayMemory {
            capacity,
            slots: transitions,
            next_slot,
            index,
            evictions,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// The slot the next append will write.
    pub fn next_slot(&self) -> usize {
        self.next_slot
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Count of transitions overwritten by ring wrap so far.
    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn embedding_dim(&self) -> usize {
        self.index.dim()
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.slots.get(slot)
    }

    /// Append a transition, evicting the oldest when full. Returns the slot
    /// written. The embedding dimension must match the one the memory was
    /// built with.
    pub fn append(&mut self, transition: Transition) -> usize {
        let slot = self.next_slot;
        if slot < self.slots.len() {
            self.index.remove(slot as u64);
            self.evictions += 1;
            self.index
                .insert(slot as u64, &transition.embedding)
                .expect("appended embedding must match the replay dimension");
            self.slots[slot] = transition;
        } else {
            self.index
                .insert(slot as u64, &transition.embedding)
                .expect("appended embedding must match the replay dimension");
            self.slots.push(transition);
        }
        self.next_slot = (self.next_slot + 1) % self.capacity;
        slot
    }

    /// The live successor of `slot`, if the next ring slot continues the same
    /// episode.
    pub fn successor(&self, slot: usize) -> Option<usize> {
        let t = self.slots.get(slot)?;
        let next = (slot + 1) % self.capacity;
        let n = self.slots.get(next)?;
        if n.episode_id == t.episode_id && n.step_index == t.step_index + 1 {
            Some(next)
        } else {
            None
        }
    }

    /// Walk successor links from `start_slot`, collecting at most `max_len`
    /// transitions of one episode.
    pub fn extract_trajectory(
        &self,
        start_slot: usize,
        max_len: usize,
    ) -> Result<TrajectorySlice, ReplayError> {
        assert!(max_len >= 1, "max_len must be at least 1");
        if start_slot >= self.slots.len() {
            return Err(ReplayError::DeadSlot(start_slot));
        }
        let mut transitions = Vec::new();
        let mut slot = start_slot;
        loop {
            let t = &self.slots[slot];
            transitions.push(t.clone());
            if t.terminal {
                return Ok(TrajectorySlice {
                    transitions,
                    truncated: false,
                    bootstrap: None,
                });
            }
            let next = self.successor(slot);
            if transitions.len() == max_len {
                let bootstrap = next.map(|s| self.slots[s].embedding.clone());
                return Ok(TrajectorySlice {
                    transitions,
                    truncated: true,
                    bootstrap,
                });
            }
            match next {
                Some(s) => slot = s,
                None => {
                    return Ok(TrajectorySlice {
                        transitions,
                        truncated: true,
                        bootstrap: None,
                    });
                }
            }
        }
    }

    /// Forward slices starting at the `m` nearest live transitions to `query`.
    pub fn knn_trajectories(
        &self,
        query: &Embedding,
        m: usize,
        max_len: usize,
    ) -> Result<Vec<TrajectorySlice>, ReplayError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let hits = self.index.query(query, m)?;
        hits.iter()
            .map(|hit| self.extract_trajectory(hit.id as usize, max_len))
            .collect()
    }

    /// Uniformly sample `n` transitions usable as TD training examples:
    /// terminal ones, or ones whose successor is still live. May return fewer
    /// than `n` if the memory holds too few usable entries.
    pub fn sample_steps(&self, rng: &mut impl Rng, n: usize) -> Vec<SampledStep<'_>> {
        let mut out = Vec::with_capacity(n);
        if self.slots.is_empty() {
            return out;
        }
        let max_tries = 20 * n + 100;
        let mut tries = 0;
        while out.len() < n && tries < max_tries {
            tries += 1;
            let slot = rng.random_range(0..self.slots.len());
            let t = &self.slots[slot];
            if t.terminal {
                out.push(SampledStep {
                    transition: t,
                    next_obs: None,
                });
            } else if let Some(next) = self.successor(slot) {
                out.push(SampledStep {
                    transition: t,
                    next_obs: Some(&self.slots[next].obs),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tr(episode_id: u64, step_index: u32, terminal: bool, e: f32) -> Transition {
        Transition {
            obs: vec![e, e],
            action: (step_index % 4) as usize,
            reward: 0.1 * step_index as f32,
            embedding: Embedding::new(vec![e]).unwrap(),
            episode_id,
            step_index,
            terminal,
        }
    }

    #[test]
    fn ring_evicts_oldest_first() {
        let mut mem = ReplayMemory::new(2, 1);
        assert_eq!(mem.append(tr(0, 0, false, 0.0)), 0);
        assert_eq!(mem.append(tr(0, 1, false, 1.0)), 1);
        assert_eq!(mem.append(tr(0, 2, false, 2.0)), 0);
        assert_eq!(mem.len(), 2);
        assert_eq!(mem.evictions(), 1);
        assert_eq!(mem.get(0).unwrap().step_index, 2);
        assert_eq!(mem.get(1).unwrap().step_index, 1);
    }

    #[test]
    fn extract_stops_at_terminal() {
        let mut mem = ReplayMemory::new(16, 1);
        for step in 0..3 {
            mem.append(tr(0, step, step == 2, step as f32));
        }
        let slice = mem.extract_trajectory(0, 50).unwrap();
        assert_eq!(slice.transitions.len(), 3);
        assert!(!slice.truncated);
        assert!(slice.bootstrap.is_none());
        assert!(slice.transitions[2].terminal);
    }

    #[test]
    fn extract_truncates_at_max_len_with_bootstrap() {
        let mut mem = ReplayMemory::new(128, 1);
        for step in 0..80 {
            mem.append(tr(0, step, false, step as f32));
        }
        let slice = mem.extract_trajectory(0, 50).unwrap();
        assert_eq!(slice.transitions.len(), 50);
        assert!(slice.truncated);
        // The cut falls before step 50, which is still live: bootstrap there.
        assert_eq!(slice.bootstrap, Some(Embedding::new(vec![50.0]).unwrap()));
    }

    #[test]
    fn extract_truncates_at_episode_frontier_without_bootstrap() {
        // Capacity 4 with a 6-step ongoing episode: steps 4 and 5 overwrite
        // steps 0 and 1, so the oldest live step is 2 and the walk ends after
        // step 5 whose successor was never appended.
        let mut mem = ReplayMemory::new(4, 1);
        for step in 0..6 {
            mem.append(tr(0, step, false, step as f32));
        }
        assert_eq!(mem.evictions(), 2);
        let slice = mem.extract_trajectory(2, 50).unwrap();
        let steps: Vec<u32> = slice.transitions.iter().map(|t| t.step_index).collect();
        assert_eq!(steps, vec![2, 3, 4, 5]);
        assert!(slice.truncated);
        assert!(slice.bootstrap.is_none());
    }

    #[test]
    fn linkage_does_not_cross_episodes() {
        let mut mem = ReplayMemory::new(16, 1);
        mem.append(tr(0, 0, false, 0.0));
        mem.append(tr(0, 1, true, 1.0));
        mem.append(tr(1, 0, false, 2.0));
        let slice = mem.extract_trajectory(2, 50).unwrap();
        assert_eq!(slice.transitions.len(), 1);
        assert!(slice.truncated);
        let slice = mem.extract_trajectory(0, 50).unwrap();
        assert_eq!(slice.transitions.len(), 2);
        assert!(!slice.truncated);
    }

    #[test]
    fn knn_trajectories_self_match_first() {
        let mut mem = ReplayMemory::new(16, 1);
        for step in 0..5 {
            mem.append(tr(0, step, step == 4, 10.0 * step as f32));
        }
        let slices = mem
            .knn_trajectories(&Embedding::new(vec![20.0]).unwrap(), 2, 50)
            .unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[0].transitions[0].step_index, 2);
        // Second-nearest is step 1 or 3 (tie broken by slot id -> 1).
        assert_eq!(slices[1].transitions[0].step_index, 1);
    }

    #[test]
    fn knn_trajectories_cap_at_available() {
        let mut mem = ReplayMemory::new(16, 1);
        assert!(mem
            .knn_trajectories(&Embedding::new(vec![0.0]).unwrap(), 10, 50)
            .unwrap()
            .is_empty());
        for step in 0..3 {
            mem.append(tr(0, step, false, step as f32));
        }
        let slices = mem
            .knn_trajectories(&Embedding::new(vec![0.0]).unwrap(), 10, 50)
            .unwrap();
        assert_eq!(slices.len(), 3);
    }

    #[test]
    fn dead_slot_is_an_error() {
        let mem = ReplayMemory::new(4, 1);
        assert_eq!(mem.extract_trajectory(0, 1), Err(ReplayError::DeadSlot(0)));
    }

    #[test]
    fn sample_steps_pairs_next_observation() {
        let mut mem = ReplayMemory::new(16, 1);
        for step in 0..4 {
            mem.append(tr(0, step, step == 3, step as f32));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let steps = mem.sample_steps(&mut rng, 32);
        assert_eq!(steps.len(), 32);
        for s in steps {
            if s.transition.terminal {
                assert!(s.next_obs.is_none());
            } else {
                let expect = (s.transition.step_index + 1) as f32;
                assert_eq!(s.next_obs.unwrap(), &[expect, expect]);
            }
        }
    }

    proptest! {
        /// Appending random episode lengths then walking from every live slot
        /// never crosses an episode boundary and reproduces the appended
        /// rewards in order.
        #[test]
        fn prop_extraction_preserves_episode_structure(
            lengths in proptest::collection::vec(1usize..9, 1..8),
            max_len in 1usize..12,
        ) {
            let mut mem = ReplayMemory::new(16, 1);
            let mut log: Vec<(u64, u32, f32)> = Vec::new();
            for (episode, len) in lengths.iter().enumerate() {
                for step in 0..*len {
                    let t = tr(episode as u64, step as u32, step + 1 == *len, (episode * 100 + step) as f32);
                    log.push((t.episode_id, t.step_index, t.reward));
                    mem.append(t);
                }
            }
            for slot in 0..mem.len() {
                let slice = mem.extract_trajectory(slot, max_len).unwrap();
                let first = &slice.transitions[0];
                prop_assert!(slice.transitions.len() <= max_len);
                for (offset, t) in slice.transitions.iter().enumerate() {
                    prop_assert_eq!(t.episode_id, first.episode_id);
                    prop_assert_eq!(t.step_index, first.step_index + offset as u32);
                    let logged = log.iter()
                        .find(|(e, s, _)| *e == t.episode_id && *s == t.step_index)
                        .unwrap();
                    prop_assert_eq!(t.reward, logged.2);
                }
                let last = slice.transitions.last().unwrap();
                prop_assert_eq!(slice.truncated, !last.terminal);
            }
        }
    }
}
