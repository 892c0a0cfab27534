//! Bounded FIFO store of planned value estimates, queried by embedding.
//!
//! Planning writes (embedding, value-vector) pairs; action selection reads
//! back a distance-weighted average of the nearest stored vectors. The buffer
//! is a cache: losing it costs nothing but the next few planning passes.

use std::collections::HashMap;

use crate::knn::{Embedding, KnnIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct ValueBufferEntry {
    pub embedding: Embedding,
    pub q_np: Vec<f32>,
}

/// FIFO-bounded map from embeddings to planned action-value vectors with
/// nearest-neighbour estimation.
#[derive(Debug, Clone)]
pub struct ValueBuffer {
    capacity: usize,
    num_actions: usize,
    entries: HashMap<u64, ValueBufferEntry>,
    /// Insertion order, oldest first.
    order: std::collections::VecDeque<u64>,
    index: KnnIndex,
    next_id: u64,
}

impl ValueBuffer {
    pub fn new(capacity: usize, embedding_dim: usize, num_actions: usize) -> Self {
        assert!(capacity > 0, "value buffer capacity must be positive");
        assert!(num_actions > 0, "need at least one action");
        ValueBuffer {
            capacity,
            num_actions,
            entries: HashMap::new(),
            order: std::collections::VecDeque::new(),
            index: KnnIndex::new(embedding_dim),
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn embedding_dim(&self) -> usize {
        self.index.dim()
    }

    pub fn clear(&mut self) {
        let dim = self.index.dim();
        self.entries.clear();
        self.order.clear();
        self.index = KnnIndex::new(dim);
        // next_id keeps counting so cleared ids are never reused.
    }

    /// Insert a planned estimate, evicting the oldest entry at capacity.
    pub fn insert(&mut self, embedding: Embedding, q_np: Vec<f32>) {
        assert_eq!(
            q_np.len(),
            self.num_actions,
            "value vector arity must match the action count"
        );
        if self.entries.len() == self.capacity {
            let old = self.order.pop_front().expect("capacity > 0");
            self.entries.remove(&old);
            self.index.remove(old);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.index
            .insert(id, &embedding)
            .expect("inserted embedding must match the buffer dimension");
        self.entries
            .insert(id, ValueBufferEntry { embedding, q_np });
        self.order.push_back(id);
    }

    /// Distance-weighted average of the `min(k, len)` nearest stored value
    /// vectors, or `None` on an empty buffer.
    ///
    /// `temperature = 0` is an unweighted mean; otherwise weights are
    /// `softmax(-distance / temperature)`, computed in 64-bit with the
    /// nearest distance subtracted before exponentiation.
    pub fn estimate(&self, embedding: &Embedding, k: usize, temperature: f32) -> Option<Vec<f32>> {
        assert!(k >= 1, "k must be at least 1");
        assert!(temperature >= 0.0, "temperature must be non-negative");
        if self.entries.is_empty() {
            return None;
        }
        let hits = self
            .index
            .query(embedding, k)
            .expect("query embedding must match the buffer dimension");
        let weights: Vec<f64> = if temperature == 0.0 {
            vec![1.0; hits.len()]
        } else {
            let d_min = hits[0].distance;
            hits.iter()
                .map(|h| (-f64::from(h.distance - d_min) / f64::from(temperature)).exp())
                .collect()
        };
        let total: f64 = weights.iter().sum();
        let mut acc = vec![0.0f64; self.num_actions];
        for (hit, w) in hits.iter().zip(&weights) {
            let entry = &self.entries[&hit.id];
            for (a, q) in acc.iter_mut().zip(&entry.q_np) {
                *a += w * f64::from(*q);
            }
        }
        Some(acc.into_iter().map(|a| (a / total) as f32).collect())
    }

    /// Entries oldest-first together with their ids (checkpointing).
    pub fn entries_in_order(&self) -> impl Iterator<Item = (u64, &ValueBufferEntry)> {
        self.order.iter().map(move |id| (*id, &self.entries[id]))
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Rebuild from checkpointed entries (oldest first).
    pub fn from_entries(
        capacity: usize,
        embedding_dim: usize,
        num_actions: usize,
        entries: Vec<(u64, ValueBufferEntry)>,
        next_id: u64,
    ) -> Self {
        let mut buffer = ValueBuffer::new(capacity, embedding_dim, num_actions);
        for (id, entry) in entries {
            buffer
                .index
                .insert(id, &entry.embedding)
                .expect("checkpointed embedding must match the buffer dimension");
            buffer.entries.insert(id, entry);
            buffer.order.push_back(id);
        }
        buffer.next_id = next_id;
        buffer
    }
}
