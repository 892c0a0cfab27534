//! Exact k-nearest-neighbour search over fixed-dimension embeddings.
//!
//! The index is a brute-force scan under squared L2 distance: distances are
//! computed in 32-bit floats and accumulated in 64-bit, results are ordered by
//! (distance, id) so queries are fully deterministic. Rust's borrow rules give
//! the intended concurrency contract for free: `query` takes `&self` and may
//! run from several threads, `insert`/`remove` take `&mut self`.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("embedding dimension mismatch: index holds {expected}-dim embeddings, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("id {0} is already present in the index")]
    DuplicateId(u64),
    #[error("embedding contains a non-finite component")]
    NonFinite,
}

/// A fixed-length vector of finite `f32` components.
///
/// Construction validates finiteness; dimension agreement is enforced by the
/// structures an embedding is inserted into.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(components: Vec<f32>) -> Result<Self, IndexError> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Embedding(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

/// Squared L2 distance between two equal-length slices.
///
/// Component differences are formed in `f32`, their squares accumulated in
/// `f64`, and the sum narrowed back to `f32` for comparison and reporting.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += f64::from(d) * f64::from(d);
    }
    acc as f32
}

/// One query result: the stored id and its squared L2 distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighbourHit {
    pub id: u64,
    pub distance: f32,
}

/// Brute-force exact kNN index over embeddings of one fixed dimension.
///
/// Embeddings are stored in a single contiguous buffer so a query is one
/// cache-friendly scan. Slots freed by `remove` are reused by later inserts.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    live: Vec<bool>,
    by_id: HashMap<u64, usize>,
    free: Vec<usize>,
}

impl KnnIndex {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        KnnIndex {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            live: Vec::new(),
            by_id: HashMap::new(),
            free: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Insert an embedding under a caller-chosen id.
    pub fn insert(&mut self, id: u64, embedding: &Embedding) -> Result<(), IndexError> {
        if embedding.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        if self.by_id.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let slot = match self.free.pop() {
            Some(slot) => {
                self.ids[slot] = id;
                self.live[slot] = true;
                self.data[slot * self.dim..(slot + 1) * self.dim]
                    .copy_from_slice(embedding.as_slice());
                slot
            }
            None => {
                let slot = self.ids.len();
                self.ids.push(id);
                self.live.push(true);
                self.data.extend_from_slice(embedding.as_slice());
                slot
            }
        };
        self.by_id.insert(id, slot);
        Ok(())
    }

    /// Remove an id; returns `false` if it was not present.
    pub fn remove(&mut self, id: u64) -> bool {
        match self.by_id.remove(&id) {
            Some(slot) => {
                self.live[slot] = false;
                self.free.push(slot);
                true
            }
            None => false,
        }
    }

    /// The `min(k, len)` nearest stored embeddings, ascending by distance,
    /// ties broken by ascending id. `k` must be at least 1.
    pub fn query(&self, q: &Embedding, k: usize) -> Result<Vec<NeighbourHit>, IndexError> {
        assert!(k >= 1, "k must be at least 1");
        if q.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        let mut worst = Ranked {
            distance: f32::INFINITY,
            id: u64::MAX,
        };
        let mut heap: Vec<Ranked> = Vec::with_capacity(k + 1);
        for (slot, live) in self.live.iter().enumerate() {
            if !live {
                continue;
            }
            let row = &self.data[slot * self.dim..(slot + 1) * self.dim];
            let candidate = Ranked {
                distance: squared_l2(q.as_slice(), row),
                id: self.ids[slot],
            };
            if heap.len() < k {
                heap.push(candidate);
                if heap.len() == k {
                    heap.sort_unstable();
                    worst = heap[k - 1];
                }
            } else if candidate < worst {
                let pos = heap.partition_point(|h| *h < candidate);
                heap.insert(pos, candidate);
                heap.pop();
                worst = heap[k - 1];
            }
        }
        if heap.len() < k {
            heap.sort_unstable();
        }
        Ok(heap
            .into_iter()
            .map(|r| NeighbourHit {
                id: r.id,
                distance: r.distance,
            })
            .collect())
    }
}

/// Candidate ordered lexicographically by (distance, id) using total float order.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    distance: f32,
    id: u64,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
