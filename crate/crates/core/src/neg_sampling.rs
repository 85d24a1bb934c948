//! Cross-batch negative sampling.
//!
//! One FIFO queue per entity type remembers the most recent ids seen in the
//! training stream. Negatives for an edge are drawn uniformly, with
//! replacement, from the queue matching the positive's type.

use std::collections::VecDeque;

use rand::Rng;

use crate::embed_learn::IdMap;
use crate::error::{Error, Result};
use crate::graph_edges::EntityType;

/// Frequency-based insertion skipping for very frequent ids.
#[derive(Debug, Clone)]
struct Subsampler {
    threshold: f64,
    counts: IdMap<u64>,
    total: u64,
}

impl Subsampler {
    /// Records one observation of `id` and returns its acceptance
    /// probability `min(1, sqrt(t / f))`.
    fn observe(&mut self, id: u64) -> f64 {
        let c = self.counts.entry(id).or_insert(0);
        *c += 1;
        self.total += 1;
        let freq = *c as f64 / self.total as f64;
        (self.threshold / freq).sqrt().min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct NegQueue {
    entity_type: EntityType,
    capacity: usize,
    buffer: VecDeque<u64>,
    subsampler: Option<Subsampler>,
}

/// Result of a draw: `ids.len() + shortfall` equals the requested count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub ids: Vec<u64>,
    pub shortfall: usize,
}

impl NegQueue {
    pub fn new(entity_type: EntityType, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("queue_capacity", "must be > 0"));
        }
        Ok(NegQueue {
            entity_type,
            capacity,
            buffer: VecDeque::with_capacity(capacity.min(1 << 20)),
            subsampler: None,
        })
    }

    /// Enables subsampling with relative-frequency threshold `t`.
    pub fn with_subsampling(mut self, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::config("subsample_threshold", "must be > 0"));
        }
        self.subsampler = Some(Subsampler {
            threshold,
            counts: IdMap::default(),
            total: 0,
        });
        Ok(self)
    }

    pub fn entity_type(&self) -> EntityType {
        self.entity_type
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Oldest first.
    pub fn contents(&self) -> impl Iterator<Item = u64> + '_ {
        self.buffer.iter().copied()
    }

    /// Appends `id`, evicting the oldest entry at capacity. Returns whether
    /// the id was inserted (subsampling may skip it).
    pub fn push(&mut self, entity_type: EntityType, id: u64, rng: &mut impl Rng) -> Result<bool> {
        if entity_type != self.entity_type {
            return Err(Error::Contract(format!(
                "pushed a {entity_type:?} id into the {:?} queue",
                self.entity_type
            )));
        }
        if let Some(sub) = &mut self.subsampler {
            let keep = sub.observe(id);
            if keep < 1.0 && rng.gen::<f64>() >= keep {
                return Ok(false);
            }
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(id);
        Ok(true)
    }

    /// Draws `n` ids uniformly with replacement, rejecting ids in `exclude`.
    /// Gives up after `10 * n` draws and reports the shortfall.
    pub fn sample_negatives(&self, n: usize, exclude: &[u64], rng: &mut impl Rng) -> Result<Negatives> {
        if self.buffer.is_empty() {
            return Err(Error::NotWarmedUp);
        }
        let mut ids = Vec::with_capacity(n);
        let mut draws = 0;
        while ids.len() < n && draws < 10 * n {
            draws += 1;
            let id = self.buffer[rng.gen_range(0..self.buffer.len())];
            if !exclude.contains(&id) {
                ids.push(id);
            }
        }
        let shortfall = n - ids.len();
        Ok(Negatives { ids, shortfall })
    }
}

/// The item and query queues owned by the training loop.
#[derive(Debug, Clone)]
pub struct NegQueues {
    pub item: NegQueue,
    pub query: NegQueue,
}

impl NegQueues {
    pub fn new(capacity: usize, subsample_threshold: Option<f64>) -> Result<Self> {
        let mut item = NegQueue::new(EntityType::Item, capacity)?;
        let mut query = NegQueue::new(EntityType::Query, capacity)?;
        if let Some(t) = subsample_threshold {
            item = item.with_subsampling(t)?;
            query = query.with_subsampling(t)?;
        }
        Ok(NegQueues { item, query })
    }

    pub fn get(&self, t: EntityType) -> &NegQueue {
        match t {
            EntityType::Item => &self.item,
            EntityType::Query => &self.query,
        }
    }

    pub fn push(&mut self, t: EntityType, id: u64, rng: &mut impl Rng) -> Result<bool> {
        match t {
            EntityType::Item => self.item.push(t, id, rng),
            EntityType::Query => self.query.push(t, id, rng),
        }
    }
}
