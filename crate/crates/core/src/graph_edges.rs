//! Light-weight subgraph sampling.
//!
//! No graph is ever stored. Each training sample's own click and query
//! sequences are read as a small subgraph of the global query-item graph and
//! turned into typed positive pairs:
//!
//! * `I2I`: clicks within `window_size` positions of each other,
//! * `Q2Q`: queries of the same search session,
//! * `Q2I`: a query and a click close in time with overlapping categories.
//!
//! Every pair is emitted in both directions.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{BehaviorEvent, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityType {
    Item,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    I2I,
    Q2Q,
    Q2I,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [EdgeKind::I2I, EdgeKind::Q2Q, EdgeKind::Q2I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::I2I => "i2i",
            EdgeKind::Q2Q => "q2q",
            EdgeKind::Q2I => "q2i",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A directed positive pair. For `Q2I` the mirrored item-to-query direction
/// keeps the kind and swaps the endpoint types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub kind: EdgeKind,
    pub anchor_type: EntityType,
    pub anchor_id: u64,
    pub positive_type: EntityType,
    pub positive_id: u64,
}

impl Edge {
    fn pair(kind: EdgeKind, a: (EntityType, u64), b: (EntityType, u64)) -> [Edge; 2] {
        [
            Edge {
                kind,
                anchor_type: a.0,
                anchor_id: a.1,
                positive_type: b.0,
                positive_id: b.1,
            },
            Edge {
                kind,
                anchor_type: b.0,
                anchor_id: b.1,
                positive_type: a.0,
                positive_id: a.1,
            },
        ]
    }

    /// `kind \t anchor_id \t positive_id`
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}", self.kind, self.anchor_id, self.positive_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeConfig {
    pub window_size: usize,
    /// Largest gap in seconds between consecutive queries of one session.
    pub session_gap: u64,
    /// Query/click time window `T` in seconds.
    pub q2i_timespan: u64,
    /// Probability of building item pairs from the seeds sequence instead of
    /// the click sequence.
    pub seeds_mix_rate: f64,
    /// Accept clicks both before and after a query; `false` keeps only clicks
    /// after it.
    pub symmetric_q2i_time: bool,
    /// Build `Q2Q` and `Q2I` edges at all.
    pub query_edges: bool,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            window_size: 2,
            session_gap: 1800,
            q2i_timespan: 1800,
            seeds_mix_rate: 0.2,
            symmetric_q2i_time: true,
            query_edges: true,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::config("window_size", "must be >= 1"));
        }
        if self.q2i_timespan == 0 {
            return Err(Error::config("q2i_timespan", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.seeds_mix_rate) {
            return Err(Error::config("seeds_mix_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Item pairs within the window. One uniform draw from `rng` per call picks
/// the seeds sequence (probability `seeds_mix_rate`) or the click sequence.
pub fn build_i2i_edges(
    click_seq: &[BehaviorEvent],
    seeds_seq: &[BehaviorEvent],
    cfg: &EdgeConfig,
    rng: &mut impl Rng,
) -> Vec<Edge> {
    let use_seeds = rng.gen::<f64>() < cfg.seeds_mix_rate;
    let seq = if use_seeds { seeds_seq } else { click_seq };
    let mut edges = Vec::new();
    for j in 0..seq.len() {
        let a = seq[j].entity_id;
        for c in &seq[j + 1..seq.len().min(j + cfg.window_size + 1)] {
            if c.entity_id != a {
                edges.extend(Edge::pair(
                    EdgeKind::I2I,
                    (EntityType::Item, a),
                    (EntityType::Item, c.entity_id),
                ));
            }
        }
    }
    edges
}

/// Splits a time-ordered query sequence into sessions. A new session starts
/// after a gap longer than `session_gap` or when consecutive queries share
/// no category.
pub fn segment_query_sessions<'a>(
    query_seq: &'a [BehaviorEvent],
    cfg: &EdgeConfig,
) -> Vec<&'a [BehaviorEvent]> {
    let mut sessions = Vec::new();
    let mut start = 0;
    for i in 1..query_seq.len() {
        let (prev, cur) = (&query_seq[i - 1], &query_seq[i]);
        let gap = cur.timestamp.saturating_sub(prev.timestamp);
        if gap > cfg.session_gap || !prev.categories.intersects(&cur.categories) {
            sessions.push(&query_seq[start..i]);
            start = i;
        }
    }
    if start < query_seq.len() {
        sessions.push(&query_seq[start..]);
    }
    sessions
}

/// Complete digraph over the distinct query ids of each session: every
/// ordered pair of different ids yields one edge, however often either
/// query repeats.
pub fn build_q2q_edges(sessions: &[&[BehaviorEvent]]) -> Vec<Edge> {
    let mut edges = Vec::new();
    for session in sessions {
        let mut ids: Vec<u64> = Vec::with_capacity(session.len());
        for q in session.iter() {
            if !ids.contains(&q.entity_id) {
                ids.push(q.entity_id);
            }
        }
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                edges.extend(Edge::pair(
                    EdgeKind::Q2Q,
                    (EntityType::Query, a),
                    (EntityType::Query, b),
                ));
            }
        }
    }
    edges
}

/// Query-click pairs that are close in time and share a category.
pub fn build_q2i_edges(
    query_seq: &[BehaviorEvent],
    click_seq: &[BehaviorEvent],
    cfg: &EdgeConfig,
) -> Vec<Edge> {
    let mut edges = Vec::new();
    for q in query_seq {
        for c in click_seq {
            let dt = c.timestamp as i128 - q.timestamp as i128;
            let span = if cfg.symmetric_q2i_time { dt.abs() } else { dt };
            if span > 0 && span < cfg.q2i_timespan as i128 && q.categories.intersects(&c.categories) {
                edges.extend(Edge::pair(
                    EdgeKind::Q2I,
                    (EntityType::Query, q.entity_id),
                    (EntityType::Item, c.entity_id),
                ));
            }
        }
    }
    edges
}

/// All edges of one sample, in `I2I`, `Q2Q`, `Q2I` order.
pub fn build_all_edges(sample: &TrainingSample, cfg: &EdgeConfig, rng: &mut impl Rng) -> Vec<Edge> {
    let mut edges = build_i2i_edges(&sample.click_seq, &sample.seeds_seq, cfg, rng);
    if cfg.query_edges {
        let sessions = segment_query_sessions(&sample.query_seq, cfg);
        edges.extend(build_q2q_edges(&sessions));
        edges.extend(build_q2i_edges(&sample.query_seq, &sample.click_seq, cfg));
    }
    edges
}
