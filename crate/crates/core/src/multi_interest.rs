//! Similarity features over graph embeddings.
//!
//! `sim_extract(target, sequence)` scores every sequence entry by cosine
//! similarity to the target, keeps the top `k`, maps each similarity to an
//! equal-width bin over `[-1, 1]`, and represents the entry as
//! `bin_embedding + position_embedding` where the position is the entry's
//! index in the time-ordered sequence (0 = oldest). The `k` vectors are
//! concatenated in descending-similarity order; missing slots use dedicated
//! padding ids.
//!
//! Graph embeddings are only read here. The CTR loss trains the bin and
//! position tables, never the graph tables: the top-k choice and the hard
//! binning have no gradient.

use std::borrow::Cow;

use crate::embed_learn::{EmbeddingTable, GraphTables, SparseGrad, TableKind};
use crate::error::{Error, Result};
use crate::graph_edges::EntityType;
use crate::ingest::{BehaviorEvent, EventKind, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinningScheme {
    pub num_bins: usize,
    /// Longest sequence whose positions get their own id.
    pub max_seq_len: usize,
}

impl Default for BinningScheme {
    fn default() -> Self {
        BinningScheme {
            num_bins: 20,
            max_seq_len: 100,
        }
    }
}

impl BinningScheme {
    /// `clamp(floor((s + 1) / 2 · B), 0, B - 1)`
    pub fn bin(&self, sim: f64) -> u64 {
        let b = self.num_bins as f64;
        let raw = ((sim + 1.0) / 2.0 * b).floor();
        raw.clamp(0.0, b - 1.0) as u64
    }

    pub fn pad_bin_id(&self) -> u64 {
        self.num_bins as u64
    }

    pub fn pad_pos_id(&self) -> u64 {
        self.max_seq_len as u64
    }
}

/// Cosine similarity; zero when either norm is below `1e-12`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with {} and {} components",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_unchecked(u, v))
}

fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    (uv / (nu * nv)).clamp(-1.0, 1.0)
}

/// The `k` most similar candidates as `(index, similarity)`, descending;
/// equal similarities keep the smaller index first.
pub fn top_k_vectors<V: AsRef<[f64]>>(target: &[f64], candidates: &[V], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (i, cosine_unchecked(target, c.as_ref())))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn table_for(tables: &GraphTables, kind: EventKind) -> &EmbeddingTable {
    match kind {
        EventKind::Click => tables.get(EntityType::Item),
        EventKind::Query => tables.get(EntityType::Query),
    }
}

fn event_vectors<'a>(seq: &[BehaviorEvent], tables: &'a GraphTables) -> Vec<Cow<'a, [f64]>> {
    seq.iter()
        .map(|e| table_for(tables, e.kind).vector(e.entity_id))
        .collect()
}

/// Top-k retrieval of `seq` entries against a target entity.
pub fn top_k(target: &BehaviorEvent, seq: &[BehaviorEvent], tables: &GraphTables, k: usize) -> Vec<(usize, f64)> {
    let t = table_for(tables, target.kind).vector(target.entity_id);
    top_k_vectors(&t, &event_vectors(seq, tables), k)
}

/// Bin and position tables trained by the CTR loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrTables {
    pub bin: EmbeddingTable,
    pub position: EmbeddingTable,
}

impl CtrTables {
    pub fn new(dim: usize, seed: u64) -> Self {
        CtrTables {
            bin: EmbeddingTable::new(TableKind::Bin, dim, seed),
            position: EmbeddingTable::new(TableKind::Position, dim, seed),
        }
    }
}

/// Feature-extraction settings, including the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub k: usize,
    pub scheme: BinningScheme,
    /// Add position embeddings; when off positions contribute zero.
    pub use_positions: bool,
    /// Compute `f_q2q` and `f_q2i`; when off both are fully padded.
    pub use_query: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            k: 10,
            scheme: BinningScheme::default(),
            use_positions: true,
            use_query: true,
        }
    }
}

/// `k` slots of `(bin_id, position_id)` and their concatenated vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFeature {
    pub entries: Vec<(u64, u64)>,
    pub vector: Vec<f64>,
}

impl SimFeature {
    /// Routes the gradient of `vector` to the bin and position rows used.
    pub fn scatter_grad(
        &self,
        d_vector: &[f64],
        dim: usize,
        use_positions: bool,
        bin_grad: &mut SparseGrad,
        pos_grad: &mut SparseGrad,
    ) {
        for (slot, &(bin, pos)) in self.entries.iter().enumerate() {
            let g = &d_vector[slot * dim..(slot + 1) * dim];
            bin_grad.add(bin, g, 1.0);
            if use_positions {
                pos_grad.add(pos, g, 1.0);
            }
        }
    }
}

/// SimExtract over precomputed target and sequence vectors.
pub fn sim_extract_vectors<V: AsRef<[f64]>>(
    target: &[f64],
    seq: &[V],
    ctr: &CtrTables,
    cfg: &FeatureConfig,
) -> SimFeature {
    let scheme = cfg.scheme;
    let start = seq.len().saturating_sub(scheme.max_seq_len);
    let seq = &seq[start..];
    let top = top_k_vectors(target, seq, cfg.k);
    let dim = ctr.bin.dim();
    let mut entries = Vec::with_capacity(cfg.k);
    let mut vector = Vec::with_capacity(cfg.k * dim);
    for slot in 0..cfg.k {
        let (bin, pos) = match top.get(slot) {
            Some(&(idx, sim)) => (scheme.bin(sim), idx as u64),
            None => (scheme.pad_bin_id(), scheme.pad_pos_id()),
        };
        let b = ctr.bin.vector(bin);
        if cfg.use_positions {
            let p = ctr.position.vector(pos);
            vector.extend(b.iter().zip(p.iter()).map(|(x, y)| x + y));
        } else {
            vector.extend_from_slice(&b);
        }
        entries.push((bin, pos));
    }
    SimFeature { entries, vector }
}

/// SimExtract of a target entity against a behavior sequence.
pub fn sim_extract(
    target: &BehaviorEvent,
    seq: &[BehaviorEvent],
    graph: &GraphTables,
    ctr: &CtrTables,
    cfg: &FeatureConfig,
) -> SimFeature {
    let t = table_for(graph, target.kind).vector(target.entity_id);
    sim_extract_vectors(&t, &event_vectors(seq, graph), ctr, cfg)
}

/// The three similarity features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub i2i: SimFeature,
    pub q2q: SimFeature,
    pub q2i: SimFeature,
}

impl SampleFeatures {
    pub fn parts(&self) -> [&SimFeature; 3] {
        [&self.i2i, &self.q2q, &self.q2i]
    }

    /// `concat(f_i2i, f_q2q, f_q2i, other)`
    pub fn concat(&self, other: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.i2i.vector.len() + other.len());
        for part in self.parts() {
            v.extend_from_slice(&part.vector);
        }
        v.extend_from_slice(other);
        v
    }
}

/// `f_i2i` (target item vs clicks), `f_q2q` (current query vs queries) and
/// `f_q2i` (current query vs clicks).
pub fn build_features(
    sample: &TrainingSample,
    graph: &GraphTables,
    ctr: &CtrTables,
    cfg: &FeatureConfig,
) -> SampleFeatures {
    let empty: &[BehaviorEvent] = &[];
    let i2i = sim_extract(&sample.target_item, &sample.click_seq, graph, ctr, cfg);
    let (queries, clicks) = if cfg.use_query {
        (&sample.query_seq[..], &sample.click_seq[..])
    } else {
        (empty, empty)
    };
    let q2q = sim_extract(&sample.current_query, queries, graph, ctr, cfg);
    let q2i = sim_extract(&sample.current_query, clicks, graph, ctr, cfg);
    SampleFeatures { i2i, q2q, q2i }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::CategorySet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bin_boundaries() {
        let s = BinningScheme::default();
        assert_eq!(s.bin(1.0), 19);
        assert_eq!(s.bin(-1.0), 0);
        assert_eq!(s.bin(0.214), 12);
        assert_eq!(s.bin(0.0), 10);
        assert_eq!(s.pad_bin_id(), 20);
    }

    #[test]
    fn top_k_short_sequence_and_ties() {
        let t = vec![1.0, 0.0];
        let c = vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let top = top_k_vectors(&t, &c, 10);
        assert_eq!(top.len(), 3);
        assert_eq!(top.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 0, 1]);

        let same = vec![vec![2.0, 0.0]; 12];
        let top = top_k_vectors(&t, &same, 10);
        assert_eq!(top.iter().map(|x| x.0).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert!(top_k_vectors::<Vec<f64>>(&t, &[], 3).is_empty());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let t: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            // Oracle: sort every (sim, index) pair and keep the first ten.
            let mut all: Vec<(usize, f64)> = c
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let d: f64 = t.iter().zip(v).map(|(a, b)| a * b).sum();
                    let n = t.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    (i, d / n)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got: Vec<usize> = top_k_vectors(&t, &c, 10).iter().map(|x| x.0).collect();
            let want: Vec<usize> = all[..10].iter().map(|x| x.0).collect();
            assert_eq!(got, want);
        }
    }

    fn events(kind: EventKind, ids: &[u64]) -> Vec<BehaviorEvent> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| BehaviorEvent {
                kind,
                entity_id: id,
                timestamp: i as u64,
                categories: CategorySet::single(0),
            })
            .collect()
    }

    #[test]
    fn empty_sequence_is_all_padding() {
        let graph = GraphTables::new(4, 1);
        let ctr = CtrTables::new(4, 2);
        let cfg = FeatureConfig::default();
        let target = events(EventKind::Click, &[5]).remove(0);
        let f = sim_extract(&target, &[], &graph, &ctr, &cfg);
        assert_eq!(f.entries, vec![(20, 100); 10]);
        assert_eq!(f.vector.len(), 40);
        assert_eq!(f, sim_extract(&target, &[], &graph, &ctr, &cfg));
        let pad: Vec<f64> = ctr
            .bin
            .vector(20)
            .iter()
            .zip(ctr.position.vector(100).iter())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(&f.vector[..4], pad.as_slice());
    }

    #[test]
    fn feature_routing_and_sizes() {
        let graph = GraphTables::new(10, 1);
        let ctr = CtrTables::new(10, 2);
        let cfg = FeatureConfig::default();
        let sample = TrainingSample {
            user_id: 1,
            target_item: events(EventKind::Click, &[3]).remove(0),
            current_query: events(EventKind::Query, &[3]).remove(0),
            click_seq: events(EventKind::Click, &[1, 2, 3, 4]),
            query_seq: Vec::new(),
            seeds_seq: Vec::new(),
            other_features: vec![],
            label: 1,
        };
        let f = build_features(&sample, &graph, &ctr, &cfg);
        for part in f.parts() {
            assert_eq!(part.vector.len(), 10 * 10);
        }
        assert!(f.q2q.entries.iter().all(|&e| e == (20, 100)));
        // Target item 3 appears at index 2 with similarity exactly 1.
        assert_eq!(f.i2i.entries[0], (19, 2));
        // f_q2i compares query 3 against the item table: the item with id 3
        // is a different entity, so it is not automatically the top match.
        let q = graph.query.vector(3);
        let expected = top_k_vectors(&q, &event_vectors(&sample.click_seq, &graph), 10);
        let got: Vec<u64> = f.q2i.entries.iter().take(4).map(|e| e.1).collect();
        assert_eq!(got, expected.iter().map(|e| e.0 as u64).collect::<Vec<_>>());

        let no_query = FeatureConfig {
            use_query: false,
            ..cfg
        };
        let f = build_features(&sample, &graph, &ctr, &no_query);
        assert!(f.q2i.entries.iter().all(|&e| e == (20, 100)));
    }

    #[test]
    fn long_sequences_keep_the_most_recent_positions() {
        let graph = GraphTables::new(4, 1);
        let ctr = CtrTables::new(4, 2);
        let cfg = FeatureConfig {
            k: 3,
            scheme: BinningScheme {
                num_bins: 20,
                max_seq_len: 5,
            },
            ..FeatureConfig::default()
        };
        let target = events(EventKind::Click, &[0]).remove(0);
        let seq = events(EventKind::Click, &(0..9).collect::<Vec<_>>());
        let f = sim_extract(&target, &seq, &graph, &ctr, &cfg);
        // Item 0 sits at index 0 and is cut; all positions stay below 5.
        assert!(f.entries.iter().all(|&(b, p)| p < 5 && b < 19));
    }

    #[test]
    fn scatter_grad_hits_used_rows() {
        let f = SimFeature {
            entries: vec![(3, 0), (3, 1)],
            vector: vec![0.0; 4],
        };
        let (mut bg, mut pg) = (SparseGrad::default(), SparseGrad::default());
        f.scatter_grad(&[1.0, 2.0, 3.0, 4.0], 2, true, &mut bg, &mut pg);
        assert_eq!(bg.get(3).unwrap(), &[4.0, 6.0]);
        assert_eq!(pg.get(0).unwrap(), &[1.0, 2.0]);
        assert_eq!(pg.get(1).unwrap(), &[3.0, 4.0]);
        assert!(bg.get(0).is_none());
    }

    proptest! {
        #[test]
        fn binning_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let s = BinningScheme::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.bin(lo) <= s.bin(hi));
            prop_assert!(s.bin(hi) < 20);
        }

        #[test]
        fn retrieval_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<Vec<f64>> = (0..15).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * scale).collect();
            let cs: Vec<Vec<f64>> = c.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let s = BinningScheme::default();
            let a: Vec<(usize, u64)> = top_k_vectors(&t, &c, 5).iter().map(|&(i, x)| (i, s.bin(x))).collect();
            let b: Vec<(usize, u64)> = top_k_vectors(&ts, &cs, 5).iter().map(|&(i, x)| (i, s.bin(x))).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn output_size_is_constant(len in 0usize..40, k in 1usize..12) {
            let graph = GraphTables::new(3, 1);
            let ctr = CtrTables::new(3, 2);
            let cfg = FeatureConfig { k, ..FeatureConfig::default() };
            let target = events(EventKind::Click, &[999]).remove(0);
            let seq = events(EventKind::Click, &(0..len as u64).collect::<Vec<_>>());
            let f = sim_extract(&target, &seq, &graph, &ctr, &cfg);
            prop_assert_eq!(f.vector.len(), k * 3);
            prop_assert_eq!(f.entries.len(), k);
        }

        #[test]
        fn without_positions_order_does_not_matter(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let graph = GraphTables::new(6, seed);
            let ctr = CtrTables::new(6, 2);
            let cfg = FeatureConfig { use_positions: false, ..FeatureConfig::default() };
            let target = events(EventKind::Click, &[10_000]).remove(0);
            let ids: Vec<u64> = (0..14).collect();
            let mut shuffled = ids.clone();
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            let a = sim_extract(&target, &events(EventKind::Click, &ids), &graph, &ctr, &cfg);
            let b = sim_extract(&target, &events(EventKind::Click, &shuffled), &graph, &ctr, &cfg);
            prop_assert_eq!(a.vector, b.vector);
        }
    }
}
