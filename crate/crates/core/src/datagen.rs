//! Synthetic behavior logs with planted category and cluster structure.
//!
//! Every category owns a pool of items split into contiguous intent
//! clusters. Queries belong to one category and one cluster. A user holds a
//! handful of `(category, cluster)` interests and visits them session by
//! session: each session opens with a query, continues with clicks that
//! mostly stay inside the session's cluster, and the next session usually
//! moves to a different interest after a long gap.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{assemble_sample, BehaviorEvent, BehaviorSequence, CategorySet, EventKind, SeqLimits, TrainingSample};

const BASE_EPOCH: u64 = 1_600_000_000;
const START_SPREAD_SECS: u64 = 30 * 24 * 3600;

/// Generator settings. The first nine fields are the core knobs; the rest
/// shape sessions and interests and have workable defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_queries: usize,
    pub num_categories: usize,
    /// Upper bound on the number of items of one category that sessions
    /// draw from. Items beyond it stay in the catalog but are never clicked.
    pub items_per_category: usize,
    /// Mean idle time between sessions, in seconds.
    pub session_gap_mean: f64,
    pub intra_category_click_prob: f64,
    pub seq_len_max: usize,
    pub seed: u64,

    pub clusters_per_category: usize,
    pub interests_per_user: usize,
    /// Probability that a new session switches to another interest.
    pub interest_shift_prob: f64,
    /// Probability that a session's query names the session's own cluster
    /// rather than a random cluster of the same category.
    pub query_cluster_prob: f64,
    pub sessions_min: usize,
    pub sessions_max: usize,
    pub clicks_per_session_max: usize,
    /// Probability of a refined query after each in-session click.
    pub refine_query_prob: f64,
    /// Probability that an item carries a second category.
    pub multi_category_prob: f64,
    /// Training targets per user, most recent first; 0 keeps every click.
    pub train_targets_per_user: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_users: 200,
            num_items: 500,
            num_queries: 100,
            num_categories: 10,
            items_per_category: 50,
            session_gap_mean: 6.0 * 3600.0,
            intra_category_click_prob: 0.9,
            seq_len_max: 200,
            seed: 7,
            clusters_per_category: 4,
            interests_per_user: 4,
            interest_shift_prob: 0.7,
            query_cluster_prob: 0.8,
            sessions_min: 3,
            sessions_max: 8,
            clicks_per_session_max: 6,
            refine_query_prob: 0.15,
            multi_category_prob: 0.1,
            train_targets_per_user: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts: [(&'static str, usize); 9] = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_queries", self.num_queries),
            ("num_categories", self.num_categories),
            ("items_per_category", self.items_per_category),
            ("seq_len_max", self.seq_len_max),
            ("clusters_per_category", self.clusters_per_category),
            ("interests_per_user", self.interests_per_user),
            ("clicks_per_session_max", self.clicks_per_session_max),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if self.sessions_min == 0 {
            return Err(Error::config("sessions_min", "must be > 0"));
        }
        if self.sessions_max < self.sessions_min {
            return Err(Error::config("sessions_max", "must be >= sessions_min"));
        }
        if self.num_items < self.num_categories {
            return Err(Error::config("num_items", "must be >= num_categories"));
        }
        if !(self.session_gap_mean.is_finite() && self.session_gap_mean > 0.0) {
            return Err(Error::config("session_gap_mean", "must be a positive number of seconds"));
        }
        let probs = [
            ("intra_category_click_prob", self.intra_category_click_prob),
            ("interest_shift_prob", self.interest_shift_prob),
            ("query_cluster_prob", self.query_cluster_prob),
            ("refine_query_prob", self.refine_query_prob),
            ("multi_category_prob", self.multi_category_prob),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Static item/query structure derived from the config seed.
#[derive(Debug, Clone)]
pub struct Catalog {
    num_categories: usize,
    clusters_per_category: usize,
    item_categories: Vec<CategorySet>,
    /// Clickable items per `(category, cluster)`, indexed `c * K + k`.
    cluster_items: Vec<Vec<u64>>,
    /// Clickable items carrying each category (primary or secondary).
    category_items: Vec<Vec<u64>>,
    /// Queries per `(category, cluster)`.
    cluster_queries: Vec<Vec<u64>>,
    category_queries: Vec<Vec<u64>>,
}

impl Catalog {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let c_n = cfg.num_categories;
        let k_n = cfg.clusters_per_category;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00c0_ffee_cafe_f00d);

        let mut item_categories = Vec::with_capacity(cfg.num_items);
        for item in 0..cfg.num_items {
            let primary = (item % c_n) as u32;
            let mut cats = vec![primary];
            if c_n > 1 && rng.gen_bool(cfg.multi_category_prob) {
                let offset = rng.gen_range(1..c_n) as u32;
                cats.push((primary + offset) % c_n as u32);
            }
            item_categories.push(CategorySet::new(cats).expect("nonempty"));
        }

        let mut cluster_items = vec![Vec::new(); c_n * k_n];
        let mut category_items = vec![Vec::new(); c_n];
        for c in 0..c_n {
            let pool: Vec<u64> = (c..cfg.num_items)
                .step_by(c_n)
                .take(cfg.items_per_category)
                .map(|i| i as u64)
                .collect();
            let len = pool.len();
            for (p, &item) in pool.iter().enumerate() {
                let k = p * k_n / len;
                cluster_items[c * k_n + k].push(item);
            }
        }
        for c in 0..c_n {
            for cluster in &cluster_items[c * k_n..(c + 1) * k_n] {
                for &item in cluster {
                    for &cat in item_categories[item as usize].as_slice() {
                        category_items[cat as usize].push(item);
                    }
                }
            }
        }
        for list in &mut category_items {
            list.sort_unstable();
            list.dedup();
        }

        let mut cluster_queries = vec![Vec::new(); c_n * k_n];
        let mut category_queries = vec![Vec::new(); c_n];
        for q in 0..cfg.num_queries {
            let c = q % c_n;
            let k = (q / c_n) % k_n;
            cluster_queries[c * k_n + k].push(q as u64);
            category_queries[c].push(q as u64);
        }

        Ok(Catalog {
            num_categories: c_n,
            clusters_per_category: k_n,
            item_categories,
            cluster_items,
            category_items,
            cluster_queries,
            category_queries,
        })
    }

    pub fn item_categories(&self, item: u64) -> &CategorySet {
        &self.item_categories[item as usize]
    }

    /// Category of a query id.
    pub fn query_category(&self, query: u64) -> u32 {
        (query % self.num_categories as u64) as u32
    }

    fn query_cluster(&self, query: u64) -> usize {
        let c = self.query_category(query) as usize;
        let k = (query as usize / self.num_categories) % self.clusters_per_category;
        c * self.clusters_per_category + k
    }

    /// Primary category of every clickable item, keyed by item id.
    pub fn primary_categories(&self) -> BTreeMap<u64, u32> {
        self.cluster_items
            .iter()
            .flatten()
            .map(|&i| (i, (i % self.num_categories as u64) as u32))
            .collect()
    }

    /// Items sharing at least one category with `cats`, ascending and unique.
    pub fn items_sharing(&self, cats: &CategorySet) -> Vec<u64> {
        let mut out: Vec<u64> = cats
            .as_slice()
            .iter()
            .filter_map(|&c| self.category_items.get(c as usize))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn cluster_of_category(&self, c: usize, k: usize) -> usize {
        c * self.clusters_per_category + k
    }

    /// Picks an item from a cluster, falling back to the whole category
    /// pool when the cluster happens to be empty.
    fn pick_item(&self, cluster: usize, rng: &mut impl Rng) -> Option<u64> {
        let c = cluster / self.clusters_per_category;
        self.cluster_items[cluster]
            .choose(rng)
            .or_else(|| self.category_items[c].choose(rng))
            .copied()
    }
}

/// Generates one behavior sequence per user, ascending by user id.
pub fn generate_log(cfg: &GenConfig) -> Result<Vec<BehaviorSequence>> {
    let catalog = Catalog::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c_n = cfg.num_categories;
    let k_n = cfg.clusters_per_category;
    let all_queries: Vec<u64> = (0..cfg.num_queries as u64).collect();

    let mut out = Vec::with_capacity(cfg.num_users);
    for user in 0..cfg.num_users as u64 {
        let mut interests: Vec<usize> = Vec::with_capacity(cfg.interests_per_user);
        while interests.len() < cfg.interests_per_user.min(c_n * k_n) {
            let cl = rng.gen_range(0..c_n * k_n);
            if !interests.contains(&cl) {
                interests.push(cl);
            }
        }

        let mut t = BASE_EPOCH + rng.gen_range(0..START_SPREAD_SECS);
        let mut events = Vec::new();
        let mut current = rng.gen_range(0..interests.len());
        let sessions = rng.gen_range(cfg.sessions_min..=cfg.sessions_max);
        for s in 0..sessions {
            if s > 0 {
                if interests.len() > 1 && rng.gen_bool(cfg.interest_shift_prob) {
                    let shift = rng.gen_range(1..interests.len());
                    current = (current + shift) % interests.len();
                }
                let u: f64 = rng.gen();
                t += 1 + (-cfg.session_gap_mean * (1.0 - u).ln()) as u64;
            }
            let cluster = interests[current];
            let category = cluster / k_n;

            let pick_query = |rng: &mut ChaCha8Rng| -> u64 {
                let own = &catalog.cluster_queries[cluster];
                let same_cat = &catalog.category_queries[category];
                if !own.is_empty() && rng.gen_bool(cfg.query_cluster_prob) {
                    *own.choose(rng).unwrap()
                } else if !same_cat.is_empty() {
                    *same_cat.choose(rng).unwrap()
                } else {
                    *all_queries.choose(rng).unwrap()
                }
            };

            let mut query = pick_query(&mut rng);
            events.push(BehaviorEvent::query(
                query,
                t,
                CategorySet::single(catalog.query_category(query)),
            ));
            let clicks = rng.gen_range(1..=cfg.clicks_per_session_max);
            for _ in 0..clicks {
                t += rng.gen_range(5..120);
                let q_cluster = catalog.query_cluster(query);
                let q_cat = catalog.query_category(query) as usize;
                let item = if rng.gen_bool(cfg.intra_category_click_prob) {
                    // Stay with the user's cluster when the query names the
                    // same category, otherwise follow the query.
                    let target = if q_cat == category { cluster } else { q_cluster };
                    catalog.pick_item(target, &mut rng)
                } else {
                    let other = if c_n > 1 {
                        (q_cat + rng.gen_range(1..c_n)) % c_n
                    } else {
                        q_cat
                    };
                    let k = rng.gen_range(0..k_n);
                    catalog.pick_item(catalog.cluster_of_category(other, k), &mut rng)
                };
                if let Some(item) = item {
                    events.push(BehaviorEvent::click(
                        item,
                        t,
                        catalog.item_categories(item).clone(),
                    ));
                }
                if rng.gen_bool(cfg.refine_query_prob) {
                    t += rng.gen_range(5..60);
                    query = pick_query(&mut rng);
                    events.push(BehaviorEvent::query(
                        query,
                        t,
                        CategorySet::single(catalog.query_category(query)),
                    ));
                }
            }
        }
        out.push(BehaviorSequence::new(user, events));
    }
    Ok(out)
}

/// Train and held-out samples derived from a log.
#[derive(Debug, Clone, Default)]
pub struct LabeledSamples {
    /// Earlier clicks of every user, in global time order.
    pub train: Vec<TrainingSample>,
    /// The last click of every user.
    pub valid: Vec<TrainingSample>,
}

/// Turns each user's clicks into next-click impressions.
///
/// Each target click yields a positive sample and a negative sample whose
/// target is drawn uniformly from items sharing a category with the current
/// query. History is truncated to `seq_len_max`. Users with fewer than two
/// clicks are skipped.
pub fn generate_labeled_samples(cfg: &GenConfig, log: &[BehaviorSequence]) -> Result<LabeledSamples> {
    if log.is_empty() {
        return Err(Error::EmptyStream);
    }
    let catalog = Catalog::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5a5a);
    let limits = SeqLimits {
        l_click: cfg.seq_len_max,
        l_query: cfg.seq_len_max,
        include_current_query: false,
    };
    let norm = (1.0 + cfg.seq_len_max as f64).ln();

    let mut out = LabeledSamples::default();
    for seq in log {
        let clicks: Vec<usize> = seq
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Click)
            .map(|(i, _)| i)
            .collect();
        if clicks.len() < 2 {
            continue;
        }
        let last = clicks.len() - 1;
        let first_train = if cfg.train_targets_per_user == 0 {
            1
        } else {
            last.saturating_sub(cfg.train_targets_per_user).max(1)
        };
        for (n, &pos) in clicks.iter().enumerate().skip(first_train) {
            let history = &seq.events[..pos];
            let target = seq.events[pos].clone();
            let n_hist = clicks[..n].len().min(cfg.seq_len_max);
            let activity = vec![(1.0 + n_hist as f64).ln() / norm];
            let Some(positive) = assemble_sample(seq.user_id, history, target.clone(), 1, activity, limits) else {
                continue;
            };
            let Some(neg_item) = draw_negative(&catalog, &positive.current_query, target.entity_id, &mut rng) else {
                continue;
            };
            let mut negative = positive.clone();
            negative.label = 0;
            negative.target_item =
                BehaviorEvent::click(neg_item, target.timestamp, catalog.item_categories(neg_item).clone());
            let bucket = if n == last { &mut out.valid } else { &mut out.train };
            bucket.push(positive);
            bucket.push(negative);
        }
    }
    out.train.sort_by_key(|s| (s.target_item.timestamp, s.user_id, std::cmp::Reverse(s.label)));
    Ok(out)
}

fn draw_negative(catalog: &Catalog, query: &BehaviorEvent, positive: u64, rng: &mut impl Rng) -> Option<u64> {
    let candidates = catalog.items_sharing(&query.categories);
    if candidates.iter().all(|&i| i == positive) {
        return None;
    }
    loop {
        let item = *candidates.choose(rng)?;
        if item != positive {
            return Some(item);
        }
    }
}
