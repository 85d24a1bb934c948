//! Flat run configuration shared by every subcommand.
//!
//! A config file is TOML with one `key = value` per line and no tables.
//! Missing keys take their defaults, unknown keys are rejected, and
//! [`RunConfig::to_toml`] prints a file that reproduces the same run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctr_net::{JointLossConfig, TrainConfig};
use crate::datagen::GenConfig;
use crate::embed_learn::Optimizer;
use crate::error::{Error, Result};
use crate::graph_edges::EdgeConfig;
use crate::ingest::SeqLimits;
use crate::multi_interest::{BinningScheme, FeatureConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic data
    pub num_users: usize,
    pub num_items: usize,
    pub num_queries: usize,
    pub num_categories: usize,
    pub items_per_category: usize,
    pub session_gap_mean: f64,
    pub intra_category_click_prob: f64,
    pub seq_len_max: usize,
    pub clusters_per_category: usize,
    pub interests_per_user: usize,
    pub interest_shift_prob: f64,
    pub query_cluster_prob: f64,
    pub sessions_min: usize,
    pub sessions_max: usize,
    pub clicks_per_session_max: usize,
    pub refine_query_prob: f64,
    pub multi_category_prob: f64,
    pub train_targets_per_user: usize,

    // sequences
    pub l_click: usize,
    pub l_query: usize,
    pub include_current_query: bool,

    // graph edges
    pub window_size: usize,
    pub session_gap: u64,
    pub q2i_timespan: u64,
    pub seeds_mix_rate: f64,
    pub symmetric_q2i_time: bool,
    pub query_edges: bool,

    // graph embeddings
    pub dim: usize,
    pub n_neg: usize,
    pub queue_capacity: usize,
    /// Frequency threshold for queue subsampling; 0 disables it.
    pub subsample_threshold: f64,
    pub graph_optimizer: String,
    pub lr_graph: f64,

    // similarity features
    pub k: usize,
    pub num_bins: usize,
    pub use_positions: bool,
    pub use_query: bool,

    // CTR network and joint loss
    pub hidden: Vec<usize>,
    pub ctr_optimizer: String,
    pub lr_ctr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,

    // analysis
    pub n_pairs: usize,

    // paths; command-line flags take precedence
    pub log_path: String,
    pub train_path: String,
    pub valid_path: String,
    pub model_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        let e = EdgeConfig::default();
        let t = TrainConfig::default();
        let s = SeqLimits::default();
        RunConfig {
            seed: g.seed,
            num_users: g.num_users,
            num_items: g.num_items,
            num_queries: g.num_queries,
            num_categories: g.num_categories,
            items_per_category: g.items_per_category,
            session_gap_mean: g.session_gap_mean,
            intra_category_click_prob: g.intra_category_click_prob,
            seq_len_max: g.seq_len_max,
            clusters_per_category: g.clusters_per_category,
            interests_per_user: g.interests_per_user,
            interest_shift_prob: g.interest_shift_prob,
            query_cluster_prob: g.query_cluster_prob,
            sessions_min: g.sessions_min,
            sessions_max: g.sessions_max,
            clicks_per_session_max: g.clicks_per_session_max,
            refine_query_prob: g.refine_query_prob,
            multi_category_prob: g.multi_category_prob,
            train_targets_per_user: g.train_targets_per_user,
            l_click: s.l_click,
            l_query: s.l_query,
            include_current_query: s.include_current_query,
            window_size: e.window_size,
            session_gap: e.session_gap,
            q2i_timespan: e.q2i_timespan,
            seeds_mix_rate: e.seeds_mix_rate,
            symmetric_q2i_time: e.symmetric_q2i_time,
            query_edges: e.query_edges,
            dim: t.dim,
            n_neg: t.n_neg,
            queue_capacity: t.queue_capacity,
            subsample_threshold: 0.0,
            graph_optimizer: t.graph_optimizer.name().to_string(),
            lr_graph: t.joint.lr_graph,
            k: t.features.k,
            num_bins: t.features.scheme.num_bins,
            use_positions: t.features.use_positions,
            use_query: t.features.use_query,
            hidden: t.hidden.clone(),
            ctr_optimizer: t.ctr_optimizer.name().to_string(),
            lr_ctr: t.joint.lr_ctr,
            alpha: t.joint.alpha,
            beta: t.joint.beta,
            gamma: t.joint.gamma,
            batch_size: t.joint.batch_size,
            epochs: t.joint.epochs,
            eval_every: t.eval_every,
            n_pairs: 10_000,
            log_path: String::new(),
            train_path: String::new(),
            valid_path: String::new(),
            model_dir: String::new(),
        }
    }
}

fn line_of(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn known_keys() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize")
}

fn check_keys(table: &toml::Table) -> Result<()> {
    let known = known_keys();
    for key in table.keys() {
        if !known.contains_key(key) {
            return Err(Error::UnknownKey(key.clone()));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            line: line_of(text, &e),
            message: e.message().to_string(),
        })?;
        check_keys(&table)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            line: 0,
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The resolved config as a loadable file.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`; the value uses TOML syntax, and bare words are
    /// taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("override `{assignment}` is not key=value"),
            })?;
        let key = key.trim();
        let value = value.trim();
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            line: 0,
            message: format!("override `{key}`: {}", e.message()),
        })?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.train_config()?.validate()?;
        if self.l_click == 0 {
            return Err(Error::config("l_click", "must be > 0"));
        }
        if self.l_query == 0 {
            return Err(Error::config("l_query", "must be > 0"));
        }
        if self.subsample_threshold < 0.0 || !self.subsample_threshold.is_finite() {
            return Err(Error::config("subsample_threshold", "must be >= 0"));
        }
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs", "must be > 0"));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            num_users: self.num_users,
            num_items: self.num_items,
            num_queries: self.num_queries,
            num_categories: self.num_categories,
            items_per_category: self.items_per_category,
            session_gap_mean: self.session_gap_mean,
            intra_category_click_prob: self.intra_category_click_prob,
            seq_len_max: self.seq_len_max,
            seed: self.seed,
            clusters_per_category: self.clusters_per_category,
            interests_per_user: self.interests_per_user,
            interest_shift_prob: self.interest_shift_prob,
            query_cluster_prob: self.query_cluster_prob,
            sessions_min: self.sessions_min,
            sessions_max: self.sessions_max,
            clicks_per_session_max: self.clicks_per_session_max,
            refine_query_prob: self.refine_query_prob,
            multi_category_prob: self.multi_category_prob,
            train_targets_per_user: self.train_targets_per_user,
        }
    }

    pub fn seq_limits(&self) -> SeqLimits {
        SeqLimits {
            l_click: self.l_click,
            l_query: self.l_query,
            include_current_query: self.include_current_query,
        }
    }

    pub fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            window_size: self.window_size,
            session_gap: self.session_gap,
            q2i_timespan: self.q2i_timespan,
            seeds_mix_rate: self.seeds_mix_rate,
            symmetric_q2i_time: self.symmetric_q2i_time,
            query_edges: self.query_edges,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let opt = |field: &'static str, name: &str| {
            Optimizer::from_name(name).ok_or_else(|| Error::config(field, format!("unknown optimizer `{name}`")))
        };
        Ok(TrainConfig {
            joint: JointLossConfig {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                lr_ctr: self.lr_ctr,
                lr_graph: self.lr_graph,
                batch_size: self.batch_size,
                epochs: self.epochs,
            },
            edges: self.edge_config(),
            features: FeatureConfig {
                k: self.k,
                scheme: BinningScheme {
                    num_bins: self.num_bins,
                    max_seq_len: self.l_click.max(self.l_query),
                },
                use_positions: self.use_positions,
                use_query: self.use_query,
            },
            dim: self.dim,
            hidden: self.hidden.clone(),
            n_neg: self.n_neg,
            queue_capacity: self.queue_capacity,
            subsample_threshold: (self.subsample_threshold > 0.0).then_some(self.subsample_threshold),
            graph_optimizer: opt("graph_optimizer", &self.graph_optimizer)?,
            ctr_optimizer: opt("ctr_optimizer", &self.ctr_optimizer)?,
            eval_every: self.eval_every,
            seed: self.seed,
        })
    }
}
