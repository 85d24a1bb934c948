//! Graph-embedding CTR model over query and item behavior sequences.
//!
//! A user's clicks and queries feed two jointly trained parts:
//!
//! * graph embeddings for items and queries, learned from item-item,
//!   query-query and query-item co-occurrence edges built on the fly from
//!   each sample's sequences, with a sampled softmax against cross-batch
//!   negative queues;
//! * a CTR network whose inputs are binned top-k cosine similarities between
//!   the target (or current query) and the history, looked up in those
//!   embeddings.
//!
//! Module map: [`ingest`] and [`datagen`] produce samples, [`graph_edges`],
//! [`neg_sampling`] and [`embed_learn`] train embeddings, [`multi_interest`]
//! and [`ctr_net`] form the CTR model, [`evaluate`] scores it, and
//! [`config`] / [`model_io`] handle files.

pub mod config;
pub mod ctr_net;
pub mod datagen;
pub mod embed_learn;
pub mod error;
pub mod evaluate;
pub mod graph_edges;
pub mod ingest;
pub mod model_io;
pub mod multi_interest;
pub mod neg_sampling;

pub use config::RunConfig;
pub use ctr_net::{BatchMetrics, EginModel, JointLossConfig, MlpParams, TrainConfig, Trainer};
pub use datagen::{generate_labeled_samples, generate_log, Catalog, GenConfig, LabeledSamples};
pub use embed_learn::{EmbeddingTable, GraphTables, Optimizer, TableKind};
pub use error::{Error, Result};
pub use evaluate::{auc, relaimpr, EvalReport, SimilarityReport, Variant};
pub use graph_edges::{build_all_edges, Edge, EdgeConfig, EdgeKind, EntityType};
pub use ingest::{BehaviorEvent, BehaviorSequence, CategorySet, EventKind, SeqLimits, TrainingSample};
pub use multi_interest::{BinningScheme, CtrTables, FeatureConfig, SimFeature};
pub use neg_sampling::{NegQueue, NegQueues};
