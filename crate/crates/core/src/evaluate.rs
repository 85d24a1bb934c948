//! Metrics, embedding analysis, ablations and the sum-pooling baseline.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ctr_net::{ctr_loss_from_logit, EginModel, MlpGrads, MlpOptimizer, MlpParams, TrainConfig, Trainer};
use crate::embed_learn::{apply_gradients, EmbeddingTable, SparseGrad, TableKind, TableOptimizer};
use crate::error::{Error, Result};
use crate::ingest::TrainingSample;
use crate::multi_interest::cosine_sim;

/// Area under the ROC curve from rank statistics, ties counted as one half.
///
/// Ranks are kept doubled so the Mann-Whitney numerator stays an integer;
/// the only floating-point operation is the final division.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let mid2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Relative AUC improvement above the 0.5 floor, in percent.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if auc_base.is_nan() || auc_base <= 0.5 {
        return Err(Error::UndefinedMetric(format!(
            "RelaImpr needs a baseline AUC above 0.5, got {auc_base}"
        )));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityReport {
    pub intra: f64,
    pub inter: f64,
    pub n_pairs: usize,
}

impl SimilarityReport {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

/// Mean cosine over `n_pairs` random same-category pairs and as many
/// cross-category pairs of distinct entities.
pub fn category_similarity_report(
    table: &EmbeddingTable,
    categories: &BTreeMap<u64, u32>,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<SimilarityReport> {
    let mut by_cat: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (&id, &c) in categories {
        by_cat.entry(c).or_default().push(id);
    }
    let rich: Vec<&Vec<u64>> = by_cat.values().filter(|v| v.len() >= 2).collect();
    if rich.len() < 2 {
        return Err(Error::InsufficientCategories(format!(
            "{} categories have at least two entities, need 2",
            rich.len()
        )));
    }
    if n_pairs == 0 {
        return Err(Error::config("n_pairs", "must be > 0"));
    }
    // Intra pairs: a uniform entity from a category with ≥2 members, then a
    // different member of its category.
    let pool: Vec<(u64, usize)> = rich
        .iter()
        .enumerate()
        .flat_map(|(ci, ids)| ids.iter().map(move |&id| (id, ci)))
        .collect();
    let cos = |a: u64, b: u64| cosine_sim(&table.vector(a), &table.vector(b));
    let mut intra = 0.0;
    for _ in 0..n_pairs {
        let &(a, ci) = pool.choose(rng).expect("pool is non-empty");
        let b = loop {
            let &b = rich[ci].choose(rng).expect("at least two members");
            if b != a {
                break b;
            }
        };
        intra += cos(a, b)?;
    }
    let all: Vec<(u64, u32)> = categories.iter().map(|(&id, &c)| (id, c)).collect();
    let mut inter = 0.0;
    for _ in 0..n_pairs {
        let &(a, ca) = all.choose(rng).expect("non-empty");
        let b = loop {
            let &(b, cb) = all.choose(rng).expect("non-empty");
            if cb != ca {
                break b;
            }
        };
        inter += cos(a, b)?;
    }
    Ok(SimilarityReport {
        intra: intra / n_pairs as f64,
        inter: inter / n_pairs as f64,
        n_pairs,
    })
}

/// One trained configuration compared in an ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoGraph,
    NoQuery,
    NoPosEmb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoGraph, Variant::NoQuery, Variant::NoPosEmb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "EGIN",
            Variant::NoGraph => "EGIN w/o graph",
            Variant::NoQuery => "EGIN w/o query",
            Variant::NoPosEmb => "EGIN w/o pos_emb",
        }
    }

    /// The base configuration with this variant's component removed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoGraph => {
                cfg.joint.alpha = 0.0;
                cfg.joint.beta = 0.0;
                cfg.joint.gamma = 0.0;
            }
            Variant::NoQuery => {
                cfg.edges.query_edges = false;
                cfg.features.use_query = false;
            }
            Variant::NoPosEmb => cfg.features.use_positions = false,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub auc: f64,
    /// `auc - full_auc`
    pub delta: f64,
}

/// AUC summary of one evaluated model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub relaimpr_vs: Option<(String, f64)>,
    pub ablations: Vec<AblationRow>,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let auc = auc(scores, labels)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(EvalReport {
            auc,
            n_pos,
            n_neg: labels.len() - n_pos,
            relaimpr_vs: None,
            ablations: Vec::new(),
        })
    }

    /// Adds RelaImpr against a named baseline AUC.
    pub fn with_baseline(mut self, name: &str, base_auc: f64) -> Result<Self> {
        self.relaimpr_vs = Some((name.to_string(), relaimpr(self.auc, base_auc)?));
        Ok(self)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auc={:.6}", self.auc)?;
        writeln!(f, "n_pos={}", self.n_pos)?;
        write!(f, "n_neg={}", self.n_neg)?;
        if let Some((name, r)) = &self.relaimpr_vs {
            write!(f, "\nrelaimpr_vs={name} relaimpr={r:.2}%")?;
        }
        if !self.ablations.is_empty() {
            write!(f, "\n{:<20} {:>8} {:>9}", "model", "auc", "delta")?;
            for row in &self.ablations {
                write!(f, "\n{:<20} {:>8.4} {:>+9.4}", row.name, row.auc, row.delta)?;
            }
        }
        Ok(())
    }
}

pub fn evaluate_model(model: &EginModel, samples: &[TrainingSample]) -> Result<EvalReport> {
    let scores = model.predict_all(samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_scores(&scores, &labels)
}

/// Trains `cfg` on `train` and scores `valid`.
pub fn train_and_evaluate(cfg: &TrainConfig, train: &[TrainingSample], valid: &[TrainingSample]) -> Result<(EginModel, EvalReport)> {
    let n_other = train.first().map_or(0, |s| s.other_features.len());
    let mut trainer = Trainer::new(cfg.clone(), n_other)?;
    trainer.fit(train, &[], &mut |_| {})?;
    let model = trainer.into_model();
    let report = evaluate_model(&model, valid)?;
    Ok((model, report))
}

/// Trains every variant with the same seed (in parallel) and reports the
/// AUC of each next to its difference from the full model.
pub fn run_ablations(base: &TrainConfig, train: &[TrainingSample], valid: &[TrainingSample]) -> Result<EvalReport> {
    let results: Vec<Result<(Variant, EvalReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| {
                let cfg = v.apply(base);
                scope.spawn(move || train_and_evaluate(&cfg, train, valid).map(|(_, r)| (v, r)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    let mut full = None;
    for r in results {
        let (v, report) = r?;
        if v == Variant::Full {
            full = Some(report.clone());
        }
        rows.push((v, report.auc));
    }
    let mut report = full.expect("full variant is always trained");
    let full_auc = report.auc;
    report.ablations = rows
        .into_iter()
        .map(|(v, auc)| AblationRow {
            name: v.name().to_string(),
            auc,
            delta: auc - full_auc,
        })
        .collect();
    Ok(report)
}

/// Reference CTR model: raw item embeddings sum-pooled over the clicks,
/// concatenated with the target and query embeddings and the other features.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnModel {
    pub items: EmbeddingTable,
    pub queries: EmbeddingTable,
    pub mlp: MlpParams,
}

impl DnnModel {
    pub fn new(dim: usize, n_other: usize, hidden: &[usize], seed: u64) -> Self {
        let salt = seed ^ 0x646e_6e00;
        DnnModel {
            items: EmbeddingTable::new(TableKind::Item, dim, salt),
            queries: EmbeddingTable::new(TableKind::Query, dim, salt),
            mlp: MlpParams::new(3 * dim + n_other, hidden, salt),
        }
    }

    /// Sum of the click embeddings; zero for an empty sequence.
    pub fn pooled(&self, sample: &TrainingSample) -> Vec<f64> {
        let mut pool = vec![0.0; self.items.dim()];
        for e in &sample.click_seq {
            for (p, v) in pool.iter_mut().zip(self.items.vector(e.entity_id).iter()) {
                *p += v;
            }
        }
        pool
    }

    pub fn input_vector(&self, sample: &TrainingSample) -> Vec<f64> {
        let mut x = self.pooled(sample);
        x.extend_from_slice(&self.items.vector(sample.target_item.entity_id));
        x.extend_from_slice(&self.queries.vector(sample.current_query.entity_id));
        x.extend_from_slice(&sample.other_features);
        x
    }

    pub fn predict(&self, sample: &TrainingSample) -> Result<f64> {
        self.mlp.predict(&self.input_vector(sample))
    }
}

/// Trains the sum-pooling baseline with the CTR optimizer, learning rate,
/// batch size and epochs of `cfg`, and scores `valid`.
pub fn dnn_pooling_baseline(
    train: &[TrainingSample],
    valid: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(DnnModel, EvalReport)> {
    if train.is_empty() {
        return Err(Error::EmptyStream);
    }
    cfg.validate()?;
    let dim = cfg.dim;
    let n_other = train[0].other_features.len();
    let mut model = DnnModel::new(dim, n_other, &cfg.hidden, cfg.seed);
    let mut mlp_opt = MlpOptimizer::new(cfg.ctr_optimizer, &model.mlp);
    let mut item_opt = TableOptimizer::new(cfg.ctr_optimizer);
    let mut query_opt = TableOptimizer::new(cfg.ctr_optimizer);
    let lr = cfg.joint.lr_ctr;
    for _ in 0..cfg.joint.epochs {
        for batch in train.chunks(cfg.joint.batch_size) {
            let n = batch.len() as f64;
            let mut g_mlp = MlpGrads::zeros_like(&model.mlp);
            let mut g_items = SparseGrad::default();
            let mut g_queries = SparseGrad::default();
            for s in batch {
                let trace = model.mlp.forward(&model.input_vector(s))?;
                let (loss, d_logit) = ctr_loss_from_logit(trace.logit, s.label);
                if !loss.is_finite() {
                    return Err(Error::Numeric("non-finite baseline loss".into()));
                }
                let dx = model.mlp.backward(&trace, d_logit / n, &mut g_mlp);
                for e in &s.click_seq {
                    g_items.add(e.entity_id, &dx[..dim], 1.0);
                }
                g_items.add(s.target_item.entity_id, &dx[dim..2 * dim], 1.0);
                g_queries.add(s.current_query.entity_id, &dx[2 * dim..3 * dim], 1.0);
            }
            apply_gradients(&mut model.items, &g_items, &mut item_opt, lr)?;
            apply_gradients(&mut model.queries, &g_queries, &mut query_opt, lr)?;
            mlp_opt.step(&mut model.mlp, &g_mlp, lr)?;
        }
    }
    let scores: Vec<f64> = valid.iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
    let labels: Vec<u8> = valid.iter().map(|s| s.label).collect();
    let report = EvalReport::from_scores(&scores, &labels)?;
    Ok((model, report))
}
