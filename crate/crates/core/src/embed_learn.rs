//! Embedding tables and the sampled-softmax graph loss.
//!
//! For an edge with anchor `a`, positive `p` and negatives `n_1..n_m` the loss
//! is the softmax cross entropy of the positive logit `a·p` against the
//! negative logits `a·n_i`:
//!
//! ```text
//! L = -log( exp(a·p) / (exp(a·p) + Σ exp(a·n_i)) )
//! ```
//!
//! With `π_0` the softmax weight of the positive and `π_i` of each negative:
//! `∂L/∂a = (π_0 - 1)·p + Σ π_i·n_i`, `∂L/∂p = (π_0 - 1)·a`,
//! `∂L/∂n_i = π_i·a`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph_edges::{Edge, EdgeKind, EntityType};
use crate::neg_sampling::NegQueues;

/// Multiply-rotate hasher for integer ids. Ids are not attacker controlled,
/// and SipHash dominated the cost of table lookups in the graph loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdHasher(u64);

impl Hasher for IdHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_u64(&mut self, n: u64) {
        self.0 = (self.0.rotate_left(5) ^ n).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
}

/// `HashMap` keyed by ids.
pub type IdMap<V> = HashMap<u64, V, BuildHasherDefault<IdHasher>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableKind {
    Item,
    Query,
    Bin,
    Position,
}

impl TableKind {
    pub fn name(self) -> &'static str {
        match self {
            TableKind::Item => "item",
            TableKind::Query => "query",
            TableKind::Bin => "bin",
            TableKind::Position => "position",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "item" => Some(TableKind::Item),
            "query" => Some(TableKind::Query),
            "bin" => Some(TableKind::Bin),
            "position" => Some(TableKind::Position),
            _ => None,
        }
    }

    fn tag(self) -> u64 {
        match self {
            TableKind::Item => 0x1111_0000_0000_0001,
            TableKind::Query => 0x2222_0000_0000_0002,
            TableKind::Bin => 0x3333_0000_0000_0003,
            TableKind::Position => 0x4444_0000_0000_0004,
        }
    }
}

impl From<EntityType> for TableKind {
    fn from(t: EntityType) -> Self {
        match t {
            EntityType::Item => TableKind::Item,
            EntityType::Query => TableKind::Query,
        }
    }
}

/// Lazily initialized id → vector map.
///
/// The initial vector of an id depends only on `(seed, kind, id)`, so reads
/// of never-written ids are consistent whether or not they were stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    kind: TableKind,
    dim: usize,
    init_scale: f64,
    seed: u64,
    vectors: IdMap<Vec<f64>>,
}

impl EmbeddingTable {
    /// Uniform init in `[-0.5/dim, 0.5/dim]`.
    pub fn new(kind: TableKind, dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        EmbeddingTable {
            kind,
            dim,
            init_scale: 0.5 / dim as f64,
            seed,
            vectors: IdMap::default(),
        }
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    pub fn init_vector(&self, id: u64) -> Vec<f64> {
        let mix = self.seed ^ self.kind.tag() ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        if self.init_scale == 0.0 {
            return vec![0.0; self.dim];
        }
        (0..self.dim)
            .map(|_| rng.gen_range(-self.init_scale..=self.init_scale))
            .collect()
    }

    pub fn vector(&self, id: u64) -> Cow<'_, [f64]> {
        match self.vectors.get(&id) {
            Some(v) => Cow::Borrowed(v),
            None => Cow::Owned(self.init_vector(id)),
        }
    }

    /// Mutable access, materializing the initial vector on first use.
    pub fn vector_mut(&mut self, id: u64) -> &mut Vec<f64> {
        if !self.vectors.contains_key(&id) {
            let v = self.init_vector(id);
            self.vectors.insert(id, v);
        }
        self.vectors.get_mut(&id).expect("inserted above")
    }

    pub fn set(&mut self, id: u64, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "{} vector {id} has {} components, expected {}",
                self.kind.name(),
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{} vector {id} is not finite", self.kind.name())));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    /// Materializes `id` without changing its value.
    pub fn touch(&mut self, id: u64) {
        self.vector_mut(id);
    }

    pub fn contains(&self, id: u64) -> bool {
        self.vectors.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Stored ids in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.vectors.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Stored entries in ascending id order.
    pub fn entries(&self) -> Vec<(u64, &[f64])> {
        self.ids()
            .into_iter()
            .map(|id| (id, self.vectors[&id].as_slice()))
            .collect()
    }

    /// Multiplies every stored vector by `factor`.
    pub fn scale_all(&mut self, factor: f64) {
        for v in self.vectors.values_mut() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Sparse gradient for one table: id → accumulated gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub rows: IdMap<Vec<f64>>,
}

impl SparseGrad {
    pub fn add(&mut self, id: u64, g: &[f64], scale: f64) {
        let row = self.rows.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        for (r, x) in row.iter_mut().zip(g) {
            *r += scale * x;
        }
    }

    pub fn merge(&mut self, other: &SparseGrad, scale: f64) {
        for (&id, g) in &other.rows {
            self.add(id, g, scale);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }
}

/// Loss and exact gradients for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks shapes and finiteness, then returns the loss and the gradient
/// coefficient of the positive. `neg_weights` receives the softmax weight of
/// every negative.
fn edge_softmax(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], neg_weights: &mut Vec<f64>) -> Result<(f64, f64)> {
    let dim = anchor.len();
    if negatives.is_empty() {
        return Err(Error::Contract("at least one negative is required".into()));
    }
    if positive.len() != dim || negatives.iter().any(|n| n.len() != dim) {
        return Err(Error::Contract("edge vectors differ in dimension".into()));
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(anchor) || !finite(positive) || !negatives.iter().all(|n| finite(n)) {
        return Err(Error::Numeric("edge vector has a non-finite component".into()));
    }

    let pos_logit = dot(anchor, positive);
    neg_weights.clear();
    neg_weights.extend(negatives.iter().map(|n| dot(anchor, n)));
    let max = neg_weights.iter().copied().fold(pos_logit, f64::max);
    let pos_exp = (pos_logit - max).exp();
    for w in neg_weights.iter_mut() {
        *w = (*w - max).exp();
    }
    let neg_sum: f64 = neg_weights.iter().sum();
    let denom = pos_exp + neg_sum;
    // ln_1p keeps the loss strictly positive when the positive dominates.
    let loss = if max == pos_logit {
        neg_sum.ln_1p()
    } else {
        max - pos_logit + denom.ln()
    };
    for w in neg_weights.iter_mut() {
        *w /= denom;
    }
    Ok((loss, pos_exp / denom - 1.0))
}

/// Sampled-softmax loss of one edge with max-subtracted log-sum-exp.
pub fn softmax_edge_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<EdgeLoss> {
    let mut weights = Vec::with_capacity(negatives.len());
    let (loss, pos_coef) = edge_softmax(anchor, positive, negatives, &mut weights)?;
    let mut grad_anchor: Vec<f64> = positive.iter().map(|p| pos_coef * p).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (n, &w) in negatives.iter().zip(&weights) {
        for (g, x) in grad_anchor.iter_mut().zip(n.iter()) {
            *g += w * x;
        }
        grad_negatives.push(anchor.iter().map(|a| w * a).collect());
    }
    let grad_positive = anchor.iter().map(|a| pos_coef * a).collect();
    Ok(EdgeLoss {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// Item and query tables trained by the graph loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTables {
    pub item: EmbeddingTable,
    pub query: EmbeddingTable,
}

impl GraphTables {
    pub fn new(dim: usize, seed: u64) -> Self {
        GraphTables {
            item: EmbeddingTable::new(TableKind::Item, dim, seed),
            query: EmbeddingTable::new(TableKind::Query, dim, seed),
        }
    }

    pub fn get(&self, t: EntityType) -> &EmbeddingTable {
        match t {
            EntityType::Item => &self.item,
            EntityType::Query => &self.query,
        }
    }

    pub fn get_mut(&mut self, t: EntityType) -> &mut EmbeddingTable {
        match t {
            EntityType::Item => &mut self.item,
            EntityType::Query => &mut self.query,
        }
    }
}

/// Gradients of the item and query tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphGrads {
    pub item: SparseGrad,
    pub query: SparseGrad,
}

impl GraphGrads {
    pub fn get_mut(&mut self, t: EntityType) -> &mut SparseGrad {
        match t {
            EntityType::Item => &mut self.item,
            EntityType::Query => &mut self.query,
        }
    }

    pub fn get(&self, t: EntityType) -> &SparseGrad {
        match t {
            EntityType::Item => &self.item,
            EntityType::Query => &self.query,
        }
    }
}

/// Per-kind graph losses for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphLossTerms {
    /// Summed edge losses, indexed by [`EdgeKind::index`].
    pub sums: [f64; 3],
    pub counts: [usize; 3],
    /// Edges dropped because no negative could be drawn.
    pub skipped: usize,
}

impl GraphLossTerms {
    /// Mean loss over the edges of `kind`; zero when there are none.
    pub fn mean(&self, kind: EdgeKind) -> f64 {
        let i = kind.index();
        if self.counts[i] == 0 {
            0.0
        } else {
            self.sums[i] / self.counts[i] as f64
        }
    }
}

/// Losses and unscaled per-kind gradient sums of a batch of edges.
#[derive(Debug, Clone, Default)]
pub struct GraphBatch {
    pub terms: GraphLossTerms,
    /// Summed (not averaged) gradients per edge kind.
    pub grads: [GraphGrads; 3],
}

impl GraphBatch {
    /// Gradient of `Σ_k weight_k · mean_k`.
    pub fn weighted_grads(&self, weights: [f64; 3]) -> GraphGrads {
        let mut out = GraphGrads::default();
        for kind in EdgeKind::ALL {
            let i = kind.index();
            if self.terms.counts[i] == 0 || weights[i] == 0.0 {
                continue;
            }
            let scale = weights[i] / self.terms.counts[i] as f64;
            out.item.merge(&self.grads[i].item, scale);
            out.query.merge(&self.grads[i].query, scale);
        }
        out
    }
}

/// Sampled-softmax loss over a batch of edges.
///
/// Negatives come from the queue of the positive's type; the anchor (when of
/// the same type) and the positive are excluded. Edges whose queue yields no
/// negative are counted in `skipped` and left out of the means.
pub fn batch_graph_loss(
    edges: &[Edge],
    tables: &GraphTables,
    queues: &NegQueues,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<GraphBatch> {
    let mut batch = GraphBatch::default();
    let (mut weights, mut grad_anchor, mut grad_scratch) = (Vec::new(), Vec::new(), Vec::new());
    for edge in edges {
        let queue = queues.get(edge.positive_type);
        let both = [edge.positive_id, edge.anchor_id];
        let exclude = if edge.anchor_type == edge.positive_type {
            &both[..]
        } else {
            &both[..1]
        };
        let negatives = match queue.sample_negatives(n_neg, exclude, rng) {
            Ok(n) if !n.ids.is_empty() => n.ids,
            Ok(_) | Err(Error::NotWarmedUp) => {
                batch.terms.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let anchor = tables.get(edge.anchor_type).vector(edge.anchor_id);
        let positive = tables.get(edge.positive_type).vector(edge.positive_id);
        let neg_table = tables.get(edge.positive_type);
        let neg_vecs: Vec<Cow<'_, [f64]>> = negatives.iter().map(|&id| neg_table.vector(id)).collect();
        let neg_refs: Vec<&[f64]> = neg_vecs.iter().map(|v| v.as_ref()).collect();
        let (loss, pos_coef) = edge_softmax(&anchor, &positive, &neg_refs, &mut weights)?;

        // Same arithmetic as `softmax_edge_loss`, accumulated in place.
        grad_anchor.clear();
        grad_anchor.extend(positive.iter().map(|p| pos_coef * p));
        for (n, &w) in neg_refs.iter().zip(&weights) {
            for (g, x) in grad_anchor.iter_mut().zip(n.iter()) {
                *g += w * x;
            }
        }
        let k = edge.kind.index();
        batch.terms.sums[k] += loss;
        batch.terms.counts[k] += 1;
        let grads = &mut batch.grads[k];
        grads.get_mut(edge.anchor_type).add(edge.anchor_id, &grad_anchor, 1.0);
        grad_scratch.clear();
        grad_scratch.extend(anchor.iter().map(|a| pos_coef * a));
        let pos_grads = grads.get_mut(edge.positive_type);
        pos_grads.add(edge.positive_id, &grad_scratch, 1.0);
        for (&id, &w) in negatives.iter().zip(&weights) {
            pos_grads.add(id, &anchor, w);
        }
    }
    Ok(batch)
}

/// Update rule for embedding tables and dense parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Optimizer::Sgd),
            "adam" => Some(Optimizer::adam()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MomentSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl MomentSlot {
    /// Applies one step to `param` in place.
    pub(crate) fn step(&mut self, opt: Optimizer, param: &mut [f64], grad: &[f64], lr: f64) {
        match opt {
            Optimizer::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.m.len() != param.len() {
                    self.m = vec![0.0; param.len()];
                    self.v = vec![0.0; param.len()];
                }
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..param.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    param[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Per-row optimizer state for one embedding table.
#[derive(Debug, Clone)]
pub struct TableOptimizer {
    pub optimizer: Optimizer,
    slots: IdMap<MomentSlot>,
}

impl TableOptimizer {
    pub fn new(optimizer: Optimizer) -> Self {
        TableOptimizer {
            optimizer,
            slots: IdMap::default(),
        }
    }
}

/// Applies a sparse gradient to a table. Rows without a gradient are left
/// alone; `lr == 0` leaves the table bit-for-bit unchanged.
pub fn apply_gradients(
    table: &mut EmbeddingTable,
    grads: &SparseGrad,
    state: &mut TableOptimizer,
    lr: f64,
) -> Result<()> {
    let mut ids: Vec<u64> = grads.rows.keys().copied().collect();
    ids.sort_unstable();
    for &id in &ids {
        let g = &grads.rows[&id];
        if g.len() != table.dim() {
            return Err(Error::Contract(format!(
                "gradient for {} {id} has {} components, expected {}",
                table.kind().name(),
                g.len(),
                table.dim()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {} {id}", table.kind().name())));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for id in ids {
        let g = &grads.rows[&id];
        let slot = state.slots.entry(id).or_default();
        slot.step(state.optimizer, table.vector_mut(id), g, lr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{BehaviorEvent, CategorySet};
    use crate::graph_edges::{build_i2i_edges, EdgeConfig};

    fn rand_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    /// Reference loss with no stabilization, straight from the definition.
    fn naive_loss(a: &[f64], p: &[f64], negs: &[Vec<f64>]) -> f64 {
        let num = dot(a, p).exp();
        let den = num + negs.iter().map(|n| dot(a, n).exp()).sum::<f64>();
        -(num / den).ln()
    }

    #[test]
    fn uniform_logits_give_log_of_count() {
        let a = vec![0.3, -0.2, 0.1];
        let p = vec![1.0, 1.0, 1.0];
        let negs: Vec<&[f64]> = vec![&p[..]; 100];
        let el = softmax_edge_loss(&a, &p, &negs).unwrap();
        assert!((el.loss - 101f64.ln()).abs() < 1e-12);
        assert!((el.loss - 4.61512).abs() < 1e-5);
    }

    #[test]
    fn zero_anchor() {
        let a = vec![0.0; 4];
        let p = vec![0.5, -1.0, 2.0, 0.0];
        let n1 = vec![1.0, 0.0, 0.0, 0.0];
        let n2 = vec![0.0, 1.0, 1.0, -1.0];
        let el = softmax_edge_loss(&a, &p, &[&n1, &n2]).unwrap();
        assert!((el.loss - 3f64.ln()).abs() < 1e-12);
        // All weights are 1/3: grad_a = (1/3 - 1) p + (n1 + n2) / 3.
        for i in 0..4 {
            let expected = (1.0 / 3.0 - 1.0) * p[i] + (n1[i] + n2[i]) / 3.0;
            assert!((el.grad_anchor[i] - expected).abs() < 1e-12);
        }
        assert!(el.grad_positive.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_naive_definition_and_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 10, 1.0);
        let p = rand_vec(&mut rng, 10, 1.0);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 10, 1.0)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let el = softmax_edge_loss(&a, &p, &refs).unwrap();
        assert!((el.loss - naive_loss(&a, &p, &negs)).abs() < 1e-12);
        assert!(el.loss > 0.0);

        // Huge logits would overflow a naive exp.
        let big: Vec<f64> = a.iter().map(|x| x * 200.0).collect();
        let el = softmax_edge_loss(&big, &p, &refs).unwrap();
        assert!(el.loss.is_finite());
    }

    #[test]
    fn loss_vanishes_with_a_large_margin() {
        let a = vec![10.0, 0.0];
        let p = vec![10.0, 0.0];
        let n = vec![-10.0, 0.0];
        let el = softmax_edge_loss(&a, &p, &[&n]).unwrap();
        assert!(el.loss < 1e-40);
        assert!(el.loss > 0.0);
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-4;
        for _ in 0..20 {
            let a = rand_vec(&mut rng, 10, 1.0);
            let p = rand_vec(&mut rng, 10, 1.0);
            let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 10, 1.0)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
            let el = softmax_edge_loss(&a, &p, &refs).unwrap();
            for i in 0..10 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[i] += h;
                am[i] -= h;
                let fd = (naive_loss(&ap, &p, &negs) - naive_loss(&am, &p, &negs)) / (2.0 * h);
                assert!((fd - el.grad_anchor[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(softmax_edge_loss(&[1.0], &[1.0], &[]), Err(Error::Contract(_))));
        assert!(matches!(softmax_edge_loss(&[1.0], &[1.0, 2.0], &[&[1.0]]), Err(Error::Contract(_))));
        assert!(matches!(
            softmax_edge_loss(&[f64::NAN], &[1.0], &[&[1.0]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn lazy_init_is_deterministic_and_bounded() {
        let t1 = EmbeddingTable::new(TableKind::Item, 10, 5);
        let mut t2 = EmbeddingTable::new(TableKind::Item, 10, 5);
        t2.touch(3);
        t2.touch(1);
        assert_eq!(t1.vector(1).as_ref(), t2.vector(1).as_ref());
        assert_eq!(t1.vector(3).as_ref(), t2.vector(3).as_ref());
        assert!(t1.init_vector(7).iter().all(|x| x.abs() <= 0.05));
        let q = EmbeddingTable::new(TableKind::Query, 10, 5);
        assert_ne!(t1.init_vector(1), q.init_vector(1));
    }

    fn queues_with(items: &[u64], queries: &[u64]) -> NegQueues {
        let mut q = NegQueues::new(1000, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &i in items {
            q.push(EntityType::Item, i, &mut rng).unwrap();
        }
        for &i in queries {
            q.push(EntityType::Query, i, &mut rng).unwrap();
        }
        q
    }

    #[test]
    fn empty_edges_give_zero_terms() {
        let tables = GraphTables::new(4, 1);
        let queues = queues_with(&[1, 2], &[]);
        let b = batch_graph_loss(&[], &tables, &queues, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.terms, GraphLossTerms::default());
        assert!(b.grads.iter().all(|g| g.item.is_empty() && g.query.is_empty()));
    }

    #[test]
    fn item_edges_only_touch_i2i_terms() {
        let tables = GraphTables::new(4, 1);
        let queues = queues_with(&[1, 2, 3, 4, 5], &[]);
        let clicks: Vec<_> = (1..=4)
            .map(|i| BehaviorEvent::click(i, i, CategorySet::single(0)))
            .collect();
        let cfg = EdgeConfig {
            seeds_mix_rate: 0.0,
            ..EdgeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let edges = build_i2i_edges(&clicks, &[], &cfg, &mut rng);
        let b = batch_graph_loss(&edges, &tables, &queues, 5, &mut rng).unwrap();
        assert!(b.terms.mean(EdgeKind::I2I) > 0.0);
        assert_eq!(b.terms.mean(EdgeKind::Q2Q), 0.0);
        assert_eq!(b.terms.mean(EdgeKind::Q2I), 0.0);
    }

    #[test]
    fn cold_query_queue_skips_edges() {
        let tables = GraphTables::new(4, 1);
        let queues = queues_with(&[1, 2, 3], &[]);
        let edge = Edge {
            kind: EdgeKind::Q2Q,
            anchor_type: EntityType::Query,
            anchor_id: 1,
            positive_type: EntityType::Query,
            positive_id: 2,
        };
        let b = batch_graph_loss(&[edge], &tables, &queues, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.terms.skipped, 1);
        assert_eq!(b.terms.counts, [0, 0, 0]);
    }

    #[test]
    fn batch_equals_sum_of_single_edges() {
        let tables = GraphTables::new(6, 9);
        let queues = queues_with(&[1, 2, 3, 4, 5, 6, 7, 8], &[10, 11, 12]);
        let edges = [
            Edge {
                kind: EdgeKind::I2I,
                anchor_type: EntityType::Item,
                anchor_id: 1,
                positive_type: EntityType::Item,
                positive_id: 2,
            },
            Edge {
                kind: EdgeKind::Q2I,
                anchor_type: EntityType::Query,
                anchor_id: 10,
                positive_type: EntityType::Item,
                positive_id: 1,
            },
        ];
        let b = batch_graph_loss(&edges, &tables, &queues, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

        // Replay the same negative draws and sum two independent edge losses.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total_loss = [0.0; 3];
        let mut item_grad = SparseGrad::default();
        let mut query_grad = SparseGrad::default();
        for e in &edges {
            let excl: Vec<u64> = if e.anchor_type == e.positive_type {
                vec![e.anchor_id, e.positive_id]
            } else {
                vec![e.positive_id]
            };
            let negs = queues.item.sample_negatives(4, &excl, &mut rng).unwrap().ids;
            let a = tables.get(e.anchor_type).vector(e.anchor_id).into_owned();
            let p = tables.item.vector(e.positive_id).into_owned();
            let nv: Vec<Vec<f64>> = negs.iter().map(|&n| tables.item.vector(n).into_owned()).collect();
            let refs: Vec<&[f64]> = nv.iter().map(|v| v.as_slice()).collect();
            let el = softmax_edge_loss(&a, &p, &refs).unwrap();
            total_loss[e.kind.index()] += el.loss;
            match e.anchor_type {
                EntityType::Item => item_grad.add(e.anchor_id, &el.grad_anchor, 1.0),
                EntityType::Query => query_grad.add(e.anchor_id, &el.grad_anchor, 1.0),
            }
            item_grad.add(e.positive_id, &el.grad_positive, 1.0);
            for (n, g) in negs.iter().zip(&el.grad_negatives) {
                item_grad.add(*n, g, 1.0);
            }
        }
        assert_eq!(b.terms.sums, total_loss);
        let combined = b.weighted_grads([1.0, 1.0, 1.0]);
        for (id, g) in &item_grad.rows {
            let got = combined.item.get(*id).unwrap();
            for (x, y) in got.iter().zip(g) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert_eq!(combined.query.get(10).unwrap(), query_grad.get(10).unwrap());
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut t = EmbeddingTable::new(TableKind::Item, 3, 1);
        let before = t.vector(7).into_owned();
        let untouched = t.vector(8).into_owned();
        let mut g = SparseGrad::default();
        g.add(7, &[1.0, -2.0, 0.5], 1.0);
        let mut st = TableOptimizer::new(Optimizer::Sgd);
        apply_gradients(&mut t, &g, &mut st, 0.1).unwrap();
        let after = t.vector(7);
        for i in 0..3 {
            assert_eq!(after[i], before[i] - 0.1 * g.rows[&7][i]);
        }
        assert_eq!(t.vector(8).as_ref(), untouched.as_slice());
        assert!(!t.contains(8));
    }

    #[test]
    fn zero_gradient_and_zero_lr_change_nothing() {
        let mut t = EmbeddingTable::new(TableKind::Item, 3, 1);
        t.touch(7);
        let before = t.clone();
        let mut g = SparseGrad::default();
        g.add(7, &[0.0, 0.0, 0.0], 1.0);
        apply_gradients(&mut t, &g, &mut TableOptimizer::new(Optimizer::Sgd), 0.1).unwrap();
        assert_eq!(t, before);
        let mut g = SparseGrad::default();
        g.add(7, &[1.0, -1.0, 3.0], 1.0);
        apply_gradients(&mut t, &g, &mut TableOptimizer::new(Optimizer::Sgd), 0.0).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn sgd_is_linear_in_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = rand_vec(&mut rng, 4, 1.0);
        let g2 = rand_vec(&mut rng, 4, 1.0);
        let mut seq = EmbeddingTable::new(TableKind::Item, 4, 2);
        let mut once = seq.clone();
        let mut st = TableOptimizer::new(Optimizer::Sgd);
        for g in [&g1, &g2] {
            let mut sg = SparseGrad::default();
            sg.add(1, g, 1.0);
            apply_gradients(&mut seq, &sg, &mut st, 0.05).unwrap();
        }
        let mut sum = SparseGrad::default();
        sum.add(1, &g1, 1.0);
        sum.add(1, &g2, 1.0);
        apply_gradients(&mut once, &sum, &mut TableOptimizer::new(Optimizer::Sgd), 0.05).unwrap();
        for (a, b) in seq.vector(1).iter().zip(once.vector(1).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_id() {
        let mut t = EmbeddingTable::new(TableKind::Item, 2, 1);
        let mut g = SparseGrad::default();
        g.add(42, &[f64::INFINITY, 0.0], 1.0);
        match apply_gradients(&mut t, &g, &mut TableOptimizer::new(Optimizer::Sgd), 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("42")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut t = EmbeddingTable::new(TableKind::Item, 2, 1);
        let before = t.vector(0).into_owned();
        let mut g = SparseGrad::default();
        g.add(0, &[1.0, -1.0], 1.0);
        apply_gradients(&mut t, &g, &mut TableOptimizer::new(Optimizer::adam()), 0.01).unwrap();
        let after = t.vector(0);
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-6);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-6);
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn co_occurring_items_grow_similar() {
        // Items 1 and 2 always co-occur; item 3 only appears as a negative.
        let mut tables = GraphTables::new(10, 17);
        let queues = queues_with(&[1, 2, 3, 3, 3], &[]);
        let mut st = TableOptimizer::new(Optimizer::Sgd);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = Edge {
            kind: EdgeKind::I2I,
            anchor_type: EntityType::Item,
            anchor_id: 1,
            positive_type: EntityType::Item,
            positive_id: 2,
        };
        let mirror = Edge {
            anchor_id: 2,
            positive_id: 1,
            ..pair
        };
        for _ in 0..200 {
            let b = batch_graph_loss(&[pair, mirror], &tables, &queues, 5, &mut rng).unwrap();
            let g = b.weighted_grads([1.0, 1.0, 1.0]);
            apply_gradients(&mut tables.item, &g.item, &mut st, 0.05).unwrap();
        }
        let v = |i| tables.item.vector(i).into_owned();
        assert!(cosine(&v(1), &v(2)) > cosine(&v(1), &v(3)));
        assert!(cosine(&v(1), &v(2)) > cosine(&v(2), &v(3)));
    }
}
