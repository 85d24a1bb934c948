//! CTR head, joint objective and the training loop.
//!
//! The network is a plain MLP over `concat(f_i2i, f_q2q, f_q2i, other)` with
//! rectifier hidden layers and a sigmoid output. Training minimizes
//!
//! ```text
//! L = L_ctr + alpha · l_i2i + beta · l_q2q + gamma · l_q2i
//! ```
//!
//! where each graph term is the mean sampled-softmax loss over that batch's
//! edges of the kind. The graph tables only receive gradients from the graph
//! terms; the CTR loss reaches the MLP and the bin/position tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed_learn::{
    apply_gradients, batch_graph_loss, GraphTables, MomentSlot, Optimizer, SparseGrad, TableOptimizer,
};
use crate::error::{Error, Result};
use crate::evaluate::auc;
use crate::graph_edges::{build_all_edges, EdgeConfig, EdgeKind, EntityType};
use crate::ingest::TrainingSample;
use crate::multi_interest::{build_features, CtrTables, FeatureConfig};
use crate::neg_sampling::NegQueues;

/// Smallest distance of a reported probability from 0 and 1.
const PROB_EPS: f64 = 1e-15;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross entropy of a probability and its derivative with respect to it.
pub fn ctr_loss(pctr: f64, label: u8) -> Result<(f64, f64)> {
    if !(pctr > 0.0 && pctr < 1.0) {
        return Err(Error::Numeric(format!("pctr {pctr} is outside (0, 1)")));
    }
    match label {
        1 => Ok((-pctr.ln(), -1.0 / pctr)),
        0 => Ok((-(1.0 - pctr).ln(), 1.0 / (1.0 - pctr))),
        _ => Err(Error::Contract(format!("label {label} is not 0 or 1"))),
    }
}

/// Cross entropy evaluated from the logit, and its derivative `sigmoid(z) - y`.
pub fn ctr_loss_from_logit(z: f64, label: u8) -> (f64, f64) {
    let y = f64::from(label);
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    (softplus - y * z, sigmoid(z) - y)
}

/// One fully connected layer; `weights` is row-major `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input of every layer; `inputs[0]` is the feature vector.
    inputs: Vec<Vec<f64>>,
    pub logit: f64,
    pub pctr: f64,
}

impl MlpParams {
    /// Uniform init in `±1/sqrt(fan_in)`; biases start at zero.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_7000);
        let mut params = Self::zeros(input_dim, hidden);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        params
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    /// `[input, hidden..., 1]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.n_out));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "feature vector has {} entries, the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        let logit = h[0];
        Ok(MlpTrace {
            inputs,
            logit,
            pctr: sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.pctr)
    }

    /// Adds `d_logit`-scaled parameter gradients into `grads` and returns the
    /// gradient with respect to the input features.
    pub fn backward(&self, trace: &MlpTrace, d_logit: f64, grads: &mut MlpGrads) -> Vec<f64> {
        let mut delta = vec![d_logit];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            let mut d_in = vec![0.0; layer.n_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (acc, w) in d_in.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            if i > 0 {
                // The input of layer i is the rectified output of layer i-1.
                for (d, x) in d_in.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        delta
    }
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            layers: p.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}

/// Optimizer state for the dense MLP parameters.
#[derive(Debug, Clone)]
pub struct MlpOptimizer {
    optimizer: Optimizer,
    slots: Vec<(MomentSlot, MomentSlot)>,
}

impl MlpOptimizer {
    pub fn new(optimizer: Optimizer, params: &MlpParams) -> Self {
        MlpOptimizer {
            optimizer,
            slots: vec![Default::default(); params.layers.len()],
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite MLP gradient".into()));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for ((layer, g), (sw, sb)) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.slots) {
            sw.step(self.optimizer, &mut layer.weights, &g.weights, lr);
            sb.step(self.optimizer, &mut layer.bias, &g.bias, lr);
        }
        Ok(())
    }
}

/// Everything needed to score a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EginModel {
    pub graph: GraphTables,
    pub ctr: CtrTables,
    pub mlp: MlpParams,
    pub features: FeatureConfig,
}

/// Mean CTR loss of a batch and its gradients.
#[derive(Debug, Clone)]
pub struct CtrGrads {
    pub loss: f64,
    pub mlp: MlpGrads,
    pub bin: SparseGrad,
    pub position: SparseGrad,
}

impl EginModel {
    pub fn new(dim: usize, n_other: usize, hidden: &[usize], features: FeatureConfig, seed: u64) -> Self {
        let input_dim = 3 * features.k * dim + n_other;
        EginModel {
            graph: GraphTables::new(dim, seed),
            ctr: CtrTables::new(dim, seed),
            mlp: MlpParams::new(input_dim, hidden, seed),
            features,
        }
    }

    pub fn dim(&self) -> usize {
        self.ctr.bin.dim()
    }

    pub fn input_vector(&self, sample: &TrainingSample) -> Vec<f64> {
        build_features(sample, &self.graph, &self.ctr, &self.features).concat(&sample.other_features)
    }

    pub fn predict(&self, sample: &TrainingSample) -> Result<f64> {
        self.mlp.predict(&self.input_vector(sample))
    }

    pub fn predict_all(&self, samples: &[TrainingSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.predict(s)).collect()
    }

    /// Mean cross entropy over `samples` and its exact gradients.
    pub fn ctr_gradients(&self, samples: &[TrainingSample]) -> Result<CtrGrads> {
        let n = samples.len().max(1) as f64;
        let dim = self.dim();
        let k = self.features.k;
        let mut out = CtrGrads {
            loss: 0.0,
            mlp: MlpGrads::zeros_like(&self.mlp),
            bin: SparseGrad::default(),
            position: SparseGrad::default(),
        };
        for s in samples {
            let feats = build_features(s, &self.graph, &self.ctr, &self.features);
            let x = feats.concat(&s.other_features);
            let trace = self.mlp.forward(&x)?;
            let (loss, d_logit) = ctr_loss_from_logit(trace.logit, s.label);
            out.loss += loss / n;
            let dx = self.mlp.backward(&trace, d_logit / n, &mut out.mlp);
            for (part, d) in feats.parts().into_iter().zip(dx.chunks(k * dim)) {
                part.scatter_grad(d, dim, self.features.use_positions, &mut out.bin, &mut out.position);
            }
        }
        Ok(out)
    }
}

/// Weights of the joint objective plus step sizes and batching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_ctr: f64,
    pub lr_graph: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lr_ctr: 0.001,
            lr_graph: 0.01,
            batch_size: 32,
            epochs: 1,
        }
    }
}

impl JointLossConfig {
    pub fn weights(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        for (name, lr) in [("lr_ctr", self.lr_ctr), ("lr_graph", self.lr_graph)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be > 0"));
        }
        Ok(())
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub joint: JointLossConfig,
    pub edges: EdgeConfig,
    pub features: FeatureConfig,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub n_neg: usize,
    pub queue_capacity: usize,
    pub subsample_threshold: Option<f64>,
    pub graph_optimizer: Optimizer,
    pub ctr_optimizer: Optimizer,
    /// Validation AUC every this many batches; 0 only evaluates at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            joint: JointLossConfig::default(),
            edges: EdgeConfig::default(),
            features: FeatureConfig::default(),
            dim: 10,
            hidden: vec![64, 32],
            n_neg: 100,
            queue_capacity: 10_000,
            subsample_threshold: None,
            graph_optimizer: Optimizer::adam(),
            ctr_optimizer: Optimizer::adam(),
            eval_every: 0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.joint.validate()?;
        self.edges.validate()?;
        if self.dim == 0 {
            return Err(Error::config("dim", "must be > 0"));
        }
        if self.features.k == 0 {
            return Err(Error::config("k", "must be > 0"));
        }
        if self.features.scheme.num_bins == 0 {
            return Err(Error::config("num_bins", "must be > 0"));
        }
        if self.n_neg == 0 {
            return Err(Error::config("n_neg", "must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be > 0"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("queue_capacity", "must be > 0"));
        }
        Ok(())
    }

    /// The graph side is inactive when every graph weight is zero.
    pub fn graph_enabled(&self) -> bool {
        self.joint.weights().iter().any(|&w| w > 0.0)
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics {
    pub step: usize,
    pub l_ctr: f64,
    pub l_i2i: f64,
    pub l_q2q: f64,
    pub l_q2i: f64,
    pub total: f64,
    pub skipped_edges: usize,
}

impl BatchMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "step={} l_ctr={:.9} l_i2i={:.9} l_q2q={:.9} l_q2i={:.9} total={:.9}",
            self.step, self.l_ctr, self.l_i2i, self.l_q2q, self.l_q2i, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub metrics: Vec<BatchMetrics>,
    pub valid_auc: Option<f64>,
}

/// Single-writer training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: EginModel,
    queues: NegQueues,
    item_opt: TableOptimizer,
    query_opt: TableOptimizer,
    bin_opt: TableOptimizer,
    pos_opt: TableOptimizer,
    mlp_opt: MlpOptimizer,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_other: usize) -> Result<Self> {
        cfg.validate()?;
        let model = EginModel::new(cfg.dim, n_other, &cfg.hidden, cfg.features, cfg.seed);
        let mlp_opt = MlpOptimizer::new(cfg.ctr_optimizer, &model.mlp);
        Ok(Trainer {
            queues: NegQueues::new(cfg.queue_capacity, cfg.subsample_threshold)?,
            item_opt: TableOptimizer::new(cfg.graph_optimizer),
            query_opt: TableOptimizer::new(cfg.graph_optimizer),
            bin_opt: TableOptimizer::new(cfg.ctr_optimizer),
            pos_opt: TableOptimizer::new(cfg.ctr_optimizer),
            mlp_opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00),
            model,
            cfg,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &EginModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut EginModel {
        &mut self.model
    }

    pub fn into_model(self) -> EginModel {
        self.model
    }

    pub fn queues(&self) -> &NegQueues {
        &self.queues
    }

    /// Restarts the sampling stream; used to replay identical draws.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// One update on `batch`: fill queues, graph loss, CTR loss, apply.
    pub fn train_batch(&mut self, batch: &[TrainingSample]) -> Result<BatchMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyStream);
        }
        self.step += 1;
        let weights = self.cfg.joint.weights();

        let mut graph_terms = [0.0; 3];
        let mut skipped = 0;
        let mut graph_grads = None;
        if self.cfg.graph_enabled() {
            for s in batch {
                for e in &s.click_seq {
                    self.queues.push(EntityType::Item, e.entity_id, &mut self.rng)?;
                }
                if self.cfg.edges.query_edges {
                    for e in &s.query_seq {
                        self.queues.push(EntityType::Query, e.entity_id, &mut self.rng)?;
                    }
                    self.queues
                        .push(EntityType::Query, s.current_query.entity_id, &mut self.rng)?;
                }
            }
            let mut edges = Vec::new();
            for s in batch {
                edges.extend(build_all_edges(s, &self.cfg.edges, &mut self.rng));
            }
            let gb = batch_graph_loss(&edges, &self.model.graph, &self.queues, self.cfg.n_neg, &mut self.rng)?;
            for kind in EdgeKind::ALL {
                graph_terms[kind.index()] = gb.terms.mean(kind);
            }
            skipped = gb.terms.skipped;
            graph_grads = Some(gb.weighted_grads(weights));
        }

        let ctr = self.model.ctr_gradients(batch)?;
        let total = ctr.loss + weights.iter().zip(&graph_terms).map(|(w, l)| w * l).sum::<f64>();
        let metrics = BatchMetrics {
            step: self.step,
            l_ctr: ctr.loss,
            l_i2i: graph_terms[0],
            l_q2q: graph_terms[1],
            l_q2i: graph_terms[2],
            total,
            skipped_edges: skipped,
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: self.step,
                detail: metrics.log_line(),
            });
        }

        let lr_graph = self.cfg.joint.lr_graph;
        if let Some(g) = graph_grads {
            apply_gradients(&mut self.model.graph.item, &g.item, &mut self.item_opt, lr_graph)?;
            apply_gradients(&mut self.model.graph.query, &g.query, &mut self.query_opt, lr_graph)?;
        }
        let lr = self.cfg.joint.lr_ctr;
        apply_gradients(&mut self.model.ctr.bin, &ctr.bin, &mut self.bin_opt, lr)?;
        if self.cfg.features.use_positions {
            apply_gradients(&mut self.model.ctr.position, &ctr.position, &mut self.pos_opt, lr)?;
        }
        self.mlp_opt.step(&mut self.model.mlp, &ctr.mlp, lr)?;
        Ok(metrics)
    }

    /// Streams `train` in order for the configured epochs. `log` receives one
    /// line per batch and one per validation pass.
    pub fn fit(
        &mut self,
        train: &[TrainingSample],
        valid: &[TrainingSample],
        log: &mut dyn FnMut(&str),
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::EmptyStream);
        }
        let mut metrics = Vec::new();
        for _ in 0..self.cfg.joint.epochs {
            for batch in train.chunks(self.cfg.joint.batch_size) {
                let m = self.train_batch(batch)?;
                log(&m.log_line());
                metrics.push(m);
                if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) && !valid.is_empty() {
                    if let Ok(a) = self.valid_auc(valid) {
                        log(&format!("step={} valid_auc={a:.6}", self.step));
                    }
                }
            }
        }
        let valid_auc = if valid.is_empty() {
            None
        } else {
            let a = self.valid_auc(valid)?;
            log(&format!("step={} valid_auc={a:.6}", self.step));
            Some(a)
        };
        Ok(TrainSummary {
            steps: self.step,
            metrics,
            valid_auc,
        })
    }

    fn valid_auc(&self, valid: &[TrainingSample]) -> Result<f64> {
        let scores = self.model.predict_all(valid)?;
        let labels: Vec<u8> = valid.iter().map(|s| s.label).collect();
        auc(&scores, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{BehaviorEvent, CategorySet};

    fn rand_sample(rng: &mut ChaCha8Rng, n_items: u64, n_queries: u64) -> TrainingSample {
        let mut ts = 0;
        let mut click_seq = Vec::new();
        let mut query_seq = Vec::new();
        for _ in 0..rng.gen_range(0..12) {
            ts += rng.gen_range(1..900);
            let cat = CategorySet::single(rng.gen_range(0..3));
            if rng.gen_bool(0.3) {
                query_seq.push(BehaviorEvent::query(rng.gen_range(0..n_queries), ts, cat));
            } else {
                click_seq.push(BehaviorEvent::click(rng.gen_range(0..n_items), ts, cat));
            }
        }
        ts += 10;
        TrainingSample {
            user_id: 0,
            target_item: BehaviorEvent::click(rng.gen_range(0..n_items), ts + 1, CategorySet::single(0)),
            current_query: BehaviorEvent::query(rng.gen_range(0..n_queries), ts, CategorySet::single(0)),
            click_seq,
            query_seq,
            seeds_seq: Vec::new(),
            other_features: vec![rng.gen_range(0.0..1.0)],
            label: rng.gen_range(0..2),
        }
    }

    #[test]
    fn loss_identities() {
        let (l, d) = ctr_loss(0.5, 1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((d + 2.0).abs() < 1e-12);
        assert!((ctr_loss(0.9, 0).unwrap().0 - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(ctr_loss(1.0, 1).is_err());
        assert!(ctr_loss(0.5, 2).is_err());
        let (l, d) = ctr_loss_from_logit(0.0, 1);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(d, -0.5);
        assert!(ctr_loss_from_logit(800.0, 0).0.is_finite());
    }

    #[test]
    fn ctr_loss_gradient_matches_finite_difference() {
        for &(p, y) in &[(0.3, 1u8), (0.8, 0), (0.55, 1)] {
            let h = 1e-6;
            let fd = (ctr_loss(p + h, y).unwrap().0 - ctr_loss(p - h, y).unwrap().0) / (2.0 * h);
            let d = ctr_loss(p, y).unwrap().1;
            assert!((fd - d).abs() <= 1e-6 * d.abs());
        }
    }

    #[test]
    fn zero_network_outputs_half() {
        let p = MlpParams::zeros(5, &[4, 3]);
        assert_eq!(p.predict(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), 0.5);
        let mut p = p;
        p.layers.last_mut().unwrap().bias[0] = 10.0;
        assert!((p.predict(&[0.0; 5]).unwrap() - 0.9999546021312976).abs() < 1e-12);
        assert!(p.predict(&[0.0; 4]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let p = MlpParams::new(6, &[8, 4], 3);
        let x = [0.1, -0.3, 2.0, 0.0, 1.5, -1.0];
        let a = p.predict(&x).unwrap();
        assert_eq!(a, p.predict(&x).unwrap());
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(p.layer_dims(), vec![6, 8, 4, 1]);
        let mut big = p.clone();
        big.layers.last_mut().unwrap().bias[0] = 1e4;
        let q = big.predict(&x).unwrap();
        assert!(q < 1.0);
    }

    #[test]
    fn output_bias_gradient_on_zero_network() {
        let p = MlpParams::zeros(3, &[2]);
        let trace = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        let (_, d) = ctr_loss_from_logit(trace.logit, 1);
        let mut g = MlpGrads::zeros_like(&p);
        p.backward(&trace, d, &mut g);
        assert_eq!(g.layers[1].bias[0], -0.5);
    }

    fn toy_model(seed: u64) -> EginModel {
        let features = FeatureConfig {
            k: 2,
            ..FeatureConfig::default()
        };
        let mut m = EginModel::new(4, 1, &[6, 5], features, seed);
        // Spread the small default init so the rectifiers are not all off.
        m.ctr.bin = m.ctr.bin.clone().with_init_scale(0.5);
        m.ctr.position = m.ctr.position.clone().with_init_scale(0.5);
        m
    }

    fn mean_loss(m: &EginModel, samples: &[TrainingSample]) -> f64 {
        samples
            .iter()
            .map(|s| ctr_loss(m.predict(s).unwrap(), s.label).unwrap().0)
            .sum::<f64>()
            / samples.len() as f64
    }

    fn close(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4)
    }

    #[test]
    fn ctr_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for inst in 0..10 {
            let m = toy_model(inst);
            let samples: Vec<_> = (0..3).map(|_| rand_sample(&mut rng, 6, 4)).collect();
            let g = m.ctr_gradients(&samples).unwrap();
            assert!((g.loss - mean_loss(&m, &samples)).abs() < 1e-12);
            for (li, layer) in m.mlp.layers.iter().enumerate() {
                for wi in 0..layer.weights.len() {
                    let (mut a, mut b) = (m.clone(), m.clone());
                    a.mlp.layers[li].weights[wi] += h;
                    b.mlp.layers[li].weights[wi] -= h;
                    let fd = (mean_loss(&a, &samples) - mean_loss(&b, &samples)) / (2.0 * h);
                    assert!(close(fd, g.mlp.layers[li].weights[wi]), "w{li}.{wi}");
                }
            }
            for (id, row) in &g.bin.rows {
                for (c, &an) in row.iter().enumerate() {
                    let (mut a, mut b) = (m.clone(), m.clone());
                    a.ctr.bin.vector_mut(*id)[c] += h;
                    b.ctr.bin.vector_mut(*id)[c] -= h;
                    let fd = (mean_loss(&a, &samples) - mean_loss(&b, &samples)) / (2.0 * h);
                    assert!(close(fd, an), "bin {id}");
                }
            }
            for (id, row) in &g.position.rows {
                for (c, &an) in row.iter().enumerate() {
                    let (mut a, mut b) = (m.clone(), m.clone());
                    a.ctr.position.vector_mut(*id)[c] += h;
                    b.ctr.position.vector_mut(*id)[c] -= h;
                    let fd = (mean_loss(&a, &samples) - mean_loss(&b, &samples)) / (2.0 * h);
                    assert!(close(fd, an), "position {id}");
                }
            }
            // Ids past the padding bin never get a gradient.
            assert!(g.bin.get(21).is_none());
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            hidden: vec![8],
            n_neg: 5,
            features: FeatureConfig {
                k: 3,
                ..FeatureConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reported_total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<_> = (0..8).map(|_| rand_sample(&mut rng, 20, 6)).collect();
        let mut cfg = small_config();
        cfg.joint.alpha = 0.5;
        cfg.joint.beta = 2.0;
        cfg.joint.gamma = 0.25;
        let mut t = Trainer::new(cfg, 1).unwrap();
        for _ in 0..3 {
            let m = t.train_batch(&batch).unwrap();
            let expected = m.l_ctr + 0.5 * m.l_i2i + 2.0 * m.l_q2q + 0.25 * m.l_q2i;
            assert!((m.total - expected).abs() < 1e-9);
            assert!(m.log_line().contains("l_q2i="));
        }
    }

    #[test]
    fn zero_graph_lr_leaves_graph_tables_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<_> = (0..8).map(|_| rand_sample(&mut rng, 20, 6)).collect();
        let mut cfg = small_config();
        cfg.joint.lr_graph = 0.0;
        let mut t = Trainer::new(cfg, 1).unwrap();
        let before = t.model().graph.clone();
        for _ in 0..5 {
            t.train_batch(&batch).unwrap();
        }
        assert_eq!(t.model().graph, before);
        assert_ne!(t.model().mlp, Trainer::new(small_config(), 1).unwrap().model().mlp);
    }

    #[test]
    fn zero_weights_freeze_graph_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<_> = (0..8).map(|_| rand_sample(&mut rng, 20, 6)).collect();
        let mut cfg = small_config();
        cfg.joint.alpha = 0.0;
        cfg.joint.beta = 0.0;
        cfg.joint.gamma = 0.0;
        let mut t = Trainer::new(cfg, 1).unwrap();
        let before = t.model().graph.clone();
        t.train_batch(&batch).unwrap();
        assert_eq!(t.model().graph, before);
    }

    #[test]
    fn repeated_batch_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<_> = (0..6).map(|_| rand_sample(&mut rng, 30, 8)).collect();
        let pushes: usize = batch.iter().map(|s| s.click_seq.len()).sum();
        let mut cfg = small_config();
        cfg.queue_capacity = pushes.max(1);
        cfg.edges.query_edges = false;
        cfg.features.use_query = false;
        cfg.ctr_optimizer = Optimizer::Sgd;
        cfg.joint.lr_ctr = 0.05;
        cfg.joint.lr_graph = 0.05;
        let mut t = Trainer::new(cfg, 1).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            // Same queue contents and same draws every step: a fixed objective.
            t.reseed(123);
            let m = t.train_batch(&batch).unwrap();
            assert!(m.total <= prev + 1e-3, "{} > {}", m.total, prev);
            prev = m.total;
        }
    }

    #[test]
    fn empty_stream_is_an_error() {
        let mut t = Trainer::new(small_config(), 1).unwrap();
        assert!(matches!(t.fit(&[], &[], &mut |_| {}), Err(Error::EmptyStream)));
        assert!(matches!(t.train_batch(&[]), Err(Error::EmptyStream)));
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let mut cfg = small_config();
        cfg.joint.beta = -1.0;
        match Trainer::new(cfg, 1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "beta"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
