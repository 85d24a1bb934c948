//! Fixtures for the benchmarks: a small generated data set plus trainer and
//! queue states warmed up on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use egin_core::{
    generate_labeled_samples, generate_log, EntityType, GenConfig, NegQueues, TrainConfig, Trainer, TrainingSample,
};

pub fn gen_config() -> GenConfig {
    GenConfig {
        num_users: 150,
        num_items: 400,
        num_queries: 80,
        num_categories: 8,
        items_per_category: 50,
        seed: 11,
        ..GenConfig::default()
    }
}

/// Training samples of the small config.
pub fn samples() -> Vec<TrainingSample> {
    let cfg = gen_config();
    let log = generate_log(&cfg).expect("generate log");
    generate_labeled_samples(&cfg, &log).expect("label samples").train
}

/// Queues filled with every click and query of `samples`.
pub fn warm_queues(samples: &[TrainingSample], capacity: usize) -> NegQueues {
    let mut queues = NegQueues::new(capacity, None).expect("queues");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in samples {
        for e in &s.click_seq {
            queues.push(EntityType::Item, e.entity_id, &mut rng).expect("push");
        }
        for e in &s.query_seq {
            queues.push(EntityType::Query, e.entity_id, &mut rng).expect("push");
        }
    }
    queues
}

/// A trainer that has already seen `warmup` batches, so its queues and
/// tables look like mid-training state.
pub fn warm_trainer(samples: &[TrainingSample], warmup: usize) -> Trainer {
    let cfg = TrainConfig::default();
    let batch = cfg.joint.batch_size;
    let n_other = samples[0].other_features.len();
    let mut trainer = Trainer::new(cfg, n_other).expect("trainer");
    for chunk in samples.chunks(batch).take(warmup) {
        trainer.train_batch(chunk).expect("warm-up batch");
    }
    trainer
}
