//! Shared fixtures for the benchmarks.

use rand::SeedableRng;

use mimrec::corpus::Dataset;
use mimrec::encoder::{ModelConfig, Params, TrainRng};
use mimrec::synth::{generate, SynthSpec};

/// A small synthetic dataset: 300 users over 120 items.
pub fn small_dataset(seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_users: 300,
        n_items: 120,
        n_attrs: 24,
        n_clusters: 6,
        seed,
        ..Default::default()
    };
    let world = generate(&spec).expect("valid synth spec");
    Dataset::preprocess(&world.interactions, Some(&world.attributes), 5).expect("synthetic data survives 5-core")
}

/// The default architecture at width `d`, sized to `ds`.
pub fn model_for(ds: &Dataset, d: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads: 2,
        blocks: 2,
        max_len,
        n_items: ds.n_items(),
        n_attrs: ds.n_attrs(),
        dropout: 0.0,
        d_ff: 4 * d,
        init_std: 0.02,
    }
}

pub fn params(cfg: &ModelConfig, seed: u64) -> Params<f32> {
    Params::init(cfg, &mut TrainRng::seed_from_u64(seed))
}

/// The first `n` training sequences.
pub fn sequences(ds: &Dataset, n: usize) -> Vec<Vec<usize>> {
    ds.split.train.iter().take(n).cloned().collect()
}
