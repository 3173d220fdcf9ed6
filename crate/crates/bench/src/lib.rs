//! Shared fixtures for the benchmarks.

use mnat::data::TokenId;
use mnat::model::{ModelConfig, NatModel};
use mnat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in [-1, 1) from a fixed seed.
pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// The default desk-sized model over `vocab` ids.
pub fn desk_model(vocab: usize) -> NatModel {
    NatModel::new(ModelConfig::desk(vocab)).expect("valid config")
}

/// `count` random sentences of `len` ordinary (non-reserved) tokens.
pub fn sentences(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..len)
                .map(|_| rng.gen_range(4..vocab as TokenId))
                .collect()
        })
        .collect()
}
