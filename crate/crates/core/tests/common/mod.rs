#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spoofnet::autodiff::Tensor;
use spoofnet::encoder::EncoderConfig;
use spoofnet::losses::MarginConfig;
use spoofnet::model::Model;

pub const TINY_LEN: usize = 400;

/// A two-block encoder small enough for per-test training steps.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_len: TINY_LEN,
        num_filters: 6,
        kernel_len: 17,
        block_channels: vec![2, 3],
        pool_time: 0,
        gru_hidden: 6,
        embed_dim: 5,
        ..EncoderConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_encoder(), MarginConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn waves(rows: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[rows, TINY_LEN], -0.5, 0.5, &mut rng)
}
