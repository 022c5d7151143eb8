//! Shared fixtures for the benchmarks.

use nvp_core::datapipe::sprite_corpus;
use nvp_core::latent::pixels_to_model;
use nvp_core::{ModelConfig, Tensor};

/// A small two-scale image model of the size the acceptance suite trains.
pub fn small_image_config() -> ModelConfig {
    let mut cfg = ModelConfig::image(8, 8, 1, 2);
    cfg.hidden = 8;
    cfg.num_blocks = 1;
    cfg
}

/// `n` preprocessed 8x8 sprites.
pub fn sprite_batch(n: usize) -> Tensor {
    let d = sprite_corpus(n, 8, 1, 0).expect("valid corpus");
    let idx: Vec<usize> = (0..n).collect();
    pixels_to_model(&d.batch(&idx)).expect("pixels in range")
}
