//! Shared fixtures for the benchmarks.

use retcop_core::encoders::EncoderParams;
use retcop_core::synthstream::{build_modality, ModalityGenerator, ModalitySpec, PairSample};
use retcop_core::Rng;

pub const IMAGE_DIM: usize = 32;
pub const TEXT_DIM: usize = 24;

pub fn default_generator(seed: u64) -> ModalityGenerator {
    build_modality(&ModalitySpec {
        modality_id: 1,
        n_classes: 8,
        latent_dim: 16,
        image_dim: IMAGE_DIM,
        text_dim: TEXT_DIM,
        noise_sigma: 0.5,
        generator_seed: seed,
    })
    .unwrap()
}

pub fn default_encoders(seed: u64) -> EncoderParams {
    EncoderParams::init(IMAGE_DIM, TEXT_DIM, 64, 16, seed).unwrap()
}

pub fn batch_of(n: usize, seed: u64) -> Vec<PairSample> {
    let generator = default_generator(seed);
    let mut rng = Rng::from_seed(seed);
    generator.sample_pairs(n, &mut rng).unwrap()
}
