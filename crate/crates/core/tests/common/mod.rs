#![allow(dead_code)]

use pccnn_core::data::{Image, Signature};
use pccnn_core::maskgen::Mask;
use pccnn_core::model::ArchitectureConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(signature: Signature, head_hidden: Option<usize>) -> ArchitectureConfig {
    ArchitectureConfig {
        signature,
        prior_blocks: 2,
        prior_filters: 4,
        prior_kernel: 3,
        cond_blocks: 2,
        cond_filters: 4,
        cond_kernel: 3,
        head_hidden,
    }
}

pub fn random_image(signature: Signature, rng: &mut impl Rng) -> Image {
    let values = (0..signature.values())
        .map(|_| rng.random_range(0..signature.levels) as u8)
        .collect();
    Image::new(signature, values).unwrap()
}

pub fn random_mask(height: usize, width: usize, p_visible: f64, rng: &mut impl Rng) -> Mask {
    let bits = (0..height * width).map(|_| u8::from(rng.random_bool(p_visible))).collect();
    Mask::new(height, width, bits).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
