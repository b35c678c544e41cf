//! Shared fixtures for the benchmark targets.

use bstego_core::pipeline::StegoKey;
use bstego_core::rng::Rng;
use bstego_core::DualHeadedModel;

/// Model that always predicts 128: the embedding walk then touches every
/// query pixel as a carrier, which is the throughput-relevant regime.
pub fn constant_predictor() -> DualHeadedModel {
    DualHeadedModel::from_parameters(
        vec![12, 2],
        vec![(vec![0.0; 24], vec![0.0; 2])],
        (vec![0.0; 2], 128.0 / 255.0),
        (vec![0.0; 2], -4.6),
        0.3,
    )
    .expect("static shapes are valid")
}

pub fn bench_key(model: &DualHeadedModel, t_count: usize) -> StegoKey {
    StegoKey::new(7, t_count).bind_model(model)
}

pub fn random_bits(count: usize, seed: u64) -> Vec<bool> {
    let mut rng = Rng::seed_from(seed);
    (0..count).map(|_| rng.next_bit()).collect()
}
