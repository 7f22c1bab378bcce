//! Shared fixtures for benchmarks.

use dipole_core::ehr_data::encode_dataset;
use dipole_core::synth_gen::generate;
use dipole_core::{CountSpec, EncodedPatient, GeneratorConfig, Model, ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CODES: usize = 200;
pub const CATEGORIES: usize = 40;

/// Encoded patients from a planted-rule corpus with about 25 visits each.
pub fn patients(n: usize, seed: u64) -> Vec<EncodedPatient> {
    let g = generate(&GeneratorConfig {
        n_patients: n,
        vocab_size: CODES,
        n_categories: CATEGORIES,
        visits: CountSpec::new(5, 60, 25.0),
        codes_per_visit: CountSpec::new(1, 20, 2.5),
        dependency_lag: 10,
        dependency_strength: 0.9,
        n_rules: 200,
        seed,
    })
    .expect("valid generator settings");
    encode_dataset(&g.dataset).expect("generated corpus encodes")
}

pub fn model(variant: Variant, dim: usize) -> Model {
    let mut cfg = ModelConfig::new(variant, CODES, CATEGORIES).with_dims(dim, dim, dim / 2);
    cfg.dropout = 0.0;
    Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid model settings")
}
