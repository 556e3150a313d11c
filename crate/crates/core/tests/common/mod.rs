//! Fixtures shared by the training-level test targets.
#![allow(dead_code)]

use mbgr_core::data::{generate, SyntheticConfig, SyntheticData};
use mbgr_core::model::ModelConfig;
use mbgr_core::tokenizer::fit_residual_quantizer;
use mbgr_core::trainer::{prepare, OptimConfig, Prepared, RunConfig};
use mbgr_core::Codebook;

/// 50 items over four businesses, short histories.
pub fn toy_data_config() -> SyntheticConfig {
    SyntheticConfig {
        users: 60,
        catalog_sizes: vec![20, 10, 10, 10],
        mean_length: 12.0,
        min_length: 6,
        max_length: 24,
        feature_dim: 8,
        ..SyntheticConfig::default()
    }
}

pub fn toy_run_config(steps: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            k_sid: 2,
            vocab: 8,
            d_t: 8,
            d_e: 16,
            d_b: 4,
            hidden: 16,
            layers: 1,
            heads: 2,
            max_len: 24,
            k_exp: 2,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            steps,
            batch_size: 8,
            ..OptimConfig::default()
        },
        ..RunConfig::default()
    }
}

pub struct Fixture {
    pub data: SyntheticData,
    pub codebook: Codebook,
    pub prepared: Prepared,
}

pub fn fixture(data_cfg: &SyntheticConfig, cfg: &RunConfig) -> Fixture {
    let data = generate(data_cfg).unwrap();
    let vecs: Vec<Vec<f64>> = data.items.iter().map(|i| i.vec.clone()).collect();
    let codebook = fit_residual_quantizer(&vecs, cfg.model.k_sid, cfg.model.vocab, cfg.tokenizer.seed).unwrap();
    let prepared = prepare(&data.users, &data.items, &codebook, cfg.model.max_len).unwrap();
    Fixture {
        data,
        codebook,
        prepared,
    }
}
