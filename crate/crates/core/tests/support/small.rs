//! Small datasets, models and stage configurations that train in
//! milliseconds.

use cdae::data::{generate_synthetic, stratified_split, Dataset, SyntheticTextureConfig};
use cdae::models::EncoderConfig;
use cdae::pipeline::{Stage, StageConfig};

pub fn dataset(seed: u64) -> Dataset {
    let mut cfg = SyntheticTextureConfig::balanced(3, 24, seed);
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.bands = vec![(0.5, 0.85), (1.5, 1.85), (2.5, 2.85)];
    generate_synthetic(&cfg).unwrap()
}

pub fn splits(seed: u64) -> (Dataset, Dataset, Dataset) {
    stratified_split(&dataset(seed), (0.6, 0.2, 0.2), seed).unwrap()
}

pub fn wide() -> EncoderConfig {
    EncoderConfig::new(vec![6, 8], 3, 1)
}

pub fn narrow() -> EncoderConfig {
    EncoderConfig::new(vec![4, 4], 3, 1)
}

pub fn stage(stage: Stage, epochs: usize, seed: u64) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        seed,
        ..StageConfig::defaults(stage)
    }
}
