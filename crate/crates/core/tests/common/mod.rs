#![allow(dead_code)]

pub mod gradcheck;

use microdiff::data::synthetic::{synthetic_manifest, SyntheticConfig};
use microdiff::denoiser::DenoiserConfig;
use microdiff::textenc::TextEncoderConfig;
use microdiff::train::{StageConfig, TrainConfig, TrainData};

pub fn tiny_text() -> TextEncoderConfig {
    TextEncoderConfig {
        max_len: 8,
        dim_a: 8,
        dim_b: 8,
        heads: 1,
        layers: 1,
    }
}

pub fn toy_denoiser(text: &TextEncoderConfig) -> DenoiserConfig {
    let mut d = DenoiserConfig::toy(8, vec![1, 2], vec![0, 1], text.context_dim(), text.pooled_dim());
    d.in_channels = 1;
    d.d_f = 8;
    d.time_fourier_dim = 16;
    d.time_dim = 32;
    d.head_dim = 8;
    d
}

pub fn stage(name: &str, steps: usize, res: u32) -> StageConfig {
    StageConfig {
        name: name.into(),
        steps,
        batch_size: 4,
        resolution: Some((res, res)),
        buckets: None,
        offset_level: 0.0,
        cfg_dropout_p: 0.1,
        max_level: None,
    }
}

pub fn toy_config(seed: u64, stages: Vec<StageConfig>) -> TrainConfig {
    let text = tiny_text();
    TrainConfig {
        seed,
        learning_rate: 1e-3,
        ema_decay: 0.99,
        grad_clip: Some(1.0),
        discard_below: None,
        schedule: Default::default(),
        denoiser: toy_denoiser(&text),
        text,
        stages,
    }
}

pub fn synthetic_data(count: usize, seed: u64) -> TrainData {
    let cfg = SyntheticConfig {
        count,
        seed,
        ..Default::default()
    };
    TrainData::load(&synthetic_manifest(&cfg).unwrap())
}
