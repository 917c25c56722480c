#![allow(dead_code)]

pub mod oracle;

use videobooth::conditioning::EncoderConfig;
use videobooth::dataset::{synth_clip, SynthConfig};
use videobooth::experiment::example_from_clip;
use videobooth::model::{ModelConfig, VideoBooth};
use videobooth::trainer::TrainExample;
use videobooth::unet::UNetConfig;

/// A backbone small enough for debug-speed unit training.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        unet: UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            frames: 2,
            height: 8,
            width: 8,
            attention_levels: vec![1],
            head_dim: 8,
            time_embed_dim: 8,
            groups: 2,
            context_dim: 16,
            ..Default::default()
        },
        encoder: EncoderConfig {
            d_txt: 16,
            d_img: 16,
            mapper_hidden_widths: vec![16],
            image_patch: 2,
            max_tokens: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn tiny_synth(cfg: &ModelConfig) -> SynthConfig {
    SynthConfig {
        frames: cfg.unet.frames,
        height: cfg.unet.height,
        width: cfg.unet.width,
        subject_scale: [0.5, 0.7],
        ..Default::default()
    }
}

pub fn tiny_model(seed: u64) -> VideoBooth<f32> {
    VideoBooth::new(tiny_config(), seed).unwrap()
}

pub fn tiny_examples(model: &VideoBooth<f32>, n: usize, seed: u64) -> Vec<TrainExample> {
    let synth = tiny_synth(&model.config);
    (0..n)
        .map(|i| example_from_clip(model, &synth_clip(i, seed, &synth).unwrap()).unwrap())
        .collect()
}
