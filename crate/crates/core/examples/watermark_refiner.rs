//! The zero-initialized watermark refiner: a no-op when built, trainable on
//! (watermarked prompt, clean target) pairs afterwards.

use videobooth::codec::encode_video;
use videobooth::dataset::{synth_clip, SynthConfig};
use videobooth::experiment::example_from_clip;
use videobooth::model::{ModelConfig, VideoBooth};
use videobooth::refiner::{block_layout, RefinerConfig};
use videobooth::trainer::{changed_entries, loss_and_grads, run_stage, Stage, StagePlan};
use videobooth::unet::UNetConfig;
use videobooth::{RngStream, StageTag};

fn main() -> videobooth::Result<()> {
    let cfg = ModelConfig {
        unet: UNetConfig {
            frames: 4,
            height: 16,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let marked = SynthConfig {
        frames: 4,
        height: 16,
        width: 16,
        watermark: true,
        ..Default::default()
    };
    let clean = SynthConfig { watermark: false, ..marked.clone() };
    let mut model = VideoBooth::<f32>::new(cfg, 2)?;
    let mut data = Vec::new();
    for i in 0..16 {
        let mut ex = example_from_clip(&model, &synth_clip(i, 4, &marked)?)?;
        ex.target = Some(encode_video(&synth_clip(i, 4, &clean)?.video)?);
        data.push(ex);
    }
    let plan = StagePlan::new(Stage::Refiner, 40, 4, 2e-3, 6);
    let batch: Vec<_> = data.iter().take(4).collect();
    let trainable = Default::default();
    let before = loss_and_grads(&model, &batch, &plan, &trainable, &mut RngStream::new(9))?.0;

    let rcfg = RefinerConfig::for_backbone(model.config.unet.base_channels);
    for (name, pair) in block_layout(&rcfg) {
        println!("  {name:<6} {pair:?}");
    }
    model.add_refiner(&rcfg, 3)?;
    let with = loss_and_grads(&model, &batch, &plan, &trainable, &mut RngStream::new(9))?.0;
    println!("refiner parameters {}", model.store.count_values(Some(StageTag::Refiner)));
    println!("loss without / with fresh refiner: {before:.6} / {with:.6} (identical: {})", before == with);

    let snapshot = model.store.clone();
    let losses = run_stage(&mut model, &data, &plan, None)?;
    let changed = changed_entries(&snapshot, &model.store);
    let outside: Vec<_> = changed.iter().filter(|n| !n.starts_with("refiner.")).collect();
    println!(
        "refiner stage: loss {:.4} -> {:.4}, {} tensors changed, outside the refiner: {outside:?}",
        losses[0],
        losses[losses.len() - 1],
        changed.len()
    );
    Ok(())
}
