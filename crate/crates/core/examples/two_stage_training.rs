//! Base pretraining, then coarse (stage 1) and fine (stage 2) prompt training,
//! reporting which parameters each stage touched.
//!
//! `cargo run --release --example two_stage_training -- [steps]`

use std::collections::BTreeMap;

use videobooth::dataset::{curate, synth_generate, FilterRules, Split, SynthConfig};
use videobooth::experiment::examples_from_clips;
use videobooth::model::{ModelConfig, VideoBooth};
use videobooth::trainer::{changed_entries, run_stage, Stage, StagePlan};
use videobooth::unet::UNetConfig;

fn main() -> videobooth::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|a| a.parse().expect("step count")).unwrap_or(60);
    let cfg = ModelConfig {
        unet: UNetConfig {
            frames: 4,
            height: 16,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let synth = SynthConfig {
        frames: 4,
        height: 16,
        width: 16,
        ..Default::default()
    };
    let mut clips = synth_generate(48, 1, &synth)?;
    curate(&mut clips, &FilterRules::default(), 4, 1)?;
    let mut model = VideoBooth::<f32>::new(cfg, 1)?;
    let train = examples_from_clips(&model, &clips, Split::Train)?;
    println!("{} training clips, {} parameters", train.len(), model.store.count_values(None));

    for (i, stage) in [Stage::Base, Stage::Stage1, Stage::Stage2].into_iter().enumerate() {
        let before = model.store.clone();
        let plan = StagePlan::new(stage, steps, 4, 2e-3, 10 + i as u64);
        let losses = run_stage(&mut model, &train, &plan, None)?;
        let head = losses.iter().take(10).sum::<f64>() / 10f64.min(losses.len() as f64);
        let tail = losses.iter().rev().take(10).sum::<f64>() / 10f64.min(losses.len() as f64);
        let mut by_tag: BTreeMap<&str, usize> = BTreeMap::new();
        for name in changed_entries(&before, &model.store) {
            *by_tag.entry(model.store.tag(&name).expect("known name").as_str()).or_default() += 1;
        }
        println!("{:<7} loss {head:.4} -> {tail:.4}   changed tensors by tag {by_tag:?}", stage.as_str());
    }
    Ok(())
}
