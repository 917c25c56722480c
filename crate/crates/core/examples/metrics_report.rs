//! Image-alignment scores of real clips against matched and mismatched prompts.

use videobooth::codec::encode_video;
use videobooth::dataset::{extract_prompt_image, synth_generate, SynthConfig};
use videobooth::experiment::score;
use videobooth::metrics::{format_jsonl, format_table};
use videobooth::model::{ModelConfig, VideoBooth};

fn main() -> videobooth::Result<()> {
    let model = VideoBooth::<f32>::new(ModelConfig::default(), 0)?;
    let synth = SynthConfig::default();
    let clips = synth_generate(12, 3, &synth)?;
    let mut bundles = Vec::new();
    for c in &clips {
        let prompt = extract_prompt_image(&c.video, &c.subject_mask, synth.height)?;
        bundles.push(model.bundle_with_span(&c.meta.caption, c.meta.span.unwrap_or((0, 1)), &prompt)?);
    }
    let ids: Vec<String> = clips.iter().map(|c| c.meta.clip_id.clone()).collect();
    let latents: Vec<_> = clips.iter().map(|c| encode_video(&c.video)).collect::<videobooth::Result<_>>()?;
    let matched: Vec<_> = bundles.iter().collect();
    let mut shifted = matched.clone();
    shifted.rotate_left(1);
    let reports = [
        score(&model, "matched", &ids, &matched, &latents)?,
        score(&model, "mismatched", &ids, &shifted, &latents)?,
    ];
    print!("{}", format_table(&reports));
    println!("{}", format_jsonl(&reports[..1]).lines().next().unwrap_or_default());
    Ok(())
}
