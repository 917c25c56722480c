//! Sample a clip for an image prompt and caption, writing the frames as a PPM strip.
//!
//! `cargo run --release --example sample_video -- [out.ppm] [seed]`

use videobooth::codec::decode_video;
use videobooth::dataset::{extract_prompt_image, synth_clip, SynthConfig};
use videobooth::diffusion::SamplerOptions;
use videobooth::experiment::{generate, GenerationSettings};
use videobooth::injection::InjectionOptions;
use videobooth::metrics::write_frame_grid;
use videobooth::model::{ConditionMode, ModelConfig, VideoBooth};
use videobooth::unet::UNetConfig;

fn main() -> videobooth::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("videobooth_sample.ppm"));
    let seed: u64 = args.next().map(|a| a.parse().expect("seed")).unwrap_or(0);
    let cfg = ModelConfig {
        unet: UNetConfig {
            frames: 4,
            height: 16,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    // an untrained model: the point is the plumbing, not the picture
    let model = VideoBooth::<f32>::new(cfg, 0)?;
    let synth = SynthConfig {
        frames: 4,
        height: 16,
        width: 16,
        ..Default::default()
    };
    let clip = synth_clip(0, 5, &synth)?;
    let prompt = extract_prompt_image(&clip.video, &clip.subject_mask, 16)?;
    let bundle = model.bundle(&clip.meta.caption, &prompt)?;
    println!("caption: {}  subject span {:?}", bundle.caption, bundle.span);
    let settings = GenerationSettings {
        mode: ConditionMode::Full,
        injection: InjectionOptions::default(),
        sampler: SamplerOptions::default(),
        steps: 10,
        seed,
        batch: 1,
        refiner: false,
    };
    let latent = generate(&model, &[&bundle], &settings)?.remove(0);
    println!("latent {:?} hash {}", latent.shape(), &latent.content_hash()[..16]);
    write_frame_grid(&decode_video(&latent)?, &out)?;
    println!("frames written to {}", out.display());
    Ok(())
}
