//! Synthesize moving-subject clips, filter them and split off a test set.
//!
//! `cargo run --release --example dataset_curation -- [clips] [out_dir]`

use videobooth::dataset::{curate, extract_prompt_image, save_clip_store, synth_generate, FilterRules, Split, SynthConfig};

fn main() -> videobooth::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("clip count")).unwrap_or(64);
    let out = args.next();
    let cfg = SynthConfig::default();
    let mut clips = synth_generate(n, 0, &cfg)?;
    let manifest = curate(&mut clips, &FilterRules::default(), n / 8, 0)?;
    for (v, count) in manifest.verdict_counts() {
        println!("{:<15} {count}", v.as_str());
    }
    println!("train {} test {}  manifest {}", manifest.count(Split::Train), manifest.count(Split::Test), &manifest.hash()[..16]);
    for line in manifest.to_text().lines().take(6) {
        println!("  {line}");
    }
    let c = &clips[0];
    let prompt = extract_prompt_image(&c.video, &c.subject_mask, cfg.height)?;
    println!(
        "{}: {} covers {} px of frame 0, prompt image {:?}",
        c.meta.clip_id,
        c.subject_class,
        c.subject_mask.count(),
        prompt.shape()
    );
    if let Some(dir) = out {
        save_clip_store(std::path::Path::new(&dir), &clips, &manifest)?;
        println!("clip store written to {dir}");
    }
    Ok(())
}
