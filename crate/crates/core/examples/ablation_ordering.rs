//! Text-only vs coarse vs full conditioning on a synthetic clip store.
//!
//! `cargo run --release --example ablation_ordering -- [seeds] [clips]`

use std::time::Instant;

use videobooth::experiment::{ablation_setup, ablation_trial, AblationConfig};
use videobooth::metrics::format_table;

fn main() -> videobooth::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let seeds = args.next().unwrap_or(3) as u64;
    let mut cfg = AblationConfig::default();
    if let Some(n) = args.next() {
        cfg.clips = n;
    }
    let t0 = Instant::now();
    let setup = ablation_setup(&cfg)?;
    println!("backbone pretrained in {:.0?}", t0.elapsed());
    let mut ordered = 0;
    for seed in 1..=seeds {
        let t = Instant::now();
        let trial = ablation_trial(&cfg, &setup, seed)?;
        print!("{}", format_table(&[trial.text_only.clone(), trial.coarse.clone(), trial.full.clone()]));
        println!("seed {seed}: ordered {} ({:.0?})", trial.ordered(), t.elapsed());
        ordered += trial.ordered() as usize;
    }
    println!("{ordered}/{seeds} seeds ordered, {:.0?} total", t0.elapsed());
    Ok(())
}
