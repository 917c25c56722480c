use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use videobooth::cli;
use videobooth::config::RunConfig;
use videobooth::trainer::Stage;
use videobooth::Result;

#[derive(Parser)]
#[command(name = "videobooth", version, about = "Image-prompt conditioned video diffusion at desk scale")]
struct Args {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and curate the synthetic clip store.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage, or the default stage sequence.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// base, stage1, stage2, unified or refiner.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one video from an image prompt and a caption.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM/PGM subject image.
        #[arg(long)]
        prompt_image: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        watermark_removal: Option<OnOff>,
    },
    /// Score checkpoints on a curated test split.
    Eval {
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_frames: Option<PathBuf>,
    },
    /// Print a checkpoint's stages and per-tensor hashes.
    Inspect {
        ckpt: PathBuf,
        #[arg(long)]
        ancestor: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match args.command {
        Command::Datagen { out } => {
            let s = cli::cmd_datagen(&cfg, &out)?;
            println!("manifest {} train {} test {} verdicts {:?}", s.manifest_hash, s.train, s.test, s.verdicts);
        }
        Command::Train { data, stage, input, out } => {
            let stage = stage.map(|s| s.parse::<Stage>()).transpose()?;
            let s = cli::cmd_train(&cfg, &data, stage, input.as_deref(), &out)?;
            println!("trained {:?} final losses {:?} digest {}", s.stages, s.final_losses, s.digest);
        }
        Command::Sample {
            ckpt,
            prompt_image,
            caption,
            seed,
            out,
            watermark_removal,
        } => {
            let wm = watermark_removal.map(|w| matches!(w, OnOff::On));
            let s = cli::cmd_sample(&cfg, &ckpt, &prompt_image, &caption, seed, &out, wm)?;
            println!("{} {}", s.latent_hash, s.latent_path.display());
            println!("{} {}", s.frames_hash, s.frames_path.display());
        }
        Command::Eval {
            ckpts,
            test_manifest,
            out,
            emit_frames,
        } => {
            let reports = cli::cmd_eval(&cfg, &ckpts, &test_manifest, &out, emit_frames.as_deref())?;
            print!("{}", videobooth::metrics::format_table(&reports));
        }
        Command::Inspect { ckpt, ancestor } => {
            print!("{}", cli::cmd_inspect(&ckpt, ancestor.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
