//! The five commands behind the `videobooth` binary.
//!
//! Every command takes a resolved [`RunConfig`], writes its outputs
//! atomically and records the configuration plus invocation next to them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;

use crate::codec;
use crate::config::{Invocation, RunConfig, RESOLVED_CONFIG_FILE};
use crate::dataset::{
    clean_video_path, curate, load_clips, save_clip_store, synth_generate, write_atomic, Manifest, Split, SynthConfig,
    Verdict,
};
use crate::error::{Error, Result};
use crate::experiment::{example_from_clip, generate, score, GenerationSettings};
use crate::metrics::{format_jsonl, format_table, write_frame_grid, MetricReport};
use crate::model::{ConditionMode, PromptBundle, VideoBooth};
use crate::params::StageTag;
use crate::tensor::Tensor;
use crate::trainer::{run_stage, Checkpoint, Stage, TrainExample};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn invocation(command: &str, args: &[(&str, String)]) -> Invocation {
    Invocation {
        command: command.into(),
        version: VERSION.into(),
        args: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Path of the resolved config written beside a single output file.
pub fn resolved_config_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.toml");
    file.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenSummary {
    pub manifest_hash: String,
    pub verdicts: BTreeMap<Verdict, usize>,
    pub train: usize,
    pub test: usize,
}

/// Generates the synthetic corpus, curates it and writes the clip store.
pub fn cmd_datagen(cfg: &RunConfig, out_dir: &Path) -> Result<DatagenSummary> {
    info!("datagen seed {} config {} version {VERSION}", cfg.seed, cfg.model.config_hash());
    let mut clips = synth_generate(cfg.data.clips, cfg.seed, &cfg.data.synth)?;
    let manifest = curate(&mut clips, &cfg.data.filter, cfg.data.test_count, cfg.seed)?;
    if cfg.data.synth.watermark {
        let clean_cfg = SynthConfig {
            watermark: false,
            ..cfg.data.synth.clone()
        };
        for c in &clips {
            let index: usize = c.meta.clip_id.trim_start_matches("clip").parse().expect("generated ids are numeric");
            let clean = crate::dataset::synth_clip(index, cfg.seed, &clean_cfg)?;
            write_atomic(&clean_video_path(out_dir, &c.meta.clip_id), &clean.video.to_bytes())?;
        }
    }
    save_clip_store(out_dir, &clips, &manifest)?;
    cfg.write_resolved(&out_dir.join(RESOLVED_CONFIG_FILE), invocation("datagen", &[("out", out_dir.display().to_string())]))?;
    Ok(DatagenSummary {
        manifest_hash: manifest.hash(),
        verdicts: manifest.verdict_counts(),
        train: manifest.count(Split::Train),
        test: manifest.count(Split::Test),
    })
}

fn load_examples(model: &VideoBooth<f32>, manifest_path: &Path, split: Split, clean_targets: bool) -> Result<Vec<TrainExample>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = Manifest::load(manifest_path)?;
    let clips = load_clips(dir, &manifest, split)?;
    clips
        .iter()
        .map(|c| {
            let mut ex = example_from_clip(model, c)?;
            if clean_targets {
                let p = clean_video_path(dir, &c.meta.clip_id);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                ex.target = Some(codec::encode_video(&Tensor::from_bytes(&bytes)?)?);
            }
            Ok(ex)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub stages: Vec<Stage>,
    pub final_losses: Vec<f64>,
    pub digest: String,
}

/// Trains `stage` (or the default stage sequence) on the train split of
/// the clip store at `data_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    stage: Option<Stage>,
    in_ckpt: Option<&Path>,
    out_ckpt: &Path,
) -> Result<TrainSummary> {
    info!("train seed {} config {} version {VERSION}", cfg.train.seed, cfg.model.config_hash());
    let (mut model, mut history, ancestor, mut seeds) = match in_ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&cfg.model)?;
            let digest = ck.digest();
            let (stages, seeds) = (ck.header.stages.clone(), ck.header.seeds.clone());
            (ck.into_model()?, stages, Some(digest), seeds)
        }
        None => (VideoBooth::<f32>::new(cfg.model.clone(), cfg.seed)?, Vec::new(), None, vec![cfg.seed]),
    };
    let stages = match stage {
        Some(s) => vec![s],
        None => cfg.default_stages(),
    };
    let manifest_path = data_dir.join("manifest.tsv");
    let mut final_losses = Vec::new();
    for st in &stages {
        let plan = cfg.plan(*st);
        if *st == Stage::Refiner && !model.has_refiner() {
            model.add_refiner(&cfg.refiner, cfg.seed)?;
        }
        let data = load_examples(&model, &manifest_path, Split::Train, *st == Stage::Refiner)?;
        info!("stage {} on {} clips, {} steps", st.as_str(), data.len(), plan.steps);
        let mut log_progress = |i: usize, r: &crate::trainer::StepReport| {
            if i.is_multiple_of(50) {
                info!("{} step {i} loss {:.5} grad norm {:.4}", st.as_str(), r.loss, r.grad_norm);
            }
        };
        let losses = run_stage(&mut model, &data, &plan, Some(&mut log_progress))?;
        final_losses.push(losses.last().copied().unwrap_or(f64::NAN));
        history.push(*st);
        seeds.push(plan.seed);
    }
    let ck = Checkpoint::from_model(&model, history, ancestor, seeds, cfg.features.injection_options());
    ck.save(out_ckpt)?;
    let args = [
        ("data", data_dir.display().to_string()),
        ("stage", stage.map(|s| s.as_str().to_string()).unwrap_or_else(|| "default".into())),
        ("in", in_ckpt.map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())),
        ("out", out_ckpt.display().to_string()),
    ];
    cfg.write_resolved(&resolved_config_beside(out_ckpt), invocation("train", &args))?;
    Ok(TrainSummary {
        stages,
        final_losses,
        digest: ck.digest(),
    })
}

/// Conditioning mode matching the last prompt-related stage a checkpoint went through.
pub fn mode_for_stages(stages: &[Stage]) -> ConditionMode {
    stages
        .iter()
        .rev()
        .find(|s| **s != Stage::Refiner)
        .map(|s| s.default_mode())
        .unwrap_or(ConditionMode::TextOnly)
}

/// Reads a PPM/PGM file as `[size, size, 3]` pixels in `[-1, 1]`, resized nearest.
pub fn read_prompt_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "empty image".into(),
        });
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let p = img.get_pixel((x * w / size) as u32, (y * h / size) as u32);
            data.extend(p.0.iter().map(|&c| c as f32 / 127.5 - 1.0));
        }
    }
    Tensor::new(vec![size, size, 3], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub latent_path: PathBuf,
    pub frames_path: PathBuf,
    pub latent_hash: String,
    pub frames_hash: String,
}

/// Samples one video for `(prompt image, caption, seed)`.
///
/// `watermark_removal` overrides the configured flag.
pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: &Path,
    prompt_image: &Path,
    caption: &str,
    seed: u64,
    out_dir: &Path,
    watermark_removal: Option<bool>,
) -> Result<SampleOutputs> {
    let ck = Checkpoint::load(ckpt)?;
    ck.check_compatible(&cfg.model)?;
    info!("sample seed {seed} config {} version {VERSION}", ck.header.config_hash);
    let mode = cfg.sample.mode.unwrap_or_else(|| mode_for_stages(&ck.header.stages));
    let model = ck.into_model()?;
    let refiner = watermark_removal.unwrap_or(cfg.features.watermark_removal);
    if refiner && !model.has_refiner() {
        return Err(Error::Plan("watermark removal requested but the checkpoint has no refiner".into()));
    }
    let img = read_prompt_image(prompt_image, model.config.unet.height)?;
    let bundle = model.bundle(caption, &img)?;
    let settings = GenerationSettings {
        mode,
        injection: cfg.features.injection_options(),
        sampler: cfg.features.sampler_options(),
        steps: cfg.sample.steps,
        seed,
        batch: 1,
        refiner,
    };
    let latent = generate(&model, &[&bundle], &settings)?.remove(0);
    let latent_path = out_dir.join("sample.vbt");
    let frames_path = out_dir.join("sample.ppm");
    write_atomic(&latent_path, &latent.to_bytes())?;
    write_frame_grid(&codec::decode_video(&latent)?, &frames_path)?;
    let args = [
        ("ckpt", ckpt.display().to_string()),
        ("prompt_image", prompt_image.display().to_string()),
        ("caption", caption.to_string()),
        ("seed", seed.to_string()),
        ("out", out_dir.display().to_string()),
        ("watermark_removal", refiner.to_string()),
    ];
    cfg.write_resolved(&out_dir.join(RESOLVED_CONFIG_FILE), invocation("sample", &args))?;
    Ok(SampleOutputs {
        latent_hash: sha256_file(&latent_path)?,
        frames_hash: sha256_file(&frames_path)?,
        latent_path,
        frames_path,
    })
}

/// Scores each checkpoint on the test split of `test_manifest`; writes
/// `report.txt` and `report.jsonl` into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    ckpts: &[PathBuf],
    test_manifest: &Path,
    out_dir: &Path,
    emit_frames: Option<&Path>,
) -> Result<Vec<MetricReport>> {
    if ckpts.is_empty() {
        return Err(Error::Plan("eval needs at least one checkpoint".into()));
    }
    info!("eval seed {} config {} version {VERSION}", cfg.eval.seed, cfg.model.config_hash());
    let mut reports = Vec::with_capacity(ckpts.len());
    for path in ckpts {
        let ck = Checkpoint::load(path)?;
        ck.check_compatible(&cfg.model)?;
        let mode = cfg.sample.mode.unwrap_or_else(|| mode_for_stages(&ck.header.stages));
        let model = ck.into_model()?;
        let examples = load_examples(&model, test_manifest, Split::Test, false)?;
        if examples.is_empty() {
            return Err(Error::Plan(format!("{} has no test clips", test_manifest.display())));
        }
        let bundles: Vec<&PromptBundle> = examples.iter().map(|e| &e.bundle).collect();
        let ids: Vec<String> = Manifest::load(test_manifest)?.split(Split::Test).map(|r| r.clip_id.clone()).collect();
        let settings = GenerationSettings {
            mode,
            injection: cfg.features.injection_options(),
            sampler: cfg.features.sampler_options(),
            steps: cfg.sample.steps,
            seed: cfg.eval.seed,
            batch: cfg.sample.batch,
            refiner: cfg.features.watermark_removal && model.has_refiner(),
        };
        let latents = generate(&model, &bundles, &settings)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        if let Some(dir) = emit_frames {
            for (id, z) in ids.iter().zip(&latents) {
                write_frame_grid(&codec::decode_video(z)?, &dir.join(&name).join(format!("{id}.ppm")))?;
            }
        }
        let report = score(&model, &name, &ids, &bundles, &latents)?;
        info!("{name}: clip-image {:.4} dino {:.4}", report.clip_image, report.dino);
        reports.push(report);
    }
    write_atomic(&out_dir.join("report.txt"), format_table(&reports).as_bytes())?;
    write_atomic(&out_dir.join("report.jsonl"), format_jsonl(&reports).as_bytes())?;
    let args = [
        ("ckpts", ckpts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
        ("test_manifest", test_manifest.display().to_string()),
        ("out", out_dir.display().to_string()),
    ];
    cfg.write_resolved(&out_dir.join(RESOLVED_CONFIG_FILE), invocation("eval", &args))?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectRow {
    pub name: String,
    pub tag: StageTag,
    pub shape: Vec<usize>,
    pub hash: String,
    /// Whether the tensor is bitwise equal to the ancestor's; `None` without
    /// an ancestor or when the ancestor lacks it.
    pub unchanged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub config_hash: String,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
    pub digest: String,
    pub ancestor_digest: Option<String>,
    pub rows: Vec<InspectRow>,
}

impl InspectReport {
    /// Rows with `tag` whose hash differs from the ancestor.
    pub fn changed_with_tag(&self, tag: StageTag) -> Vec<&InspectRow> {
        self.rows.iter().filter(|r| r.tag == tag && r.unchanged == Some(false)).collect()
    }
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<&str> = self.stages.iter().map(|s| s.as_str()).collect();
        writeln!(f, "config   {}", self.config_hash)?;
        writeln!(f, "stages   {}", if stages.is_empty() { "-".into() } else { stages.join(" -> ") })?;
        writeln!(f, "seeds    {:?}", self.seeds)?;
        writeln!(f, "digest   {}", self.digest)?;
        writeln!(f, "ancestor {}", self.ancestor_digest.as_deref().unwrap_or("-"))?;
        let mut counts: BTreeMap<StageTag, (usize, usize)> = BTreeMap::new();
        for r in &self.rows {
            let c = counts.entry(r.tag).or_default();
            c.0 += 1;
            c.1 += r.shape.iter().product::<usize>();
        }
        for (tag, (n, values)) in &counts {
            writeln!(f, "tag {:<8} {n:>4} tensors {values:>9} values", tag.as_str())?;
        }
        for r in &self.rows {
            let status = match r.unchanged {
                Some(true) => "same",
                Some(false) => "changed",
                None => "-",
            };
            writeln!(f, "{:<40} {:<8} {:<18} {} {status}", r.name, r.tag.as_str(), format!("{:?}", r.shape), &r.hash[..16])?;
        }
        Ok(())
    }
}

/// Per-tensor tag, shape and hash; compared to `ancestor` when given.
pub fn cmd_inspect(ckpt: &Path, ancestor: Option<&Path>) -> Result<InspectReport> {
    let ck = Checkpoint::load(ckpt)?;
    let before = ancestor.map(Checkpoint::load).transpose()?.map(|a| a.store.hashes());
    let hashes = ck.store.hashes();
    let rows = ck
        .store
        .iter()
        .map(|(name, e)| InspectRow {
            name: name.to_string(),
            tag: e.tag,
            shape: e.value.shape().to_vec(),
            hash: hashes[name].clone(),
            unchanged: before.as_ref().and_then(|b| b.get(name)).map(|h| *h == hashes[name]),
        })
        .collect();
    Ok(InspectReport {
        config_hash: ck.header.config_hash.clone(),
        stages: ck.header.stages.clone(),
        seeds: ck.header.seeds.clone(),
        digest: ck.digest(),
        ancestor_digest: ck.header.ancestor_digest.clone(),
        rows,
    })
}
