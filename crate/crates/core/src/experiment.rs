//! Glue between the dataset, the model and the metrics: building training
//! examples from curated clips, batched generation and scoring.

use crate::codec;
use crate::dataset::{curate, synth_generate, ClipRecord, FilterRules, Split, SynthConfig};
use crate::diffusion::{sample_video, SamplerOptions};
use crate::error::{Error, Result};
use crate::injection::InjectionOptions;
use crate::metrics::{clip_image_score, clip_text_score, dino_like_score, embedder_hash, ClipScores, MetricReport};
use crate::model::{unstack, ConditionMode, Conditioned, ModelConfig, PromptBundle, VideoBooth};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::trainer::{run_stage, Stage, StagePlan, StepReport, TrainExample};

/// Training examples for every clip assigned to `split`.
pub fn examples_from_clips(model: &VideoBooth<f32>, clips: &[ClipRecord], split: Split) -> Result<Vec<TrainExample>> {
    clips
        .iter()
        .filter(|c| c.meta.split == split)
        .map(|c| example_from_clip(model, c))
        .collect()
}

pub fn example_from_clip(model: &VideoBooth<f32>, clip: &ClipRecord) -> Result<TrainExample> {
    let span = clip
        .meta
        .span
        .ok_or_else(|| Error::Parse(format!("clip {} has no subject span", clip.meta.clip_id)))?;
    let prompt = clip.prompt_image(model.config.unet.height)?;
    Ok(TrainExample {
        latent: codec::encode_video(&clip.video)?,
        target: None,
        bundle: model.bundle_with_span(&clip.meta.caption, span, &prompt)?,
    })
}

/// Generation settings shared by evaluation and sampling.
#[derive(Debug, Clone, Copy)]
pub struct GenerationSettings {
    pub mode: ConditionMode,
    pub injection: InjectionOptions,
    pub sampler: SamplerOptions,
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub refiner: bool,
}

/// Samples one video per bundle; returns `[4, F, H, W]` latents.
///
/// Batch `j` uses seed `seed + j`, so results depend on the batch size.
pub fn generate(model: &VideoBooth<f32>, bundles: &[&PromptBundle], s: &GenerationSettings) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(bundles.len());
    for (j, chunk) in bundles.chunks(s.batch.max(1)).enumerate() {
        let cond = Conditioned {
            model,
            bundles: chunk.to_vec(),
            mode: s.mode,
            injection: s.injection,
            refiner: s.refiner,
        };
        let prompts = cond.prompt_latents()?;
        let needs_prompt = s.mode.uses_injection() && s.injection.enabled;
        let latents = sample_video(
            &cond,
            &model.schedule,
            &cond.latent_shape(),
            needs_prompt.then_some(&prompts),
            s.seed.wrapping_add(j as u64),
            s.steps,
            s.sampler,
        )?;
        for i in 0..chunk.len() {
            out.push(unstack(&latents, i)?);
        }
    }
    Ok(out)
}

/// Scores decoded videos against their bundles.
pub fn score(
    model: &VideoBooth<f32>,
    name: &str,
    ids: &[String],
    bundles: &[&PromptBundle],
    latents: &[Tensor<f32>],
) -> Result<MetricReport> {
    if ids.len() != bundles.len() || bundles.len() != latents.len() {
        return Err(Error::Contract("ids, bundles and videos must align".into()));
    }
    let dino = model.dino_encoder();
    let mut rows = Vec::with_capacity(ids.len());
    for ((id, b), z) in ids.iter().zip(bundles).zip(latents) {
        let video = codec::decode_video(z)?;
        rows.push(ClipScores {
            clip_id: id.clone(),
            clip_text: clip_text_score(&video, &b.tokens, &model.text, &model.image)?,
            clip_image: clip_image_score(&video, &b.prompt_image, &model.image)?,
            dino: dino_like_score(&video, &b.prompt_image, &dino)?,
        });
    }
    MetricReport::new(name, rows, embedder_hash(&model.text, &model.image, &dino))
}

/// Budget of the text-only / coarse / full ordering experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub filter: FilterRules,
    pub clips: usize,
    pub test_count: usize,
    /// Seed of the clip store and of the shared backbone pretraining.
    pub data_seed: u64,
    pub base_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sample_steps: usize,
    pub sample_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            filter: FilterRules::default(),
            clips: 512,
            test_count: 32,
            data_seed: 0,
            base_steps: 500,
            stage1_steps: 250,
            stage2_steps: 250,
            batch_size: 4,
            lr: 2e-3,
            sample_steps: 10,
            sample_batch: 8,
        }
    }
}

/// Curated clips plus the backbone pretrained on them, shared by every trial.
pub struct AblationSetup {
    pub train: Vec<TrainExample>,
    pub test: Vec<TrainExample>,
    pub test_ids: Vec<String>,
    pub backbone: ParameterStore<f32>,
}

/// One trial's three reports, in text-only, coarse, full order.
#[derive(Debug, Clone)]
pub struct AblationTrial {
    pub seed: u64,
    pub text_only: MetricReport,
    pub coarse: MetricReport,
    pub full: MetricReport,
}

impl AblationTrial {
    /// `full > coarse > text-only` on both image-alignment scores.
    pub fn ordered(&self) -> bool {
        let (t, c, f) = (&self.text_only, &self.coarse, &self.full);
        f.clip_image > c.clip_image && c.clip_image > t.clip_image && f.dino > c.dino && c.dino > t.dino
    }
}

/// Generates and curates the clip store, then pretrains the backbone once.
pub fn ablation_setup(cfg: &AblationConfig) -> Result<AblationSetup> {
    let mut clips = synth_generate(cfg.clips, cfg.data_seed, &cfg.synth)?;
    curate(&mut clips, &cfg.filter, cfg.test_count, cfg.data_seed)?;
    let mut model = VideoBooth::<f32>::new(cfg.model.clone(), cfg.data_seed)?;
    let train = examples_from_clips(&model, &clips, Split::Train)?;
    let test = examples_from_clips(&model, &clips, Split::Test)?;
    let test_ids = clips
        .iter()
        .filter(|c| c.meta.split == Split::Test)
        .map(|c| c.meta.clip_id.clone())
        .collect();
    let plan = StagePlan::new(Stage::Base, cfg.base_steps, cfg.batch_size, cfg.lr, cfg.data_seed);
    run_stage(&mut model, &train, &plan, Some(&mut log_progress(Stage::Base)))?;
    Ok(AblationSetup {
        train,
        test,
        test_ids,
        backbone: model.store,
    })
}

fn log_progress(stage: Stage) -> impl FnMut(usize, &StepReport) {
    move |i, r| {
        if i % 50 == 0 {
            log::info!("{} step {i} loss {:.4}", stage.as_str(), r.loss);
        }
    }
}

/// Fresh mapper for `seed` on the shared backbone, stage 1 then stage 2,
/// scoring each model along the way.
pub fn ablation_trial(cfg: &AblationConfig, setup: &AblationSetup, seed: u64) -> Result<AblationTrial> {
    let mut model = VideoBooth::<f32>::new(cfg.model.clone(), seed)?;
    for (name, e) in setup.backbone.iter() {
        if !name.starts_with("mapper.") {
            model.store.set(name, e.value.clone())?;
        }
    }
    let bundles: Vec<&PromptBundle> = setup.test.iter().map(|e| &e.bundle).collect();
    let evaluate = |model: &VideoBooth<f32>, name: &str, mode: ConditionMode| -> Result<MetricReport> {
        let s = GenerationSettings {
            mode,
            injection: InjectionOptions::default(),
            sampler: SamplerOptions::default(),
            steps: cfg.sample_steps,
            seed,
            batch: cfg.sample_batch,
            refiner: false,
        };
        let latents = generate(model, &bundles, &s)?;
        score(model, name, &setup.test_ids, &bundles, &latents)
    };
    let text_only = evaluate(&model, "text-only", ConditionMode::TextOnly)?;
    let stage1 = StagePlan::new(Stage::Stage1, cfg.stage1_steps, cfg.batch_size, cfg.lr, seed.wrapping_mul(10) + 1);
    run_stage(&mut model, &setup.train, &stage1, Some(&mut log_progress(Stage::Stage1)))?;
    let coarse = evaluate(&model, "coarse", ConditionMode::Coarse)?;
    let stage2 = StagePlan::new(Stage::Stage2, cfg.stage2_steps, cfg.batch_size, cfg.lr, seed.wrapping_mul(10) + 2);
    run_stage(&mut model, &setup.train, &stage2, Some(&mut log_progress(Stage::Stage2)))?;
    let full = evaluate(&model, "full", ConditionMode::Full)?;
    Ok(AblationTrial {
        seed,
        text_only,
        coarse,
        full,
    })
}
