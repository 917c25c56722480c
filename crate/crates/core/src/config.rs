//! The TOML run configuration shared by every command.
//!
//! Unknown keys are rejected at every level. Each command writes the fully
//! resolved configuration, including the invocation that produced it, next
//! to its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, FilterRules, SynthConfig};
use crate::diffusion::SamplerOptions;
use crate::error::{Error, Result};
use crate::injection::InjectionOptions;
use crate::model::{ConditionMode, ModelConfig};
use crate::refiner::RefinerConfig;
use crate::trainer::{Stage, StagePlan};

pub const RESOLVED_CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Root seed: model initialization and data generation.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub refiner: RefinerConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub features: Features,
    /// Filled in by the command that wrote this file; ignored on input.
    pub invocation: Option<Invocation>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips: usize,
    pub test_count: usize,
    pub synth: SynthConfig,
    pub filter: FilterRules,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            clips: 512,
            test_count: 32,
            synth: SynthConfig::default(),
            filter: FilterRules::default(),
        }
    }
}

/// Optimizer settings of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Overrides the stage's default tag set.
    pub tags: Option<Vec<String>>,
    pub train_text_kv: bool,
}

impl StageSettings {
    fn with(steps: usize, lr: f64) -> Self {
        StageSettings {
            steps,
            batch_size: 4,
            lr,
            tags: None,
            train_text_kv: false,
        }
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings::with(100, 2e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seed of batch order and training noise.
    pub seed: u64,
    pub base: StageSettings,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub unified: StageSettings,
    pub refiner: StageSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 100,
            base: StageSettings::with(200, 2e-3),
            stage1: StageSettings::with(100, 2e-3),
            stage2: StageSettings::with(100, 2e-3),
            unified: StageSettings::with(200, 2e-3),
            refiner: StageSettings::with(100, 2e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub batch: usize,
    /// Conditioning mode; by default derived from the checkpoint's last stage.
    pub mode: Option<ConditionMode>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 10,
            batch: 8,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Features {
    /// Attention injection of the image prompt.
    pub injection: bool,
    /// Frame `i` reads the updated values of frame `i - 1`.
    pub recursive_values: bool,
    /// Train stage 1 and stage 2 parameters jointly instead of in sequence.
    pub unified_training: bool,
    pub watermark_removal: bool,
    /// Re-noise the prompt latent at every sampling step.
    pub fresh_prompt_noise: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features {
            injection: true,
            recursive_values: false,
            unified_training: false,
            watermark_removal: false,
            fresh_prompt_noise: false,
        }
    }
}

impl Features {
    pub fn injection_options(&self) -> InjectionOptions {
        InjectionOptions {
            enabled: self.injection,
            recursive: self.recursive_values,
        }
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            fresh_prompt_noise: self.fresh_prompt_noise,
        }
    }
}

/// The command and arguments that produced a set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub command: String,
    pub version: String,
    pub args: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.data.synth;
        if s.height != self.model.unet.height || s.width != self.model.unet.width || s.frames != self.model.unet.frames {
            return Err(Error::Config(format!(
                "clips are {}x{}x{} but the model expects {}x{}x{}",
                s.frames, s.height, s.width, self.model.unet.frames, self.model.unet.height, self.model.unet.width
            )));
        }
        if self.sample.steps == 0 || self.sample.batch == 0 {
            return Err(Error::Config("sampling steps and batch must be positive".into()));
        }
        for st in [Stage::Base, Stage::Stage1, Stage::Stage2, Stage::Unified, Stage::Refiner] {
            if self.train.settings(st).batch_size == 0 {
                return Err(Error::Config(format!("{} batch_size must be positive", st.as_str())));
            }
        }
        Ok(())
    }

    /// The resolved plan for `stage`.
    pub fn plan(&self, stage: Stage) -> StagePlan {
        let s = self.train.settings(stage);
        let mut plan = StagePlan::new(stage, s.steps, s.batch_size, s.lr, self.train.seed);
        if let Some(tags) = &s.tags {
            plan.tags = tags.clone();
        }
        plan.train_text_kv = s.train_text_kv;
        plan.injection = self.features.injection_options();
        plan
    }

    /// Stages run when no single stage is requested.
    pub fn default_stages(&self) -> Vec<Stage> {
        if self.features.unified_training {
            vec![Stage::Base, Stage::Unified]
        } else {
            vec![Stage::Base, Stage::Stage1, Stage::Stage2]
        }
    }

    /// Writes the resolved configuration with `invocation` to `path`.
    pub fn write_resolved(&self, path: &Path, invocation: Invocation) -> Result<()> {
        let mut cfg = self.clone();
        cfg.invocation = Some(invocation);
        write_atomic(path, cfg.to_toml()?.as_bytes())
    }
}

impl TrainConfig {
    pub fn settings(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::Base => &self.base,
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
            Stage::Unified => &self.unified,
            Stage::Refiner => &self.refiner,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[features]\ninjektion = false"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[model.unet]\nbase = 8\nwat = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::parse("seed = 5\n[features]\nrecursive_values = true").unwrap();
        cfg.invocation = Some(Invocation {
            command: "sample".into(),
            version: "0.1.0".into(),
            args: [("seed".to_string(), "3".to_string())].into(),
        });
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.features.injection_options().recursive);
    }

    #[test]
    fn mismatched_clip_size_is_a_config_error() {
        assert!(matches!(RunConfig::parse("[data.synth]\nheight = 16"), Err(Error::Config(_))));
    }
}
