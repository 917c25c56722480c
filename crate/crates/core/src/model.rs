//! The full image-prompt video model: frozen encoders, the parameter store
//! and the conditioning modes wired into one ε predictor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::codec;
use crate::conditioning::{
    batch_conditions, fuse, init_mapper, map_to_text_space, null_rows, ComposedCondition, EncoderConfig,
    ImageEncoder, TextEncoder, TextTokenSeq, Vocabulary,
};
use crate::dataset::{parse_subject_span, ADJECTIVES, DETERMINERS, EXTRA_NOUNS, KEYWORD_CLASSES};
use crate::diffusion::{EpsModel, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::injection::InjectionOptions;
use crate::params::{Binding, ParameterStore, StageTag};
use crate::refiner::{build_refiner, RefinerConfig, REFINER_PROBE};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::unet::{init_unet, CondInput, InjectionInput, UNet, UNetConfig, UNetInputs};

/// How the image prompt reaches the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Caption only; the image prompt is ignored.
    TextOnly,
    /// `f_I` replaces the subject words in the caption.
    Coarse,
    /// Caption only, plus attention injection.
    Fine,
    /// Coarse embedding and attention injection.
    Full,
}

impl ConditionMode {
    pub fn uses_coarse(self) -> bool {
        matches!(self, ConditionMode::Coarse | ConditionMode::Full)
    }

    pub fn uses_injection(self) -> bool {
        matches!(self, ConditionMode::Fine | ConditionMode::Full)
    }
}

/// Architecture of a model; everything a checkpoint must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    /// Seed of the second frozen image embedder used by the DINO-like metric.
    pub dino_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            unet: UNetConfig::default(),
            encoder: EncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            dino_seed: 0xd1_0005,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.encoder.validate()?;
        if self.unet.context_dim != self.encoder.d_txt {
            return Err(Error::Config(format!(
                "unet context_dim {} must equal encoder d_txt {}",
                self.unet.context_dim, self.encoder.d_txt
            )));
        }
        if self.unet.latent_channels != codec::LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "the linear codec produces {} latent channels",
                codec::LATENT_CHANNELS
            )));
        }
        if self.encoder.image_channels != codec::PIXEL_CHANNELS {
            return Err(Error::Config("image encoder must take RGB input".into()));
        }
        NoiseSchedule::from_config(&self.schedule).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Hash of the architecture (backbone and encoders).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.unet, &self.encoder)).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// The default vocabulary: every word the generator and parser know.
pub fn default_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    words.extend(KEYWORD_CLASSES);
    words.extend(EXTRA_NOUNS);
    words.extend(DETERMINERS);
    words.extend(ADJECTIVES);
    words.extend([
        "runs", "across", "field", "walks", "slowly", "plays", "outside", "moves", "forward", "wanders", "around",
        "turns", "back", "celebrates", "birthday", "with", "gifts", "drives", "fast", "sunset", "over", "ocean",
        "in", "on", "and", "park", "street", "snow", "water", "jumps", "sits",
    ]);
    Vocabulary::new(words)
}

/// Everything the model needs about one subject: caption, span and prompt.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub caption: String,
    pub tokens: TextTokenSeq,
    /// `(k, n)` of the subject words.
    pub span: (usize, usize),
    /// `[P, P, 3]` clean-background subject crop.
    pub prompt_image: Tensor<f32>,
    /// `[4, 1, H, W]`.
    pub prompt_latent: Tensor<f32>,
}

pub struct VideoBooth<T: Real = f32> {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub store: ParameterStore<T>,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl<T: Real> VideoBooth<T> {
    /// Fresh parameters for every trainable module; frozen encoders from the config seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut store = ParameterStore::new();
        init_unet(&config.unet, &mut store, &mut root.split(10))?;
        init_mapper(&config.encoder, &mut store, &mut root.split(11))?;
        VideoBooth::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, store: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        let vocab = default_vocabulary();
        if vocab.len() > config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} words exceeds vocab_size {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        Ok(VideoBooth {
            schedule: NoiseSchedule::from_config(&config.schedule)?,
            text: TextEncoder::new(&config.encoder),
            image: ImageEncoder::from_config(&config.encoder),
            vocab,
            store,
            config,
        })
    }

    /// The DINO-analogue embedder (independent frozen projection).
    pub fn dino_encoder(&self) -> ImageEncoder {
        let e = &self.config.encoder;
        ImageEncoder::new(e.image_patch, e.image_channels, e.d_img, self.config.dino_seed)
    }

    pub fn has_refiner(&self) -> bool {
        self.store.contains(REFINER_PROBE)
    }

    /// Adds the zero-initialized watermark refiner.
    pub fn add_refiner(&mut self, cfg: &RefinerConfig, seed: u64) -> Result<()> {
        if self.has_refiner() {
            return Err(Error::State("refiner already built".into()));
        }
        let u = &self.config.unet;
        build_refiner(cfg, u.height, u.width, &mut self.store, &mut RngStream::new(seed).split(12))
    }

    /// Re-creates every injection projection as a copy of its base K/V projection.
    pub fn reset_injection_projections(&mut self) -> Result<()> {
        let names: Vec<String> = self.store.names_with_tag(StageTag::Stage2);
        for name in names {
            let base = name.replace(".inj_k", ".k").replace(".inj_v", ".v");
            let value = self.store.get(&base)?.clone();
            self.store.set(&name, value)?;
        }
        Ok(())
    }

    /// Tokenizes a caption, locates its subject and encodes the prompt image.
    pub fn bundle(&self, caption: &str, prompt_image: &Tensor<f32>) -> Result<PromptBundle> {
        let parse = parse_subject_span(caption)?;
        self.bundle_with_span(caption, (parse.k, parse.n), prompt_image)
    }

    pub fn bundle_with_span(&self, caption: &str, span: (usize, usize), prompt_image: &Tensor<f32>) -> Result<PromptBundle> {
        let u = &self.config.unet;
        let s = prompt_image.shape();
        if s != [u.height, u.width, codec::PIXEL_CHANNELS] {
            return Err(Error::dim(format!(
                "prompt image {:?} must be [{}, {}, 3]",
                s, u.height, u.width
            )));
        }
        let tokens = self.vocab.tokenize(caption, self.config.encoder.max_tokens)?;
        if span.0 + span.1 > tokens.len() || span.1 == 0 {
            return Err(Error::Span {
                k: span.0,
                n: span.1,
                len: tokens.len(),
            });
        }
        Ok(PromptBundle {
            caption: caption.to_string(),
            tokens,
            span,
            prompt_image: prompt_image.clone(),
            prompt_latent: codec::encode_image(prompt_image)?,
        })
    }

    /// Condition rows for a batch of bundles under `mode`.
    pub fn condition(&self, b: &Binding<'_, T>, bundles: &[&PromptBundle], mode: ConditionMode) -> Result<CondInput> {
        let g = b.graph;
        let max = self.config.encoder.max_tokens;
        let pads = null_rows::<T>(&self.text, max)?;
        let f_i = if mode.uses_coarse() {
            let mut fv = Vec::new();
            for bd in bundles {
                fv.extend(self.image.encode(&bd.prompt_image.cast::<T>())?.to_vec());
            }
            let fv = g.constant(Tensor::new(vec![bundles.len(), self.config.encoder.d_img], fv)?);
            Some(map_to_text_space(b, fv)?)
        } else {
            None
        };
        let mut conds = Vec::with_capacity(bundles.len());
        for (i, bd) in bundles.iter().enumerate() {
            let f_t = self.text.encode::<T>(&bd.tokens)?;
            let c = match f_i {
                Some(fi) => {
                    let row = g.narrow(fi, 0, i, 1)?;
                    let (k, n) = bd.span;
                    fuse(g, g.constant(f_t), bd.tokens.len(), row, k, n, &pads)?
                }
                None => ComposedCondition::text_only(g, &f_t, &bd.tokens),
            };
            conds.push(c);
        }
        let (tokens, mask) = batch_conditions(g, &conds)?;
        Ok(CondInput { tokens, mask })
    }

    /// ε prediction for `x_t` `[B, 4, F, H, W]`; `prompt_t` `[B, 4, 1, H, W]`
    /// is required by the injection modes.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_eps_graph(
        &self,
        b: &Binding<'_, T>,
        x_t: Var,
        timesteps: &[usize],
        bundles: &[&PromptBundle],
        prompt_t: Option<Var>,
        mode: ConditionMode,
        injection: InjectionOptions,
        refiner: bool,
    ) -> Result<Var> {
        let cond = self.condition(b, bundles, mode)?;
        let net = UNet::new(&self.config.unet, b);
        let inj = if mode.uses_injection() && injection.enabled {
            let p = prompt_t.ok_or_else(|| Error::State("injection requires a noised prompt latent".into()))?;
            Some(InjectionInput {
                pyramid: net.extract_prompt_pyramid(p, timesteps, &cond)?,
                options: injection,
            })
        } else {
            None
        };
        net.forward(
            x_t,
            &UNetInputs {
                timesteps,
                cond: &cond,
                injection: inj.as_ref(),
                refiner,
            },
        )
    }

    /// Names trained by the injection-free modes never include these.
    pub fn injection_names(&self) -> BTreeSet<String> {
        self.store.names_with_tag(StageTag::Stage2).into_iter().collect()
    }
}

/// Stacks `[C, ...]` tensors into `[B, C, ...]`.
pub fn stack<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::dim("stacked tensors must share a shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Item `i` of a `[B, ...]` tensor.
pub fn unstack<T: Real>(t: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.is_empty() || i >= s[0] {
        return Err(Error::dim(format!("item {i} of {:?}", s)));
    }
    let per = t.numel() / s[0];
    Tensor::new(s[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec())
}

/// Adapts a model, a batch of bundles and a mode to the sampler.
pub struct Conditioned<'a, T: Real> {
    pub model: &'a VideoBooth<T>,
    pub bundles: Vec<&'a PromptBundle>,
    pub mode: ConditionMode,
    pub injection: InjectionOptions,
    pub refiner: bool,
}

impl<T: Real> Conditioned<'_, T> {
    /// Stacked prompt latents `[B, 4, 1, H, W]`.
    pub fn prompt_latents(&self) -> Result<Tensor<T>> {
        let cast: Vec<Tensor<T>> = self.bundles.iter().map(|b| b.prompt_latent.cast::<T>()).collect();
        stack(&cast.iter().collect::<Vec<_>>())
    }

    /// Latent shape of the batch, `[B, 4, F, H, W]`.
    pub fn latent_shape(&self) -> Vec<usize> {
        let u = &self.model.config.unet;
        vec![self.bundles.len(), u.latent_channels, u.frames, u.height, u.width]
    }
}

impl<T: Real> EpsModel<T> for Conditioned<'_, T> {
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, prompt_t: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = Binding::frozen(&g, &self.model.store);
        let x = g.constant(x_t.clone());
        let p = prompt_t.map(|p| g.constant(p.clone()));
        let ts = vec![t; self.bundles.len()];
        let eps = self
            .model
            .predict_eps_graph(&b, x, &ts, &self.bundles, p, self.mode, self.injection, self.refiner)?;
        Ok(g.value(eps))
    }
}
