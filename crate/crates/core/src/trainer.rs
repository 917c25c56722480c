//! Stage plans, parameter gating, Adam and checkpoints.
//!
//! Training runs in stages. `base` stands in for the pretrained text-to-video
//! backbone; `stage1` trains the coarse path (mapper plus text K/V);
//! `stage2` trains only the injection projections; `unified` trains both
//! paths at once and exists for the ablation; `refiner` fine-tunes the
//! watermark refiner plus the output convolution.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{epsilon_loss, forward_noise_batch, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::injection::InjectionOptions;
use crate::model::{stack, ConditionMode, ModelConfig, PromptBundle, VideoBooth};
use crate::params::{Binding, ParameterStore, StageTag};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::unet::text_kv_names;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Stage1,
    Stage2,
    Unified,
    Refiner,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Unified => "unified",
            Stage::Refiner => "refiner",
        }
    }

    /// Tags whose entries this stage trains.
    pub fn default_tags(self) -> Vec<String> {
        let tags: &[&str] = match self {
            Stage::Base => &["base"],
            Stage::Stage1 => &["stage1"],
            Stage::Stage2 => &["stage2"],
            Stage::Unified => &["stage1", "stage2"],
            Stage::Refiner => &["refiner"],
        };
        tags.iter().map(|s| s.to_string()).collect()
    }

    pub fn default_mode(self) -> ConditionMode {
        match self {
            Stage::Base => ConditionMode::TextOnly,
            Stage::Stage1 => ConditionMode::Coarse,
            Stage::Stage2 | Stage::Unified | Stage::Refiner => ConditionMode::Full,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "unified" => Ok(Stage::Unified),
            "refiner" => Ok(Stage::Refiner),
            other => Err(Error::Plan(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    /// Stage tags to train, by name.
    pub tags: Vec<String>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: ConditionMode,
    /// Keep training the text cross-attention K/V in stage 2.
    pub train_text_kv: bool,
    pub injection: InjectionOptions,
}

impl StagePlan {
    pub fn new(stage: Stage, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        StagePlan {
            stage,
            tags: stage.default_tags(),
            steps,
            batch_size,
            lr,
            seed,
            mode: stage.default_mode(),
            train_text_kv: false,
            injection: InjectionOptions::default(),
        }
    }

    fn parsed_tags(&self) -> Result<Vec<StageTag>> {
        self.tags
            .iter()
            .map(|t| {
                StageTag::from_str(t).map_err(|_| Error::Plan(format!("unknown stage tag `{t}`")))
            })
            .collect()
    }
}

/// Exactly the names a plan may update.
///
/// `base` additionally trains the text K/V (they belong to the backbone
/// being pretrained); `refiner` additionally trains the output convolution.
pub fn select_trainable<T: Real>(store: &ParameterStore<T>, plan: &StagePlan) -> Result<BTreeSet<String>> {
    let tags = plan.parsed_tags()?;
    let mut out: BTreeSet<String> = store
        .iter()
        .filter(|(_, e)| tags.contains(&e.tag))
        .map(|(n, _)| n.to_string())
        .collect();
    let names = || store.names().map(str::to_string);
    match plan.stage {
        Stage::Base if !tags.is_empty() => out.extend(text_kv_names(names())),
        Stage::Stage2 if plan.train_text_kv => out.extend(text_kv_names(names())),
        Stage::Refiner if !tags.is_empty() => {
            out.extend(["conv_out.w".to_string(), "conv_out.b".to_string()]);
        }
        _ => {}
    }
    if plan.stage == Stage::Base {
        // the coarse mapper is not part of the backbone
        out.retain(|n| !n.starts_with("mapper."));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_update<T: Real>(
    store: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(m) = state.m.get(name) {
            if m.len() != p.numel() {
                return Err(Error::dim(format!("optimizer state for `{name}` has the wrong size")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = store.get(name)?;
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let gi = g.data()[i].as_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let step = lr * mh / (vh.sqrt() + cfg.eps);
            next.push(if step == 0.0 { p.data()[i] } else { T::of(p.data()[i].as_f64() - step) });
        }
        let shape = p.shape().to_vec();
        store.set(name, Tensor::new(shape, next)?)?;
    }
    Ok(())
}

/// One training clip: its latent `[4, F, H, W]`, the clean target latent
/// when it differs (watermark fine-tuning) and its prompt bundle.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub latent: Tensor<f32>,
    pub target: Option<Tensor<f32>>,
    pub bundle: PromptBundle,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Noises the batch, predicts ε, applies one Adam step to `trainable`.
///
/// For watermark fine-tuning the target `x0` is the clean latent while the
/// prompt still comes from the watermarked clip.
pub fn train_step<T: Real>(
    model: &mut VideoBooth<T>,
    batch: &[&TrainExample],
    plan: &StagePlan,
    trainable: &BTreeSet<String>,
    adam: &mut AdamState,
    rng: &mut RngStream,
) -> Result<StepReport> {
    let (loss, grads) = loss_and_grads(model, batch, plan, trainable, rng)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at step {} of {}",
            adam.step + 1,
            plan.stage.as_str()
        )));
    }
    let grad_norm = grads
        .values()
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {}", adam.step + 1)));
    }
    adam_update(&mut model.store, &grads, adam, plan.lr, AdamConfig::default())?;
    Ok(StepReport { loss, grad_norm })
}

/// The denoising loss on one batch and its gradients for `trainable`.
pub fn loss_and_grads<T: Real>(
    model: &VideoBooth<T>,
    batch: &[&TrainExample],
    plan: &StagePlan,
    trainable: &BTreeSet<String>,
    rng: &mut RngStream,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let schedule = &model.schedule;
    let ts: Vec<usize> = batch.iter().map(|_| schedule.sample_timestep(rng)).collect();
    let x0s: Vec<Tensor<T>> = batch
        .iter()
        .map(|e| e.target.as_ref().unwrap_or(&e.latent).cast::<T>())
        .collect();
    let x0 = stack(&x0s.iter().collect::<Vec<_>>())?;
    let eps = rng.normal_tensor::<T>(x0.shape().to_vec());
    let x_t = forward_noise_batch(schedule, &x0, &ts, &eps)?;
    let needs_prompt = plan.mode.uses_injection() && plan.injection.enabled;
    let prompt_t = if needs_prompt {
        let ps: Vec<Tensor<T>> = batch.iter().map(|e| e.bundle.prompt_latent.cast::<T>()).collect();
        let p0 = stack(&ps.iter().collect::<Vec<_>>())?;
        let pe = rng.normal_tensor::<T>(p0.shape().to_vec());
        Some(forward_noise_batch(schedule, &p0, &ts, &pe)?)
    } else {
        None
    };
    let g = Graph::new();
    let b = Binding::new(&g, &model.store, trainable.clone());
    let bundles: Vec<&PromptBundle> = batch.iter().map(|e| &e.bundle).collect();
    let xv = g.constant(x_t);
    let pv = prompt_t.map(|p| g.constant(p));
    let refiner = plan.stage == Stage::Refiner || model.has_refiner();
    let pred = model.predict_eps_graph(&b, xv, &ts, &bundles, pv, plan.mode, plan.injection, refiner)?;
    let target = g.constant(eps);
    let loss = epsilon_loss(&g, pred, target)?;
    let loss_value = g.value(loss).item()?.as_f64();
    if trainable.is_empty() || !loss_value.is_finite() {
        let zeros = trainable
            .iter()
            .map(|n| Ok((n.clone(), Tensor::zeros(model.store.get(n)?.shape().to_vec()))))
            .collect::<Result<_>>()?;
        return Ok((loss_value, zeros));
    }
    let grads = g.backward(loss)?;
    Ok((loss_value, b.gradients(&grads)))
}

/// Per-step progress callback: `(step, report)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, &StepReport);

/// Runs a whole stage over `data`, drawing batches without replacement per epoch.
pub fn run_stage<T: Real>(
    model: &mut VideoBooth<T>,
    data: &[TrainExample],
    plan: &StagePlan,
    mut progress: Option<Progress<'_>>,
) -> Result<Vec<f64>> {
    if plan.batch_size == 0 {
        return Err(Error::Plan("batch_size must be positive".into()));
    }
    if plan.stage == Stage::Refiner && !model.has_refiner() {
        return Err(Error::Plan("refiner stage on a model without a refiner".into()));
    }
    let trainable = select_trainable(&model.store, plan)?;
    if plan.steps > 0 && data.is_empty() {
        return Err(Error::Plan("no training data".into()));
    }
    let root = RngStream::new(plan.seed);
    let mut order_rng = root.split(20);
    let mut noise_rng = root.split(21);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let mut batch = Vec::with_capacity(plan.batch_size);
        while batch.len() < plan.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order_rng.shuffle(&mut order);
            }
            batch.push(&data[order.pop().expect("refilled above")]);
        }
        let report = train_step(model, &batch, plan, &trainable, &mut adam, &mut noise_rng)?;
        losses.push(report.loss);
        if let Some(cb) = progress.as_mut() {
            cb(step, &report);
        }
    }
    if plan.stage == Stage::Base && plan.steps > 0 {
        // the injection projections are created from the freshly pretrained backbone
        model.reset_injection_projections()?;
    }
    Ok(losses)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VBCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Stages applied so far, oldest first.
    pub stages: Vec<Stage>,
    /// Parameter digest of the checkpoint this one was trained from.
    pub ancestor_digest: Option<String>,
    pub seeds: Vec<u64>,
    pub injection: InjectionOptions,
    /// `(name, tag)` of every tensor blob, in file order.
    pub entries: Vec<(String, StageTag)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn from_model(
        model: &VideoBooth<f32>,
        stages: Vec<Stage>,
        ancestor_digest: Option<String>,
        seeds: Vec<u64>,
        injection: InjectionOptions,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config_hash: model.config.config_hash(),
                model: model.config.clone(),
                schedule: model.config.schedule.clone(),
                stages,
                ancestor_digest,
                seeds,
                injection,
                entries: model.store.iter().map(|(n, e)| (n.to_string(), e.tag)).collect(),
            },
            store: model.store.clone(),
        }
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format {
            path: "<checkpoint>".into(),
            msg: e.to_string(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, _) in &self.header.entries {
            self.store.get(name)?.write_to(&mut out).map_err(|e| Error::io("<checkpoint>", e))?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Version("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Version("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Version("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::Version("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len]).map_err(|e| Error::Version(format!("bad checkpoint header: {e}")))?;
        r = &r[len..];
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {} unsupported", header.version)));
        }
        if header.config_hash != header.model.config_hash() {
            return Err(Error::Version("checkpoint config hash does not match its config".into()));
        }
        if header.schedule != header.model.schedule {
            return Err(Error::Version("checkpoint schedule record is inconsistent".into()));
        }
        let mut store = ParameterStore::new();
        for (name, tag) in &header.entries {
            let t = Tensor::<f32>::read_from(&mut r)?;
            store.insert(name.clone(), t, *tag)?;
        }
        if !r.is_empty() {
            return Err(Error::Version("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Checkpoint { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rejects checkpoints built for a different architecture or schedule.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        if self.header.config_hash != expected.config_hash() {
            return Err(Error::Version(format!(
                "checkpoint config hash {} does not match run config {}",
                &self.header.config_hash[..12],
                &expected.config_hash()[..12]
            )));
        }
        if self.header.schedule != expected.schedule {
            return Err(Error::Version("checkpoint noise schedule differs from the run config".into()));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<VideoBooth<f32>> {
        VideoBooth::from_store(self.header.model, self.store)
    }
}

/// Names whose values differ between two stores.
pub fn changed_entries<T: Real>(a: &ParameterStore<T>, b: &ParameterStore<T>) -> BTreeSet<String> {
    let (ha, hb) = (a.hashes(), b.hashes());
    ha.keys()
        .chain(hb.keys())
        .filter(|k| ha.get(*k) != hb.get(*k))
        .cloned()
        .collect()
}

/// Schedule shared by every model built from `cfg`.
pub fn schedule_of(cfg: &ModelConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::from_config(&cfg.schedule)
}
