//! Noise schedule, forward noising, the ε-prediction loss and an ancestral
//! sampler over a respaced subset of timesteps.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `ᾱ_0 = 1` by convention.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_str, Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear β schedule; `ᾱ_t = Π_{s≤t} (1 − β_s)` accumulated in f64.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Contract("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Contract(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::Schedule(format!("timestep {t} outside [1, {}]", self.steps()))),
        }
    }

    fn check_t(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::Schedule(format!("timestep 0 outside [1, {}]", self.steps())));
        }
        self.alpha_bar_at(t)
    }

    /// A uniform training timestep in `[1, T]`.
    pub fn sample_timestep(&self, rng: &mut RngStream) -> usize {
        1 + rng.below(self.steps())
    }

    /// `steps` distinct timesteps from `T` down to 1, evenly spaced.
    pub fn respaced(&self, steps: usize) -> Vec<usize> {
        let t = self.steps();
        let steps = steps.min(t);
        if steps == 0 {
            return Vec::new();
        }
        if steps == 1 {
            return vec![t];
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| {
                let x = t as f64 - (t - 1) as f64 * i as f64 / (steps - 1) as f64;
                x.round() as usize
            })
            .collect();
        out.dedup();
        out
    }
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn forward_noise<T: Real>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ab = schedule.check_t(t)?;
    noise_with(x0, eps, ab)
}

fn noise_with<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    x0.expect_same_shape(eps)?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| T::of(a * x.as_f64() + s * e.as_f64()))
}

/// Per-sample forward noising of a batch along axis 0.
pub fn forward_noise_batch<T: Real>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    x0.expect_same_shape(eps)?;
    let b = x0.shape().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::dim(format!("{} timesteps for a batch of {b}", ts.len())));
    }
    let per = if b == 0 { 0 } else { x0.numel() / b };
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.check_t(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * per..(i + 1) * per;
        out.extend(
            x0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(x, e)| T::of(a * x.as_f64() + s * e.as_f64())),
        );
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_loss<T: Real>(g: &Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts {
        return Err(Error::dim(format!(
            "ε loss: prediction {} vs target {}",
            shape_str(&ps),
            shape_str(&ts)
        )));
    }
    g.mse(pred, target)
}

/// Anything that predicts ε from a noisy latent.
///
/// `prompt_t` is the image-prompt latent already noised to the same `t`
/// (absent when the model has no image prompt).
pub trait EpsModel<T: Real = f32> {
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, prompt_t: Option<&Tensor<T>>) -> Result<Tensor<T>>;
}

impl<T: Real, F> EpsModel<T> for F
where
    F: Fn(&Tensor<T>, usize, Option<&Tensor<T>>) -> Result<Tensor<T>>,
{
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, prompt_t: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self(x_t, t, prompt_t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SamplerOptions {
    /// Draw a fresh prompt-latent noise at every step instead of one per generation.
    pub fresh_prompt_noise: bool,
}


/// One ancestral step from `ᾱ` to `ᾱ_prev` given the predicted noise.
/// With `ᾱ_prev = 1` it returns the `x0` estimate exactly.
pub fn ddpm_step<T: Real>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    x_t.expect_same_shape(eps)?;
    let (sa, s1) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let beta = 1.0 - alpha_bar / alpha_bar_prev;
    let c0 = alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar);
    let ct = (1.0 - beta).sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar);
    let sigma = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta).max(0.0).sqrt();
    let mean: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(x, e)| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let x0 = (x - s1 * e) / sa;
            if alpha_bar_prev >= 1.0 {
                x0
            } else {
                c0 * x0 + ct * x
            }
        })
        .collect();
    let out = match noise {
        Some(z) if sigma > 0.0 => {
            x_t.expect_same_shape(z)?;
            mean.iter().zip(z.data().iter()).map(|(m, z)| T::of(m + sigma * z.as_f64())).collect()
        }
        _ => mean.into_iter().map(T::of).collect(),
    };
    Tensor::new(x_t.shape().to_vec(), out)
}

/// Ancestral sampling over `steps` respaced timesteps from seeded noise of
/// `shape`. `steps = 0` returns that initial noise.
pub fn sample_video<T: Real, M: EpsModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: &[usize],
    prompt_latent: Option<&Tensor<T>>,
    seed: u64,
    steps: usize,
    opts: SamplerOptions,
) -> Result<Tensor<T>> {
    let root = RngStream::new(seed);
    let mut init_rng = root.split(0);
    let mut prompt_rng = root.split(1);
    let mut step_rng = root.split(2);
    let mut x = init_rng.normal_tensor(shape.to_vec());
    let fixed_prompt_eps = prompt_latent.map(|p| prompt_rng.normal_tensor(p.shape().to_vec()));
    let ts = schedule.respaced(steps);
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar_at(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tn) => schedule.alpha_bar_at(tn)?,
            None => 1.0,
        };
        let prompt_t = match (prompt_latent, &fixed_prompt_eps) {
            (Some(p), Some(fixed)) => {
                let eps = if opts.fresh_prompt_noise {
                    prompt_rng.normal_tensor(p.shape().to_vec())
                } else {
                    fixed.clone()
                };
                Some(noise_with(p, &eps, ab)?)
            }
            _ => None,
        };
        let eps = model.predict_eps(&x, t, prompt_t.as_ref())?;
        if !eps.all_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t = {t}")));
        }
        let z = step_rng.normal_tensor(shape.to_vec());
        x = ddpm_step(&x, &eps, ab, ab_prev, Some(&z))?;
    }
    Ok(x)
}
