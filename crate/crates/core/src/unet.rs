//! A tiny inflated video U-Net.
//!
//! Features use the `[B, C, F, H, W]` layout. Every resolution level in the
//! encoder path holds one inflated residual block followed, at attention
//! levels, by cross-frame attention and text cross-attention; the bottleneck
//! adds temporal attention. The decoder mirrors the encoder with skip
//! concatenation and text cross-attention at attention levels.
//!
//! Attention sites see frame batches `[B, F, N, C]` (tokens `N = H * W`).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{merge_heads, sdpa, split_heads};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_str, Error, Result};
use crate::injection::{injected_cross_frame_attention, InjectionOptions, InjectionProjection};
use crate::ops::{Conv3dSpec, KeyMask, Resample};
use crate::params::{Binding, ParameterStore, StageTag};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Levels carrying cross-frame and text attention.
    pub attention_levels: Vec<usize>,
    pub head_dim: usize,
    /// Temporal extent of the inflated kernels: 1 (1x3x3) or 3 (3x3x3).
    pub temporal_kernel: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Width of the text condition tokens.
    pub context_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 4,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            frames: 8,
            height: 32,
            width: 32,
            attention_levels: vec![1, 2],
            head_dim: 8,
            temporal_kernel: 1,
            time_embed_dim: 32,
            groups: 4,
            context_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn resolution(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Attention levels in encoder traversal order.
    pub fn attention_sites(&self) -> Vec<usize> {
        (0..self.levels()).filter(|&l| self.has_attention(l)).collect()
    }

    pub fn kernel(&self) -> [usize; 3] {
        [self.temporal_kernel, 3, 3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("unet: {m}")));
        let levels = self.levels();
        if levels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return bad("needs at least one level and nonzero channel counts".into());
        }
        let div = 1usize << (levels - 1);
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) || self.height == 0 || self.width == 0 {
            return bad(format!(
                "latent {}x{} not divisible by 2^{}",
                self.height,
                self.width,
                levels - 1
            ));
        }
        if self.temporal_kernel != 1 && self.temporal_kernel != 3 {
            return bad(format!("temporal_kernel must be 1 or 3, got {}", self.temporal_kernel));
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        for &l in &self.attention_levels {
            if l >= levels {
                return bad(format!("attention level {l} beyond {levels} levels"));
            }
            if self.head_dim == 0 || !self.channels(l).is_multiple_of(self.head_dim) {
                return bad(format!(
                    "head_dim {} does not divide {} channels at level {l}",
                    self.head_dim,
                    self.channels(l)
                ));
            }
        }
        if !self.time_embed_dim.is_multiple_of(2) || self.time_embed_dim == 0 {
            return bad("time_embed_dim must be even".into());
        }
        Ok(())
    }

    /// Guards checkpoints against incompatible weights.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Largest group count `<= max_groups` dividing `channels`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.max(1).min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Fills a store with freshly initialized parameters.
pub(crate) struct Init<'a, T: Real> {
    pub store: &'a mut ParameterStore<T>,
    pub rng: &'a mut RngStream,
}

impl<T: Real> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, tag: StageTag) -> Result<()> {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(self.rng.normal() * std));
        self.store.insert(name, t, tag)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, tag: StageTag) -> Result<()> {
        self.store.insert(name, Tensor::full(shape.to_vec(), T::of(v)), tag)
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, tag: StageTag) -> Result<()> {
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), tag)?;
        if bias {
            self.constant(&format!("{prefix}.b"), &[fan_out], 0.0, tag)?;
        }
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: [usize; 3], tag: StageTag) -> Result<()> {
        let fan_in = cin * kernel.iter().product::<usize>();
        self.normal(
            &format!("{prefix}.w"),
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            (1.0 / fan_in as f64).sqrt(),
            tag,
        )?;
        self.constant(&format!("{prefix}.b"), &[cout], 0.0, tag)
    }

    pub fn norm(&mut self, prefix: &str, channels: usize, tag: StageTag) -> Result<()> {
        self.constant(&format!("{prefix}.g"), &[channels], 1.0, tag)?;
        self.constant(&format!("{prefix}.b"), &[channels], 0.0, tag)
    }

    pub fn resblock(&mut self, prefix: &str, cin: usize, cout: usize, temb: Option<usize>, kernel: [usize; 3], tag: StageTag) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), cin, tag)?;
        self.conv(&format!("{prefix}.conv1"), cin, cout, kernel, tag)?;
        if let Some(td) = temb {
            self.linear(&format!("{prefix}.temb"), td, cout, true, tag)?;
        }
        self.norm(&format!("{prefix}.norm2"), cout, tag)?;
        self.conv(&format!("{prefix}.conv2"), cout, cout, kernel, tag)?;
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cin, cout, [1, 1, 1], tag)?;
        }
        Ok(())
    }
}

/// Projection weights of one attention site.
#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    /// `[C, C]`.
    pub q: Var,
    /// `[C_ctx, C]`; `C_ctx = C` except for text cross-attention.
    pub k: Var,
    pub v: Var,
    pub out_w: Var,
    pub out_b: Option<Var>,
    pub heads: usize,
}

impl AttnProj {
    pub fn bind<T: Real>(b: &Binding<'_, T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(AttnProj {
            q: b.p(&format!("{prefix}.q"))?,
            k: b.p(&format!("{prefix}.k"))?,
            v: b.p(&format!("{prefix}.v"))?,
            out_w: b.p(&format!("{prefix}.o.w"))?,
            out_b: Some(b.p(&format!("{prefix}.o.b"))?),
            heads,
        })
    }

    fn out<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.out_w, self.out_b)
    }
}

fn expect_rank<T: Real>(g: &Graph<T>, x: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
    let s = g.shape(x);
    if s.len() != rank {
        return Err(Error::dim(format!("{what}: expected rank {rank}, got {}", shape_str(&s))));
    }
    Ok(s)
}

/// Per-frame queries, keys and values split into heads: `[B, F, h, N, d]`.
pub(crate) fn frame_qkv<T: Real>(g: &Graph<T>, frames: Var, p: &AttnProj) -> Result<(Var, Var, Var)> {
    let q = split_heads(g, g.linear(frames, p.q, None)?, p.heads)?;
    let k = split_heads(g, g.linear(frames, p.k, None)?, p.heads)?;
    let v = split_heads(g, g.linear(frames, p.v, None)?, p.heads)?;
    Ok((q, k, v))
}

/// Output of the per-frame attention `[B, F, h, N, d]` merged and projected to `[B, F, N, C]`.
pub(crate) fn frame_output<T: Real>(g: &Graph<T>, heads_out: Var, p: &AttnProj) -> Result<Var> {
    let merged = merge_heads(g, heads_out)?;
    p.out(g, merged)
}

/// Cross-frame attention: frame `i` attends to the keys and values of the
/// first frame and of frame `i - 1`; frame 0 attends to itself only.
///
/// `frames` is `[B, F, N, C]`; the result has the same shape and includes
/// the output projection but no residual.
pub fn cross_frame_attention_base<T: Real>(g: &Graph<T>, frames: Var, p: &AttnProj) -> Result<Var> {
    let s = expect_rank(g, frames, 4, "cross-frame attention")?;
    let f = s[1];
    if f == 0 {
        return Err(Error::dim("cross-frame attention needs at least one frame"));
    }
    let (q, k, v) = frame_qkv(g, frames, p)?;
    let q0 = g.narrow(q, 1, 0, 1)?;
    let k0 = g.narrow(k, 1, 0, 1)?;
    let v0 = g.narrow(v, 1, 0, 1)?;
    let out0 = sdpa(g, q0, k0, v0, None)?;
    let out = if f > 1 {
        let rest = rest_frames_base(g, q, k, v, k0, v0)?;
        g.concat(&[out0, rest], 1)?
    } else {
        out0
    };
    frame_output(g, out, p)
}

/// Frames `1..F` against `[K_0; K_{i-1}]` and `[V_0; V_{i-1}]`.
pub(crate) fn rest_frames_base<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var, k0: Var, v0: Var) -> Result<Var> {
    let s = g.shape(q);
    let f = s[1];
    let qr = g.narrow(q, 1, 1, f - 1)?;
    let kp = g.narrow(k, 1, 0, f - 1)?;
    let vp = g.narrow(v, 1, 0, f - 1)?;
    let mut bshape = g.shape(k0);
    bshape[1] = f - 1;
    let k0b = g.broadcast_to(k0, &bshape)?;
    let v0b = g.broadcast_to(v0, &bshape)?;
    let kc = g.concat(&[k0b, kp], 3)?;
    let vc = g.concat(&[v0b, vp], 3)?;
    sdpa(g, qr, kc, vc, None)
}

/// Attention along the frame axis for every spatial token, residual included.
pub fn temporal_attention<T: Real>(g: &Graph<T>, frames: Var, p: &AttnProj) -> Result<Var> {
    expect_rank(g, frames, 4, "temporal attention")?;
    // [B, F, N, C] -> [B, N, F, C]
    let x = g.permute(frames, &[0, 2, 1, 3])?;
    let q = split_heads(g, g.linear(x, p.q, None)?, p.heads)?;
    let k = split_heads(g, g.linear(x, p.k, None)?, p.heads)?;
    let v = split_heads(g, g.linear(x, p.v, None)?, p.heads)?;
    let o = sdpa(g, q, k, v, None)?;
    let o = p.out(g, merge_heads(g, o)?)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.add(frames, o)
}

/// Text cross-attention: queries from every frame token, keys and values
/// from the condition tokens; masked (padding) tokens get zero weight.
pub fn cross_attention_text<T: Real>(
    g: &Graph<T>,
    frames: Var,
    cond: Var,
    mask: &KeyMask,
    p: &AttnProj,
) -> Result<Var> {
    let s = expect_rank(g, frames, 4, "text cross-attention")?;
    let cs = expect_rank(g, cond, 3, "text condition")?;
    let kw = g.shape(p.k);
    if kw[0] != cs[2] {
        return Err(Error::dim(format!(
            "condition width {} does not match key projection {}",
            cs[2],
            shape_str(&kw)
        )));
    }
    if cs[0] != s[0] || mask.batch != s[0] || mask.keys != cs[1] {
        return Err(Error::dim(format!(
            "condition {} / mask {}x{} do not match frames {}",
            shape_str(&cs),
            mask.batch,
            mask.keys,
            shape_str(&s)
        )));
    }
    let (b, f, n, c) = (s[0], s[1], s[2], s[3]);
    let x = g.reshape(frames, &[b, f * n, c])?;
    let q = split_heads(g, g.linear(x, p.q, None)?, p.heads)?;
    let k = split_heads(g, g.linear(cond, p.k, None)?, p.heads)?;
    let v = split_heads(g, g.linear(cond, p.v, None)?, p.heads)?;
    let o = sdpa(g, q, k, v, Some(mask))?;
    let o = p.out(g, merge_heads(g, o)?)?;
    g.reshape(o, &[b, f, n, c])
}

/// `[B, C, F, H, W]` -> `[B, F, H*W, C]`.
pub fn to_frames<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = expect_rank(g, x, 5, "to_frames")?;
    let t = g.permute(x, &[0, 2, 3, 4, 1])?;
    g.reshape(t, &[s[0], s[2], s[3] * s[4], s[1]])
}

/// `[B, F, H*W, C]` -> `[B, C, F, H, W]`.
pub fn from_frames<T: Real>(g: &Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = expect_rank(g, x, 4, "from_frames")?;
    let t = g.reshape(x, &[s[0], s[1], h, w, s[3]])?;
    g.permute(t, &[0, 4, 1, 2, 3])
}

/// GroupNorm over `[B, C, F, H, W]` with per-channel affine.
pub fn group_norm<T: Real>(g: &Graph<T>, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
    let s = expect_rank(g, x, 5, "group_norm")?;
    let c = s[1];
    let groups = group_count(c, groups);
    let per = s[1..].iter().product::<usize>() / groups;
    let r = g.reshape(x, &[s[0], groups, per])?;
    let n = g.normalize_lastdim(r, 1e-5)?;
    let n = g.reshape(n, &s)?;
    let gs = g.reshape(gamma, &[1, c, 1, 1, 1])?;
    let bs = g.reshape(beta, &[1, c, 1, 1, 1])?;
    let y = g.mul(n, gs)?;
    g.add(y, bs)
}

/// LayerNorm over the channel (last) axis with affine.
pub fn layer_norm<T: Real>(g: &Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.normalize_lastdim(x, 1e-5)?;
    let y = g.mul(n, gamma)?;
    g.add(y, beta)
}

/// Sinusoidal timestep features `[B, dim]`.
pub fn timestep_embedding<T: Real>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::of((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::of((t as f64 * freq).cos()));
        }
    }
    Tensor::from_parts(vec![timesteps.len(), dim], out)
}

/// Weights of one inflated residual block.
#[derive(Debug, Clone, Copy)]
pub struct ResBlockParams {
    pub norm1: (Var, Var),
    pub conv1: (Var, Var),
    pub temb: Option<(Var, Var)>,
    pub norm2: (Var, Var),
    pub conv2: (Var, Var),
    pub skip: Option<(Var, Var)>,
}

impl ResBlockParams {
    pub fn bind<T: Real>(b: &Binding<'_, T>, prefix: &str) -> Result<Self> {
        let pair = |n: &str, a: &str, c: &str| -> Result<(Var, Var)> {
            Ok((b.p(&format!("{prefix}.{n}.{a}"))?, b.p(&format!("{prefix}.{n}.{c}"))?))
        };
        Ok(ResBlockParams {
            norm1: pair("norm1", "g", "b")?,
            conv1: pair("conv1", "w", "b")?,
            temb: if b.has(&format!("{prefix}.temb.w")) {
                Some(pair("temb", "w", "b")?)
            } else {
                None
            },
            norm2: pair("norm2", "g", "b")?,
            conv2: pair("conv2", "w", "b")?,
            skip: if b.has(&format!("{prefix}.skip.w")) {
                Some(pair("skip", "w", "b")?)
            } else {
                None
            },
        })
    }
}

/// GroupNorm -> SiLU -> conv3d, twice, plus a skip path. The timestep
/// projection (when present) is added after the first convolution.
pub fn inflated_resblock<T: Real>(
    g: &Graph<T>,
    x: Var,
    temb: Option<Var>,
    p: &ResBlockParams,
    groups: usize,
) -> Result<Var> {
    let s = expect_rank(g, x, 5, "resblock")?;
    let w1 = g.shape(p.conv1.0);
    if w1[1] != s[1] {
        return Err(Error::dim(format!(
            "resblock expects {} input channels, got {}",
            w1[1], s[1]
        )));
    }
    let k1 = [w1[2], w1[3], w1[4]];
    let w2 = g.shape(p.conv2.0);
    let k2 = [w2[2], w2[3], w2[4]];
    let h = group_norm(g, x, groups, p.norm1.0, p.norm1.1)?;
    let h = g.silu(h)?;
    let mut h = g.conv3d(h, p.conv1.0, Some(p.conv1.1), Conv3dSpec::same(k1))?;
    if let (Some(te), Some((tw, tb))) = (temb, p.temb) {
        let te = g.silu(te)?;
        let proj = g.linear(te, tw, Some(tb))?;
        let cout = g.shape(proj)[1];
        let proj = g.reshape(proj, &[s[0], cout, 1, 1, 1])?;
        h = g.add(h, proj)?;
    }
    let h = group_norm(g, h, groups, p.norm2.0, p.norm2.1)?;
    let h = g.silu(h)?;
    let h = g.conv3d(h, p.conv2.0, Some(p.conv2.1), Conv3dSpec::same(k2))?;
    let skip = match p.skip {
        Some((w, b)) => g.conv3d(x, w, Some(b), Conv3dSpec::same([1, 1, 1]))?,
        None => x,
    };
    g.add(skip, h)
}

/// Condition tokens for the text cross-attention sites.
#[derive(Debug, Clone)]
pub struct CondInput {
    /// `[B, L, context_dim]`.
    pub tokens: Var,
    pub mask: KeyMask,
}

/// Prompt features per attention site, plus how to inject them.
#[derive(Debug, Clone)]
pub struct InjectionInput {
    /// One `[B, N_l, C_l]` entry per attention site, encoder order.
    pub pyramid: Vec<Var>,
    pub options: InjectionOptions,
}

pub fn init_unet<T: Real>(cfg: &UNetConfig, store: &mut ParameterStore<T>, rng: &mut RngStream) -> Result<()> {
    cfg.validate()?;
    let mut init = Init { store, rng };
    let base = StageTag::Base;
    let k = cfg.kernel();
    let td = cfg.time_embed_dim;
    init.linear("time.lin1", td, td, true, base)?;
    init.linear("time.lin2", td, td, true, base)?;
    init.conv("conv_in", cfg.latent_channels, cfg.channels(0), k, base)?;
    let levels = cfg.levels();
    let mut cin = cfg.channels(0);
    for l in 0..levels {
        let c = cfg.channels(l);
        init.resblock(&format!("down.{l}.res"), cin, c, Some(td), k, base)?;
        if cfg.has_attention(l) {
            init_attention_block(&mut init, &format!("down.{l}.attn"), c, cfg.context_dim, true)?;
        }
        cin = c;
    }
    let c_bot = cfg.channels(levels - 1);
    init_proj(&mut init, &format!("down.{}.temporal", levels - 1), c_bot, c_bot, base, base)?;
    for l in (0..levels.saturating_sub(1)).rev() {
        let c = cfg.channels(l);
        init.resblock(&format!("up.{l}.res"), cfg.channels(l + 1) + c, c, Some(td), k, base)?;
        if cfg.has_attention(l) {
            init_attention_block(&mut init, &format!("up.{l}.attn"), c, cfg.context_dim, false)?;
        }
    }
    init.norm("out_norm", cfg.channels(0), base)?;
    init.conv("conv_out", cfg.channels(0), cfg.latent_channels, k, base)?;
    Ok(())
}

fn init_proj<T: Real>(init: &mut Init<'_, T>, prefix: &str, c: usize, ctx: usize, q_tag: StageTag, kv_tag: StageTag) -> Result<()> {
    let sq = (1.0 / c as f64).sqrt();
    let sk = (1.0 / ctx as f64).sqrt();
    init.normal(&format!("{prefix}.q"), &[c, c], sq, q_tag)?;
    init.normal(&format!("{prefix}.k"), &[ctx, c], sk, kv_tag)?;
    init.normal(&format!("{prefix}.v"), &[ctx, c], sk, kv_tag)?;
    init.linear(&format!("{prefix}.o"), c, c, true, q_tag)
}

fn init_attention_block<T: Real>(init: &mut Init<'_, T>, prefix: &str, c: usize, ctx: usize, cross_frame: bool) -> Result<()> {
    let base = StageTag::Base;
    if cross_frame {
        init.norm(&format!("{prefix}.norm1"), c, base)?;
        init_proj(init, &format!("{prefix}.cfa"), c, c, base, base)?;
        // injection projections start as exact copies of the base K/V projections
        for kv in ["k", "v"] {
            let src = init.store.get(&format!("{prefix}.cfa.{kv}"))?.clone();
            init.store.insert(format!("{prefix}.cfa.inj_{kv}"), src, StageTag::Stage2)?;
        }
    }
    init.norm(&format!("{prefix}.norm2"), c, base)?;
    init_proj(init, &format!("{prefix}.xattn"), c, ctx, base, StageTag::Stage1)
}

/// Forward-pass options beyond the noisy input itself.
pub struct UNetInputs<'a> {
    pub timesteps: &'a [usize],
    pub cond: &'a CondInput,
    pub injection: Option<&'a InjectionInput>,
    /// Applies the residual refiner before the output convolution when its weights exist.
    pub refiner: bool,
}

pub struct UNet<'a, 'b, T: Real> {
    pub cfg: &'a UNetConfig,
    pub binding: &'a Binding<'b, T>,
}

impl<'a, 'b, T: Real> UNet<'a, 'b, T> {
    pub fn new(cfg: &'a UNetConfig, binding: &'a Binding<'b, T>) -> Self {
        UNet { cfg, binding }
    }

    fn g(&self) -> &'b Graph<T> {
        self.binding.graph
    }

    fn time_embedding(&self, timesteps: &[usize]) -> Result<Var> {
        let g = self.g();
        let b = self.binding;
        let raw = g.constant(timestep_embedding(timesteps, self.cfg.time_embed_dim));
        let h = g.linear(raw, b.p("time.lin1.w")?, Some(b.p("time.lin1.b")?))?;
        let h = g.silu(h)?;
        g.linear(h, b.p("time.lin2.w")?, Some(b.p("time.lin2.b")?))
    }

    fn heads(&self, level: usize) -> usize {
        self.cfg.channels(level) / self.cfg.head_dim
    }

    /// Attention block at an encoder level. Returns the updated features and
    /// the normalized cross-frame attention input (the pyramid tap).
    fn encoder_attention(
        &self,
        level: usize,
        x: Var,
        cond: &CondInput,
        injected: Option<(Var, InjectionOptions)>,
    ) -> Result<(Var, Var)> {
        let g = self.g();
        let b = self.binding;
        let prefix = format!("down.{level}.attn");
        let s = g.shape(x);
        let (h, w) = (s[3], s[4]);
        let tokens = to_frames(g, x)?;
        let n1 = layer_norm(g, tokens, b.p(&format!("{prefix}.norm1.g"))?, b.p(&format!("{prefix}.norm1.b"))?)?;
        let proj = AttnProj::bind(b, &format!("{prefix}.cfa"), self.heads(level))?;
        let cf = match injected {
            Some((prompt, opts)) => {
                let inj = InjectionProjection {
                    k: b.p(&format!("{prefix}.cfa.inj_k"))?,
                    v: b.p(&format!("{prefix}.cfa.inj_v"))?,
                };
                injected_cross_frame_attention(g, n1, Some(prompt), &proj, &inj, opts)?
            }
            None => cross_frame_attention_base(g, n1, &proj)?,
        };
        let tokens = g.add(tokens, cf)?;
        let tokens = self.text_attention(&prefix, level, tokens, cond)?;
        Ok((from_frames(g, tokens, h, w)?, n1))
    }

    fn text_attention(&self, prefix: &str, level: usize, tokens: Var, cond: &CondInput) -> Result<Var> {
        let g = self.g();
        let b = self.binding;
        let n2 = layer_norm(g, tokens, b.p(&format!("{prefix}.norm2.g"))?, b.p(&format!("{prefix}.norm2.b"))?)?;
        let proj = AttnProj::bind(b, &format!("{prefix}.xattn"), self.heads(level))?;
        let ta = cross_attention_text(g, n2, cond.tokens, &cond.mask, &proj)?;
        g.add(tokens, ta)
    }

    fn check_input(&self, x: Var, frames: Option<usize>) -> Result<Vec<usize>> {
        let g = self.g();
        let s = expect_rank(g, x, 5, "unet input")?;
        let c = self.cfg;
        let ok = s[1] == c.latent_channels
            && s[3] == c.height
            && s[4] == c.width
            && frames.is_none_or(|f| s[2] == f);
        if !ok {
            return Err(Error::dim(format!(
                "unet input {} does not match config ({} channels, {}x{})",
                shape_str(&s),
                c.latent_channels,
                c.height,
                c.width
            )));
        }
        if !self.binding.has("conv_in.w") {
            return Err(Error::State("backbone parameters are not initialized".into()));
        }
        Ok(s)
    }

    /// Runs a single-frame prompt latent `[B, C, 1, H, W]` through the encoder
    /// path and returns the cross-frame attention inputs of every attention
    /// site, each `[B, N_l, C_l]`.
    pub fn extract_prompt_pyramid(&self, prompt_latent: Var, timesteps: &[usize], cond: &CondInput) -> Result<Vec<Var>> {
        let g = self.g();
        self.check_input(prompt_latent, Some(1))?;
        let temb = self.time_embedding(timesteps)?;
        let mut pyramid = Vec::new();
        self.encode(prompt_latent, temb, cond, None, Some(&mut pyramid))?;
        pyramid
            .into_iter()
            .map(|v| {
                let s = g.shape(v);
                g.reshape(v, &[s[0], s[2], s[3]])
            })
            .collect()
    }

    fn encode(
        &self,
        x: Var,
        temb: Var,
        cond: &CondInput,
        injection: Option<&InjectionInput>,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Vec<Var>)> {
        let g = self.g();
        let b = self.binding;
        let cfg = self.cfg;
        let groups = cfg.groups;
        let levels = cfg.levels();
        if let Some(inj) = injection {
            if inj.options.enabled && inj.pyramid.len() != cfg.attention_sites().len() {
                return Err(Error::State(format!(
                    "prompt pyramid has {} levels, backbone has {} attention sites",
                    inj.pyramid.len(),
                    cfg.attention_sites().len()
                )));
            }
        }
        let mut h = g.conv3d(x, b.p("conv_in.w")?, Some(b.p("conv_in.b")?), Conv3dSpec::same(cfg.kernel()))?;
        let mut skips = Vec::with_capacity(levels);
        let mut site = 0;
        for l in 0..levels {
            let rp = ResBlockParams::bind(b, &format!("down.{l}.res"))?;
            h = inflated_resblock(g, h, Some(temb), &rp, groups)?;
            if cfg.has_attention(l) {
                let injected = injection
                    .filter(|i| i.options.enabled)
                    .map(|i| (i.pyramid[site], i.options));
                let (out, tap) = self.encoder_attention(l, h, cond, injected)?;
                h = out;
                if let Some(t) = taps.as_deref_mut() {
                    t.push(tap);
                }
                site += 1;
            }
            if l == levels - 1 {
                let tokens = to_frames(g, h)?;
                let p = AttnProj::bind(b, &format!("down.{l}.temporal"), self.heads_or_one(l))?;
                let tokens = temporal_attention(g, tokens, &p)?;
                let (hh, ww) = cfg.resolution(l);
                h = from_frames(g, tokens, hh, ww)?;
            } else {
                skips.push(h);
                h = g.resample2x(h, Resample::Down)?;
            }
        }
        Ok((h, skips))
    }

    fn heads_or_one(&self, level: usize) -> usize {
        let c = self.cfg.channels(level);
        if c.is_multiple_of(self.cfg.head_dim) {
            c / self.cfg.head_dim
        } else {
            1
        }
    }

    /// Pre-output-convolution features of the full forward pass.
    pub fn features(&self, x: Var, inputs: &UNetInputs<'_>) -> Result<Var> {
        let g = self.g();
        let b = self.binding;
        let cfg = self.cfg;
        let s = self.check_input(x, None)?;
        if inputs.timesteps.len() != s[0] {
            return Err(Error::dim(format!(
                "{} timesteps for batch of {}",
                inputs.timesteps.len(),
                s[0]
            )));
        }
        let temb = self.time_embedding(inputs.timesteps)?;
        let (mut h, mut skips) = self.encode(x, temb, inputs.cond, inputs.injection, None)?;
        for l in (0..cfg.levels().saturating_sub(1)).rev() {
            h = g.resample2x(h, Resample::Up)?;
            let skip = skips.pop().expect("one skip per non-bottleneck level");
            h = g.concat(&[h, skip], 1)?;
            let rp = ResBlockParams::bind(b, &format!("up.{l}.res"))?;
            h = inflated_resblock(g, h, Some(temb), &rp, cfg.groups)?;
            if cfg.has_attention(l) {
                let (hh, ww) = cfg.resolution(l);
                let tokens = to_frames(g, h)?;
                let tokens = self.text_attention(&format!("up.{l}.attn"), l, tokens, inputs.cond)?;
                h = from_frames(g, tokens, hh, ww)?;
            }
        }
        let h = group_norm(g, h, cfg.groups, b.p("out_norm.g")?, b.p("out_norm.b")?)?;
        let h = g.silu(h)?;
        if inputs.refiner && b.has(crate::refiner::REFINER_PROBE) {
            crate::refiner::apply_refined_output(g, b, h, cfg.groups)
        } else {
            Ok(h)
        }
    }

    /// Predicted noise, shaped like `x`.
    pub fn forward(&self, x: Var, inputs: &UNetInputs<'_>) -> Result<Var> {
        let g = self.g();
        let b = self.binding;
        let h = self.features(x, inputs)?;
        g.conv3d(h, b.p("conv_out.w")?, Some(b.p("conv_out.b")?), Conv3dSpec::same(self.cfg.kernel()))
    }
}

/// Names of every trainable text cross-attention K/V projection.
pub fn text_kv_names(store_names: impl Iterator<Item = String>) -> BTreeSet<String> {
    store_names
        .filter(|n| n.contains(".xattn.k") || n.contains(".xattn.v"))
        .collect()
}
