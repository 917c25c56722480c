//! Fine visual embedding: the image prompt's multi-scale features join
//! cross-frame attention as extra keys and values.
//!
//! The first frame's values are updated first, attending over the prompt
//! tokens and its own tokens:
//!
//! ```text
//! V0_new = softmax(Q0 [K_I; K_0]ᵀ / √d) [V_I; V_0]
//! ```
//!
//! Every later frame `i` then attends with the *original* keys of frame 0 and
//! frame `i - 1`, but reads the updated first-frame values:
//!
//! ```text
//! out_i = softmax(Q_i [K_0; K_{i-1}]ᵀ / √d) [V0_new; V_{i-1}]
//! ```
//!
//! Frame 0's own output is `V0_new`. Prompt keys and values come from a
//! separate K/V projection pair that starts as a copy of the base one.

use serde::{Deserialize, Serialize};

use crate::attention::{sdpa, split_heads};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_str, Error, Result};
use crate::tensor::Real;
use crate::unet::{cross_frame_attention_base, frame_output, frame_qkv, AttnProj};

/// Prompt-side K/V projections of one attention level, `[C, C]` each, bias free.
#[derive(Debug, Clone, Copy)]
pub struct InjectionProjection {
    pub k: Var,
    pub v: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionOptions {
    pub enabled: bool,
    /// Feed frame `i` the already-updated values of frame `i - 1` instead of
    /// the original ones.
    pub recursive: bool,
}

impl Default for InjectionOptions {
    fn default() -> Self {
        InjectionOptions {
            enabled: true,
            recursive: false,
        }
    }
}

/// `K_I = features · W_KI`, `V_I = features · W_VI` for `[.., N_I, C]` features.
pub fn project_prompt<T: Real>(g: &Graph<T>, features: Var, proj: &InjectionProjection) -> Result<(Var, Var)> {
    let fs = g.shape(features);
    let ks = g.shape(proj.k);
    if fs.last() != Some(&ks[0]) {
        return Err(Error::dim(format!(
            "prompt features {} do not match injection projection {}",
            shape_str(&fs),
            shape_str(&ks)
        )));
    }
    Ok((g.linear(features, proj.k, None)?, g.linear(features, proj.v, None)?))
}

/// First-frame value update over the concatenated `[K_I; K_0]`, `[V_I; V_0]`.
///
/// All operands are `[.., N, d]` with matching leading dimensions; `K_I` may
/// have zero rows, in which case this is plain self-attention of frame 0.
pub fn update_first_frame<T: Real>(g: &Graph<T>, q0: Var, k0: Var, v0: Var, ki: Var, vi: Var) -> Result<Var> {
    let (sk0, ski) = (g.shape(k0), g.shape(ki));
    if sk0.last() != ski.last() || g.shape(v0).last() != g.shape(vi).last() {
        return Err(Error::dim(format!(
            "prompt keys {} and frame keys {} differ in width",
            shape_str(&ski),
            shape_str(&sk0)
        )));
    }
    let axis = sk0.len() - 2;
    let k = g.concat(&[ki, k0], axis)?;
    let v = g.concat(&[vi, v0], axis)?;
    sdpa(g, q0, k, v, None)
}

/// Frame-`i` output for `i >= 1`: weights from the original keys
/// `[K_0; K_prev]`, values `[V0_new; V_prev]`.
pub fn propagate_to_frame<T: Real>(
    g: &Graph<T>,
    qi: Var,
    k0: Var,
    k_prev: Var,
    v0_new: Var,
    v_prev: Var,
) -> Result<Var> {
    let (sk0, sv0) = (g.shape(k0), g.shape(v0_new));
    let (skp, svp) = (g.shape(k_prev), g.shape(v_prev));
    let r = sk0.len();
    if r < 2 || sv0.len() != r || sk0[r - 2] != sv0[r - 2] || skp[r - 2] != svp[r - 2] {
        return Err(Error::dim(format!(
            "key/value row counts differ: K_0 {} vs V0_new {}, K_prev {} vs V_prev {}",
            shape_str(&sk0),
            shape_str(&sv0),
            shape_str(&skp),
            shape_str(&svp)
        )));
    }
    let k = g.concat(&[k0, k_prev], r - 2)?;
    let v = g.concat(&[v0_new, v_prev], r - 2)?;
    sdpa(g, qi, k, v, None)
}

/// Cross-frame attention with the prompt injected.
///
/// `frames` is `[B, F, N, C]`, `prompt` the matching pyramid level
/// `[B, N_I, C]`. With injection disabled this is exactly
/// [`cross_frame_attention_base`].
pub fn injected_cross_frame_attention<T: Real>(
    g: &Graph<T>,
    frames: Var,
    prompt: Option<Var>,
    base: &AttnProj,
    proj: &InjectionProjection,
    opts: InjectionOptions,
) -> Result<Var> {
    if !opts.enabled {
        return cross_frame_attention_base(g, frames, base);
    }
    let prompt = prompt.ok_or_else(|| Error::State("injection enabled without a prompt pyramid level".into()))?;
    let s = g.shape(frames);
    let ps = g.shape(prompt);
    if s.len() != 4 || ps.len() != 3 || ps[0] != s[0] || ps[2] != s[3] {
        return Err(Error::dim(format!(
            "prompt level {} does not match frames {}",
            shape_str(&ps),
            shape_str(&s)
        )));
    }
    let f = s[1];
    let (q, k, v) = frame_qkv(g, frames, base)?;
    let (ki, vi) = project_prompt(g, prompt, proj)?;
    // [B, N_I, C] -> [B, 1, h, N_I, d]
    let lift = |x: Var| -> Result<Var> {
        let x = split_heads(g, x, base.heads)?;
        let xs = g.shape(x);
        g.reshape(x, &[xs[0], 1, xs[1], xs[2], xs[3]])
    };
    let (ki, vi) = (lift(ki)?, lift(vi)?);
    let q0 = g.narrow(q, 1, 0, 1)?;
    let k0 = g.narrow(k, 1, 0, 1)?;
    let v0 = g.narrow(v, 1, 0, 1)?;
    let v0_new = update_first_frame(g, q0, k0, v0, ki, vi)?;
    let out = if f == 1 {
        v0_new
    } else if !opts.recursive {
        let qr = g.narrow(q, 1, 1, f - 1)?;
        let kp = g.narrow(k, 1, 0, f - 1)?;
        let vp = g.narrow(v, 1, 0, f - 1)?;
        let mut bshape = g.shape(k0);
        bshape[1] = f - 1;
        let k0b = g.broadcast_to(k0, &bshape)?;
        let v0b = g.broadcast_to(v0_new, &bshape)?;
        let rest = propagate_to_frame(g, qr, k0b, kp, v0b, vp)?;
        g.concat(&[v0_new, rest], 1)?
    } else {
        let mut outs = vec![v0_new];
        for i in 1..f {
            let qi = g.narrow(q, 1, i, 1)?;
            let kp = g.narrow(k, 1, i - 1, 1)?;
            let vp = outs[i - 1];
            outs.push(propagate_to_frame(g, qi, k0, kp, v0_new, vp)?);
        }
        g.concat(&outs, 1)?
    };
    frame_output(g, out, base)
}
