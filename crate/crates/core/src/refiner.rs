//! Residual watermark-removal refiner.
//!
//! A six-block mini U-Net that sits right before the backbone's output
//! convolution: two downsampling blocks, two enhancement blocks, two
//! upsampling blocks with skip concatenation to the matching downsampling
//! block, then a zero-initialized convolution whose result is added back to
//! the incoming features. Each block holds two residual blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv3dSpec, Resample};
use crate::params::{Binding, ParameterStore, StageTag};
use crate::rng::RngStream;
use crate::tensor::Real;
use crate::unet::{inflated_resblock, Init, ResBlockParams};

/// Name whose presence in a store marks the refiner as built.
pub const REFINER_PROBE: &str = "refiner.final.w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Channels of the features the refiner wraps.
    pub in_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            in_channels: 8,
            widths: [8, 8, 8],
        }
    }
}

impl RefinerConfig {
    /// Mirrors the backbone's base width everywhere.
    pub fn for_backbone(base_channels: usize) -> Self {
        RefinerConfig {
            in_channels: base_channels,
            widths: [base_channels; 3],
        }
    }
}

const KERNEL: [usize; 3] = [1, 3, 3];

/// `(block name, [(cin, cout); 2])` for all six blocks.
pub fn block_layout(cfg: &RefinerConfig) -> Vec<(&'static str, [(usize, usize); 2])> {
    let [w0, w1, w2] = cfg.widths;
    vec![
        ("down1", [(cfg.in_channels, w0), (w0, w0)]),
        ("down2", [(w0, w1), (w1, w1)]),
        ("mid1", [(w1, w2), (w2, w2)]),
        ("mid2", [(w2, w2), (w2, w2)]),
        ("up1", [(w2 + w1, w1), (w1, w1)]),
        ("up2", [(w1 + w0, w0), (w0, w0)]),
    ]
}

/// Adds the refiner's parameters (tag `refiner`) for features of extent `height x width`.
pub fn build_refiner<T: Real>(
    cfg: &RefinerConfig,
    height: usize,
    width: usize,
    store: &mut ParameterStore<T>,
    rng: &mut RngStream,
) -> Result<()> {
    if !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::dim(format!(
            "refiner needs extents divisible by 4, got {height}x{width}"
        )));
    }
    let mut init = Init { store, rng };
    for (name, pair) in block_layout(cfg) {
        for (i, (cin, cout)) in pair.into_iter().enumerate() {
            init.resblock(&format!("refiner.{name}.{i}"), cin, cout, None, KERNEL, StageTag::Refiner)?;
        }
    }
    let w0 = cfg.widths[0];
    let shape = [cfg.in_channels, w0, KERNEL[0], KERNEL[1], KERNEL[2]];
    init.constant("refiner.final.w", &shape, 0.0, StageTag::Refiner)?;
    init.constant("refiner.final.b", &[cfg.in_channels], 0.0, StageTag::Refiner)?;
    Ok(())
}

fn block<T: Real>(g: &Graph<T>, b: &Binding<'_, T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..2 {
        let p = ResBlockParams::bind(b, &format!("refiner.{name}.{i}"))?;
        h = inflated_resblock(g, h, None, &p, groups)?;
    }
    Ok(h)
}

/// The refiner's residual for `[B, C, F, H, W]` features.
pub fn refiner_residual<T: Real>(g: &Graph<T>, b: &Binding<'_, T>, x: Var, groups: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 5 || !s[3].is_multiple_of(4) || !s[4].is_multiple_of(4) {
        return Err(Error::dim(format!("refiner input {s:?} must be [B,C,F,H,W] with H, W divisible by 4")));
    }
    let d1 = block(g, b, "down1", x, groups)?;
    let h = g.resample2x(d1, Resample::Down)?;
    let d2 = block(g, b, "down2", h, groups)?;
    let h = g.resample2x(d2, Resample::Down)?;
    let h = block(g, b, "mid1", h, groups)?;
    let h = block(g, b, "mid2", h, groups)?;
    let h = g.resample2x(h, Resample::Up)?;
    let h = g.concat(&[h, d2], 1)?;
    let h = block(g, b, "up1", h, groups)?;
    let h = g.resample2x(h, Resample::Up)?;
    let h = g.concat(&[h, d1], 1)?;
    let h = block(g, b, "up2", h, groups)?;
    g.conv3d(
        h,
        b.p("refiner.final.w")?,
        Some(b.p("refiner.final.b")?),
        Conv3dSpec::same(KERNEL),
    )
}

/// `features + refiner(features)`.
pub fn apply_refined_output<T: Real>(g: &Graph<T>, b: &Binding<'_, T>, features: Var, groups: usize) -> Result<Var> {
    let r = refiner_residual(g, b, features, groups)?;
    let fs = g.shape(features);
    if g.shape(r) != fs {
        return Err(Error::dim(format!("refiner output does not match features {fs:?}")));
    }
    g.add(features, r)
}
