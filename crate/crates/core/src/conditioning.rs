//! Coarse visual embedding and text-condition composition.
//!
//! The text and image encoders here are frozen random projections standing
//! in for CLIP. They are deterministic functions of `frozen_seed` and carry
//! no semantics; they only preserve the interfaces (token sequence in,
//! `d_txt` rows out; image in, `d_img` vector out). The MLP mapper is the
//! trainable part and maps the image embedding into the text space, where
//! [`fuse`] swaps it in for the subject's word embeddings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_str, Error, Result};
use crate::ops::KeyMask;
use crate::params::{Binding, ParameterStore, StageTag};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::unet::Init;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Id of the reserved null token that fills padding positions.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_txt: usize,
    /// The image encoder averages an `image_patch x image_patch` grid of cells.
    pub image_patch: usize,
    pub image_channels: usize,
    pub d_img: usize,
    pub mapper_hidden_widths: Vec<usize>,
    /// Zero-initialize the mapper's last layer so training starts from `f_I = bias`.
    pub mapper_zero_init: bool,
    pub max_tokens: usize,
    pub frozen_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 128,
            d_txt: 32,
            image_patch: 4,
            image_channels: 3,
            d_img: 32,
            mapper_hidden_widths: vec![128, 128],
            mapper_zero_init: true,
            max_tokens: 32,
            frozen_seed: 0x5eed_c11b,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_txt == 0 || self.d_img == 0 || self.image_patch == 0 || self.max_tokens == 0 {
            return Err(Error::Config("encoder widths, patch grid and max_tokens must be positive".into()));
        }
        if self.vocab_size <= UNK_ID {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Line-delimited vocabulary; a token's id is its zero-based line index.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; the reserved `<pad>` and `<unk>` entries are
    /// placed first when missing.
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for w in words {
            let w = w.into();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Parse(format!(
                "vocabulary must start with `{PAD_TOKEN}` and `{UNK_TOKEN}`"
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes with [`caption_words`], padded with the null token.
    pub fn tokenize(&self, caption: &str, max_tokens: usize) -> Result<TextTokenSeq> {
        let ids: Vec<usize> = caption_words(caption).iter().map(|w| self.id(w)).collect();
        TextTokenSeq::new(ids, max_tokens)
    }
}

/// Lowercased whitespace-separated words with surrounding punctuation
/// trimmed. Shared by the tokenizer and the caption parser so subject spans
/// index the same positions.
pub fn caption_words(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenSeq {
    /// Always `max_tokens` long; padding positions hold [`PAD_ID`].
    pub token_ids: Vec<usize>,
    /// `true` marks a padding position.
    pub pad_mask: Vec<bool>,
}

impl TextTokenSeq {
    pub fn new(ids: Vec<usize>, max_tokens: usize) -> Result<Self> {
        if ids.len() > max_tokens {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_tokens {max_tokens}",
                ids.len()
            )));
        }
        let len = ids.len();
        let mut token_ids = ids;
        token_ids.resize(max_tokens, PAD_ID);
        let pad_mask = (0..max_tokens).map(|i| i >= len).collect();
        Ok(TextTokenSeq { token_ids, pad_mask })
    }

    /// Number of non-padding tokens.
    pub fn len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_tokens(&self) -> usize {
        self.token_ids.len()
    }
}

/// Frozen embedding table plus fixed sinusoidal position offsets.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    table: Tensor<f64>,
    positions: Tensor<f64>,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = RngStream::new(cfg.frozen_seed).split(1);
        let scale = 1.0 / (cfg.d_txt as f64).sqrt();
        let table = Tensor::from_fn(vec![cfg.vocab_size, cfg.d_txt], |_| rng.normal() * scale);
        TextEncoder {
            table,
            positions: sinusoidal_positions(cfg.max_tokens, cfg.d_txt, 0.1),
        }
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn table_row(&self, id: usize) -> &[f64] {
        let d = self.width();
        &self.table.data()[id * d..(id + 1) * d]
    }

    pub fn position_row(&self, pos: usize) -> &[f64] {
        let d = self.width();
        &self.positions.data()[pos * d..(pos + 1) * d]
    }

    /// `[max_tokens, d_txt]` rows: `table[id] + pos[position]`.
    pub fn encode<T: Real>(&self, seq: &TextTokenSeq) -> Result<Tensor<T>> {
        let d = self.width();
        let l = seq.max_tokens();
        if l > self.positions.shape()[0] {
            return Err(Error::Contract(format!("sequence of {l} tokens exceeds encoder positions")));
        }
        let mut out = Vec::with_capacity(l * d);
        for (pos, &id) in seq.token_ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::Vocabulary {
                    id,
                    size: self.vocab_size(),
                });
            }
            let row = self.table_row(id);
            let p = self.position_row(pos);
            out.extend(row.iter().zip(p).map(|(a, b)| T::of(a + b)));
        }
        Tensor::new(vec![l, d], out)
    }

    /// Mean of the non-padding rows; the text side of the alignment metrics.
    pub fn pooled<T: Real>(&self, seq: &TextTokenSeq) -> Result<Tensor<T>> {
        let rows = self.encode::<f64>(seq)?;
        let d = self.width();
        let n = seq.len();
        if n == 0 {
            return Err(Error::Metric("empty caption".into()));
        }
        let mut acc = vec![0.0; d];
        for (i, pad) in seq.pad_mask.iter().enumerate() {
            if !pad {
                for (a, v) in acc.iter_mut().zip(&rows.data()[i * d..(i + 1) * d]) {
                    *a += v;
                }
            }
        }
        Tensor::new(vec![d], acc.into_iter().map(|v| T::of(v / n as f64)).collect())
    }
}

fn sinusoidal_positions(max_len: usize, d: usize, amplitude: f64) -> Tensor<f64> {
    Tensor::from_fn(vec![max_len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = (-(10000f64.ln()) * (2 * (j / 2)) as f64 / d as f64).exp();
        amplitude * if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() }
    })
}

/// Frozen image encoder: mean of each cell of a `grid x grid` partition,
/// flattened cell-major, then a fixed linear projection plus bias.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    grid: usize,
    channels: usize,
    /// `[grid*grid*channels, width]`.
    proj: Tensor<f64>,
    bias: Tensor<f64>,
}

impl ImageEncoder {
    pub fn new(grid: usize, channels: usize, width: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).split(2);
        let fan_in = grid * grid * channels;
        let scale = 1.0 / (fan_in as f64).sqrt();
        ImageEncoder {
            grid,
            channels,
            proj: Tensor::from_fn(vec![fan_in, width], |_| rng.normal() * scale),
            bias: Tensor::from_fn(vec![width], |_| rng.normal() * 0.1),
        }
    }

    pub fn from_config(cfg: &EncoderConfig) -> Self {
        ImageEncoder::new(cfg.image_patch, cfg.image_channels, cfg.d_img, cfg.frozen_seed)
    }

    pub fn width(&self) -> usize {
        self.bias.numel()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn projection(&self) -> &Tensor<f64> {
        &self.proj
    }

    pub fn bias(&self) -> &Tensor<f64> {
        &self.bias
    }

    /// Cell means of an `[H, W, C]` image, `grid*grid*C` long.
    pub fn cell_means<T: Real>(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let s = image.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] != self.channels {
            return Err(Error::dim(format!(
                "image encoder expects [H, W, {}] with positive extents, got {}",
                self.channels,
                shape_str(s)
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h < self.grid || w < self.grid {
            return Err(Error::dim(format!(
                "image {h}x{w} smaller than the {g}x{g} cell grid",
                g = self.grid
            )));
        }
        let mut feats = Vec::with_capacity(self.grid * self.grid * c);
        for gy in 0..self.grid {
            let (y0, y1) = (gy * h / self.grid, (gy + 1) * h / self.grid);
            for gx in 0..self.grid {
                let (x0, x1) = (gx * w / self.grid, (gx + 1) * w / self.grid);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..c {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.data()[(y * w + x) * c + ch].as_f64();
                        }
                    }
                    feats.push(sum / count);
                }
            }
        }
        Ok(feats)
    }

    /// `f_V` for an `[H, W, C]` image.
    pub fn encode<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.cell_means(image)?;
        let width = self.width();
        let mut out = self.bias.to_vec();
        for (i, &f) in feats.iter().enumerate() {
            let row = &self.proj.data()[i * width..(i + 1) * width];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += f * p;
            }
        }
        Tensor::new(vec![width], out.into_iter().map(T::of).collect())
    }
}

/// Adds the mapper `F(·)` (tag `stage1`): `d_img -> hidden... -> d_txt`
/// with SiLU between layers.
pub fn init_mapper<T: Real>(cfg: &EncoderConfig, store: &mut ParameterStore<T>, rng: &mut RngStream) -> Result<()> {
    let mut widths = vec![cfg.d_img];
    widths.extend(&cfg.mapper_hidden_widths);
    widths.push(cfg.d_txt);
    let mut init = Init { store, rng };
    let layers = widths.len() - 1;
    for (i, win) in widths.windows(2).enumerate() {
        let name = format!("mapper.{i}");
        if i + 1 == layers && cfg.mapper_zero_init {
            init.constant(&format!("{name}.w"), &[win[0], win[1]], 0.0, StageTag::Stage1)?;
            init.constant(&format!("{name}.b"), &[win[1]], 0.0, StageTag::Stage1)?;
        } else {
            init.linear(&name, win[0], win[1], true, StageTag::Stage1)?;
        }
    }
    Ok(())
}

/// `f_I = F(f_V)` for `[B, d_img]` (or `[d_img]`) inputs.
pub fn map_to_text_space<T: Real>(b: &Binding<'_, T>, f_v: Var) -> Result<Var> {
    let g = b.graph;
    let mut h = f_v;
    let mut i = 0;
    while b.has(&format!("mapper.{i}.w")) {
        let w = b.p(&format!("mapper.{i}.w"))?;
        let ws = g.shape(w);
        if g.shape(h).last() != Some(&ws[0]) {
            return Err(Error::dim(format!(
                "mapper layer {i} expects width {}, got {}",
                ws[0],
                shape_str(&g.shape(h))
            )));
        }
        if i > 0 {
            h = g.silu(h)?;
        }
        h = g.linear(h, w, Some(b.p(&format!("mapper.{i}.b"))?))?;
        i += 1;
    }
    if i == 0 {
        return Err(Error::State("mapper parameters are not initialized".into()));
    }
    Ok(h)
}

/// A composed text condition: `[max_tokens, d_txt]` rows on the graph.
#[derive(Debug, Clone)]
pub struct ComposedCondition {
    pub embeddings: Var,
    /// Index holding `f_I`; `None` for a plain text condition.
    pub image_slot: Option<usize>,
    /// `true` marks padding.
    pub pad_mask: Vec<bool>,
}

impl ComposedCondition {
    /// Plain caption condition (no image slot).
    pub fn text_only<T: Real>(g: &Graph<T>, f_t: &Tensor<T>, seq: &TextTokenSeq) -> Self {
        ComposedCondition {
            embeddings: g.constant(f_t.clone()),
            image_slot: None,
            pad_mask: seq.pad_mask.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces the subject span `k..k+n` of the caption rows with the single
/// vector `f_I` and re-pads to the original row count.
///
/// `f_t` holds `max_tokens` rows of which the first `len` are real tokens;
/// `pad_rows` supplies the rows used for padding after the shift.
pub fn fuse<T: Real>(
    g: &Graph<T>,
    f_t: Var,
    len: usize,
    f_i: Var,
    k: usize,
    n: usize,
    pad_rows: &Tensor<T>,
) -> Result<ComposedCondition> {
    let ts = g.shape(f_t);
    if ts.len() != 2 {
        return Err(Error::dim(format!("caption embeddings must be [L, d], got {}", shape_str(&ts))));
    }
    let (max_tokens, d) = (ts[0], ts[1]);
    if n == 0 {
        return Err(Error::Contract("subject span length must be at least 1".into()));
    }
    if k + n > len || len > max_tokens {
        return Err(Error::Span { k, n, len });
    }
    let fi = g.reshape(f_i, &[1, d]).map_err(|_| {
        Error::dim(format!("f_I {} does not match text width {d}", shape_str(&g.shape(f_i))))
    })?;
    if pad_rows.shape() != [max_tokens, d] {
        return Err(Error::dim(format!(
            "pad rows {} do not match [{max_tokens}, {d}]",
            shape_str(pad_rows.shape())
        )));
    }
    let mut parts = Vec::new();
    if k > 0 {
        parts.push(g.narrow(f_t, 0, 0, k)?);
    }
    parts.push(fi);
    if k + n < len {
        parts.push(g.narrow(f_t, 0, k + n, len - k - n)?);
    }
    let fused_len = len - n + 1;
    if fused_len < max_tokens {
        let pads = crate::ops::narrow(pad_rows, 0, fused_len, max_tokens - fused_len)?;
        parts.push(g.constant(pads));
    }
    let embeddings = g.concat(&parts, 0)?;
    Ok(ComposedCondition {
        embeddings,
        image_slot: Some(k),
        pad_mask: (0..max_tokens).map(|i| i >= fused_len).collect(),
    })
}

/// Null-token rows for every position.
pub fn null_rows<T: Real>(enc: &TextEncoder, max_tokens: usize) -> Result<Tensor<T>> {
    enc.encode(&TextTokenSeq::new(Vec::new(), max_tokens)?)
}

/// Stacks per-sample conditions into `[B, L, d]` tokens plus a key mask.
pub fn batch_conditions<T: Real>(g: &Graph<T>, conds: &[ComposedCondition]) -> Result<(Var, KeyMask)> {
    let first = conds.first().ok_or_else(|| Error::Contract("empty condition batch".into()))?;
    let s = g.shape(first.embeddings);
    let mut rows = Vec::with_capacity(conds.len());
    let mut keep = Vec::with_capacity(conds.len() * s[0]);
    for c in conds {
        if g.shape(c.embeddings) != s {
            return Err(Error::dim("conditions in a batch must share their shape"));
        }
        rows.push(g.reshape(c.embeddings, &[1, s[0], s[1]])?);
        keep.extend(c.pad_mask.iter().map(|p| !p));
    }
    let tokens = g.concat(&rows, 0)?;
    Ok((tokens, KeyMask::new(conds.len(), s[0], keep)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
        let t = g.value(v);
        let d = t.shape()[1];
        t.data().chunks(d).map(|c| c.to_vec()).collect()
    }

    fn seq_tensor(vals: &[f64], max: usize) -> Tensor<f64> {
        let mut data: Vec<f64> = vals.to_vec();
        data.resize(max, -1.0);
        Tensor::new(vec![max, 1], data).unwrap()
    }

    #[test]
    fn fuse_single_token() {
        let g = Graph::<f64>::new();
        let ft = g.constant(seq_tensor(&[1., 2., 3.], 4));
        let fi = g.constant(Tensor::full(vec![1], 9.0));
        let pads = Tensor::full(vec![4, 1], 0.0);
        let c = fuse(&g, ft, 3, fi, 1, 1, &pads).unwrap();
        assert_eq!(rows(&g, c.embeddings), vec![vec![1.], vec![9.], vec![3.], vec![0.]]);
        assert_eq!(c.image_slot, Some(1));
        assert_eq!(c.pad_mask, vec![false, false, false, true]);
    }

    #[test]
    fn fuse_multi_token_span() {
        let g = Graph::<f64>::new();
        let ft = g.constant(seq_tensor(&[1., 2., 3., 4.], 5));
        let fi = g.constant(Tensor::full(vec![1], 9.0));
        let pads = Tensor::full(vec![5, 1], 0.0);
        let c = fuse(&g, ft, 4, fi, 1, 2, &pads).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(&rows(&g, c.embeddings)[..3], &[vec![1.], vec![9.], vec![4.]]);
    }

    #[test]
    fn fuse_whole_caption() {
        let g = Graph::<f64>::new();
        let ft = g.constant(seq_tensor(&[1., 2., 3.], 3));
        let fi = g.constant(Tensor::full(vec![1], 9.0));
        let pads = Tensor::full(vec![3, 1], 0.0);
        let c = fuse(&g, ft, 3, fi, 0, 3, &pads).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(rows(&g, c.embeddings)[0], vec![9.]);
    }

    #[test]
    fn fuse_errors() {
        let g = Graph::<f64>::new();
        let ft = g.constant(seq_tensor(&[1., 2., 3.], 3));
        let fi = g.constant(Tensor::full(vec![1], 9.0));
        let pads = Tensor::full(vec![3, 1], 0.0);
        assert!(matches!(fuse(&g, ft, 3, fi, 2, 2, &pads), Err(Error::Span { .. })));
        assert!(matches!(fuse(&g, ft, 3, fi, 0, 0, &pads), Err(Error::Contract(_))));
    }

    #[test]
    fn vocabulary_round_trip_and_ids() {
        let v = Vocabulary::new(["dog", "runs"]);
        assert_eq!(v.id("dog"), 2);
        assert_eq!(v.id("zebra"), UNK_ID);
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse("dog\ncat\n").is_err());
    }

    #[test]
    fn encode_text_rejects_out_of_vocab_ids() {
        let cfg = EncoderConfig {
            vocab_size: 8,
            ..Default::default()
        };
        let enc = TextEncoder::new(&cfg);
        let seq = TextTokenSeq::new(vec![3, 8], 4).unwrap();
        assert!(matches!(
            enc.encode::<f64>(&seq),
            Err(Error::Vocabulary { id: 8, size: 8 })
        ));
    }

    #[test]
    fn image_encoder_rejects_empty_extents() {
        let enc = ImageEncoder::new(4, 3, 8, 1);
        let img = Tensor::<f64>::zeros(vec![0, 4, 3]);
        assert!(matches!(enc.encode(&img), Err(Error::Dimension(_))));
    }
}
