//! Frame-averaged cosine alignment scores (×100) over the frozen embedders,
//! plus report formatting and frame-grid export.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::frame;
use crate::conditioning::{ImageEncoder, TextEncoder, TextTokenSeq};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `100 · cos(a, b)`.
pub fn cosine100(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("embedding widths {} and {} differ", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("zero-norm embedding".into()));
    }
    Ok(100.0 * (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of `100 · cos(reference, frame)` over frame embeddings.
pub fn frame_mean_score(reference: &[f64], frames: &[Vec<f64>]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Metric("no frames to score".into()));
    }
    let mut total = 0.0;
    for f in frames {
        total += cosine100(reference, f)?;
    }
    Ok(total / frames.len() as f64)
}

fn frame_embeddings(video: &Tensor<f32>, enc: &ImageEncoder) -> Result<Vec<Vec<f64>>> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("frames must be [F, H, W, C], got {s:?}")));
    }
    (0..s[0])
        .map(|i| Ok(enc.encode(&frame(video, i)?.cast::<f64>())?.to_vec()))
        .collect()
}

/// Caption vs. frames in the shared toy text/image space.
pub fn clip_text_score(video: &Tensor<f32>, caption: &TextTokenSeq, text: &TextEncoder, image: &ImageEncoder) -> Result<f64> {
    let t = text.pooled::<f64>(caption)?.to_vec();
    frame_mean_score(&t, &frame_embeddings(video, image)?)
}

/// Prompt image vs. frames under the CLIP-like embedder.
pub fn clip_image_score(video: &Tensor<f32>, prompt: &Tensor<f32>, image: &ImageEncoder) -> Result<f64> {
    let p = image.encode(&prompt.cast::<f64>())?.to_vec();
    frame_mean_score(&p, &frame_embeddings(video, image)?)
}

/// Prompt image vs. frames under the independent DINO-like embedder.
pub fn dino_like_score(video: &Tensor<f32>, prompt: &Tensor<f32>, dino: &ImageEncoder) -> Result<f64> {
    clip_image_score(video, prompt, dino)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub clip_text: f64,
    pub clip_image: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub per_clip: Vec<ClipScores>,
    pub clip_text: f64,
    pub clip_image: f64,
    pub dino: f64,
    pub clip_count: usize,
    pub embedder_hash: String,
}

impl MetricReport {
    pub fn new(model: impl Into<String>, per_clip: Vec<ClipScores>, embedder_hash: String) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(Error::Metric("report needs at least one clip".into()));
        }
        let n = per_clip.len() as f64;
        let mean = |f: fn(&ClipScores) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            model: model.into(),
            clip_text: mean(|c| c.clip_text),
            clip_image: mean(|c| c.clip_image),
            dino: mean(|c| c.dino),
            clip_count: per_clip.len(),
            per_clip,
            embedder_hash,
        })
    }
}

/// Identifies the embedders a report was computed with.
pub fn embedder_hash(text: &TextEncoder, image: &ImageEncoder, dino: &ImageEncoder) -> String {
    let mut h = Sha256::new();
    for id in 0..text.vocab_size() {
        for v in text.table_row(id) {
            h.update(v.to_le_bytes());
        }
    }
    for enc in [image, dino] {
        h.update(enc.projection().to_bytes());
        h.update(enc.bias().to_bytes());
    }
    hex::encode(h.finalize())
}

/// Plain-text comparison table, one row per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>10}  {:>11}  {:>9}\n",
        "model", "clips", "CLIP-Text", "CLIP-Image", "DINO"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<width$}  {:>6}  {:>10.4}  {:>11.4}  {:>9.4}\n",
            r.model, r.clip_count, r.clip_text, r.clip_image, r.dino
        ));
    }
    s
}

/// One JSON object per line: per-clip rows then an aggregate row per report.
pub fn format_jsonl(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    for r in reports {
        for c in &r.per_clip {
            let row = serde_json::json!({
                "kind": "clip", "model": r.model, "clip_id": c.clip_id,
                "clip_text": c.clip_text, "clip_image": c.clip_image, "dino": c.dino,
            });
            s.push_str(&row.to_string());
            s.push('\n');
        }
        let row = serde_json::json!({
            "kind": "aggregate", "model": r.model, "clips": r.clip_count,
            "clip_text": r.clip_text, "clip_image": r.clip_image, "dino": r.dino,
            "embedder_hash": r.embedder_hash,
        });
        s.push_str(&row.to_string());
        s.push('\n');
    }
    s
}

/// Tallies of a pairwise preference study, formatted as a table.
pub fn format_preference_tally(rows: &[(&str, usize, usize)]) -> String {
    let mut s = format!("{:<24}  {:>6}  {:>6}  {:>7}\n", "comparison", "ours", "other", "ours %");
    for (name, ours, other) in rows {
        let total = ours + other;
        let pct = if total == 0 { 0.0 } else { 100.0 * *ours as f64 / total as f64 };
        s.push_str(&format!("{name:<24}  {ours:>6}  {other:>6}  {pct:>7.2}\n"));
    }
    s
}

/// Lays the frames of `[F, H, W, 3]` pixels in `[-1, 1]` side by side as an 8-bit RGB image.
pub fn frame_grid(video: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::dim(format!("frame grid needs [F, H, W, 3], got {s:?}")));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let mut img = image::RgbImage::new((f * w) as u32, h as u32);
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let base = ((fi * h + y) * w + x) * 3;
                let px = |c: usize| {
                    let v = (video.data()[base + c] + 1.0) * 0.5;
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                img.put_pixel((fi * w + x) as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(img)
}

/// Writes a frame grid as a binary PPM.
pub fn write_frame_grid(video: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = frame_grid(video)?;
    let mut bytes = Vec::new();
    image::codecs::pnm::PnmEncoder::new(&mut bytes)
        .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
        .encode(img.as_raw().as_slice(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_and_orthogonal() {
        assert!((cosine100(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 100.0).abs() < 1e-12);
        assert!(cosine100(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        assert!((cosine100(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 100.0).abs() < 1e-12);
        assert!(matches!(cosine100(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn hand_computed_three_frame_mean() {
        let r = [1.0, 0.0];
        let frames = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let expect = (100.0 + 0.0 + 100.0 / 2f64.sqrt()) / 3.0;
        assert!((frame_mean_score(&r, &frames).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn single_report_table_has_one_row() {
        let c = ClipScores {
            clip_id: "a".into(),
            clip_text: 1.0,
            clip_image: 2.0,
            dino: 3.0,
        };
        let r = MetricReport::new("m", vec![c], "h".into()).unwrap();
        assert_eq!(format_table(&[r]).lines().count(), 2);
    }
}
