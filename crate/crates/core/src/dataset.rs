//! Synthetic moving-subject clips and the curation protocol: first-frame
//! subject masks, noun-chunk caption parsing, size and keyword filtering,
//! prompt-image extraction and a seeded train/test split.
//!
//! Every clip shows one two-tone subject whose silhouette is fixed by its
//! class and whose colors are drawn per clip, moving over a faint textured
//! background. Captions never mention color, so appearance is only
//! recoverable from the image prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::caption_words;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Subject classes kept by the keyword filter.
pub const KEYWORD_CLASSES: [&str; 9] = ["dog", "cat", "bear", "car", "panda", "tiger", "horse", "elephant", "lion"];

/// Nouns the caption parser recognizes beyond the keyword classes.
pub const EXTRA_NOUNS: [&str; 4] = ["zebra", "boat", "bird", "fox"];

pub const DETERMINERS: [&str; 12] = ["a", "an", "the", "this", "that", "some", "my", "his", "her", "its", "their", "our"];

/// Modifiers the noun-chunk grammar accepts before a head noun.
pub const ADJECTIVES: [&str; 28] = [
    "happy", "playful", "curious", "sleepy", "brave", "lonely", "friendly", "young", "old", "wild", "calm", "proud",
    "papillon", "golden", "little", "big", "small", "large", "red", "blue", "green", "black", "white", "brown",
    "yellow", "fluffy", "cute", "giant",
];

/// Adjectives used by the generator; none of them describe appearance.
const SYNTH_ADJECTIVES: [&str; 8] = ["happy", "playful", "curious", "sleepy", "brave", "friendly", "calm", "proud"];

const SYNTH_VERBS: [&str; 6] = [
    "runs across the field",
    "walks slowly",
    "plays outside",
    "moves forward",
    "wanders around",
    "turns back",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    /// Subject bounding-box side as a fraction of the frame side.
    pub subject_scale: [f64; 2],
    /// Maximum per-frame displacement in pixels.
    pub max_speed: f64,
    /// Stamp the fixed semi-transparent glyph on every frame.
    pub watermark: bool,
    /// Probability that a caption starts with a determiner.
    pub determiner_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 8,
            height: 32,
            width: 32,
            classes: KEYWORD_CLASSES.iter().map(|s| s.to_string()).collect(),
            subject_scale: [0.35, 0.6],
            max_speed: 1.5,
            watermark: false,
            determiner_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub keywords: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_ratio: 0.05,
            max_ratio: 0.85,
            keywords: KEYWORD_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Kept,
    TooSmall,
    TooLarge,
    ClassRejected,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Kept => "kept",
            Verdict::TooSmall => "too_small",
            Verdict::TooLarge => "too_large",
            Verdict::ClassRejected => "class_rejected",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kept" => Ok(Verdict::Kept),
            "too_small" => Ok(Verdict::TooSmall),
            "too_large" => Ok(Verdict::TooLarge),
            "class_rejected" => Ok(Verdict::ClassRejected),
            other => Err(Error::Parse(format!("unknown verdict `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    /// Not assigned (rejected records).
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "-",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "-" => Ok(Split::Unassigned),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// A noun chunk located in a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionParse {
    pub tokens: Vec<String>,
    /// First token of the subject span (determiner excluded).
    pub k: usize,
    /// Span length, adjectives plus head noun.
    pub n: usize,
    pub head: String,
}

/// Finds the first chunk `determiner? adjective* noun` whose noun is in
/// `nouns` and returns its span without the determiner.
pub fn parse_subject_span_with(caption: &str, nouns: &[&str], adjectives: &[&str]) -> Result<CaptionParse> {
    let tokens = caption_words(caption);
    let j = tokens
        .iter()
        .position(|t| nouns.contains(&t.as_str()))
        .ok_or_else(|| Error::Parse(format!("no subject noun in `{caption}`")))?;
    let mut k = j;
    while k > 0 && adjectives.contains(&tokens[k - 1].as_str()) {
        k -= 1;
    }
    Ok(CaptionParse {
        head: tokens[j].clone(),
        k,
        n: j - k + 1,
        tokens,
    })
}

/// [`parse_subject_span_with`] over the default lexicons.
pub fn parse_subject_span(caption: &str) -> Result<CaptionParse> {
    let nouns: Vec<&str> = KEYWORD_CLASSES.iter().chain(EXTRA_NOUNS.iter()).copied().collect();
    parse_subject_span_with(caption, &nouns, &ADJECTIVES)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub caption: String,
    /// `(k, n)` when the caption parsed.
    pub span: Option<(usize, usize)>,
    /// Head noun, or `-` when parsing failed.
    pub class: String,
    pub area_ratio: f64,
    pub verdict: Verdict,
    pub split: Split,
}

/// A boolean first-frame mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

const MASK_MAGIC: &[u8; 8] = b"VBMASK01";

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(format!("mask of {} bits for {height}x{width}", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// `(y0, y1, x0, x1)` half-open, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, y + 1, x, x + 1),
                        Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// 16-byte header (`VBMASK01`, u32 LE height, u32 LE width) then one byte per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len());
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend(self.bits.iter().map(|&b| b as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MASK_MAGIC {
            return Err(Error::Version("not a mask bitmap".into()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != h * w {
            return Err(Error::Parse(format!("mask body of {} bytes for {h}x{w}", body.len())));
        }
        if let Some(b) = body.iter().find(|&&b| b > 1) {
            return Err(Error::Parse(format!("mask byte {b} is not 0 or 1")));
        }
        Mask::new(h, w, body.iter().map(|&b| b == 1).collect())
    }
}

/// A generated clip with its curation metadata.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    /// `[F, H, W, 3]` pixels in `[-1, 1]`.
    pub video: Tensor<f32>,
    pub subject_class: String,
    pub subject_mask: Mask,
    pub meta: ManifestRecord,
}

/// Silhouette test in normalized coordinates `u, v ∈ [-1, 1]` (v grows downward).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        2 => u.abs() <= 1.0 && v.abs() <= 1.0,
        3 => u.abs() <= 1.0 && v.abs() <= 0.5,
        4 => {
            let r2 = u * u + v * v;
            (0.25..=1.0).contains(&r2)
        }
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 0.5 && v.abs() <= 1.0,
        7 => u * u + (v / 0.6).powi(2) <= 1.0,
        _ => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
    }
}

/// Silhouette index for a class name.
pub fn class_shape(class: &str) -> usize {
    if let Some(i) = KEYWORD_CLASSES.iter().position(|c| *c == class) {
        return i;
    }
    let h = Sha256::digest(class.as_bytes());
    h[0] as usize % KEYWORD_CLASSES.len()
}

/// Semi-transparent glyph weight at a pixel (a small ring with a bar in the lower-right corner).
fn glyph_alpha(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let size = (h.min(w) / 4).max(4);
    if y + size < h && x + size < w {
        return 0.0;
    }
    let cy = (h - size / 2) as f64 - 1.0;
    let cx = (w - size / 2) as f64 - 1.0;
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    let r = (dy * dy + dx * dx).sqrt();
    let half = size as f64 / 2.0;
    if (r - half * 0.7).abs() <= 0.6 || (dy.abs() <= 0.5 && dx.abs() <= half * 0.7) {
        0.5
    } else {
        0.0
    }
}

/// Renders one clip from its own random stream.
pub fn synth_clip(index: usize, seed: u64, cfg: &SynthConfig) -> Result<ClipRecord> {
    if cfg.classes.is_empty() {
        return Err(Error::Config("synthetic generator needs at least one class".into()));
    }
    let mut rng = RngStream::new(seed).split(1000 + index as u64);
    let (f, h, w) = (cfg.frames, cfg.height, cfg.width);
    let class = cfg.classes[rng.below(cfg.classes.len())].clone();
    let shape = class_shape(&class);
    let side = rng.uniform_in(cfg.subject_scale[0], cfg.subject_scale[1]) * h.min(w) as f64;
    let half = side / 2.0;
    let colors: [[f64; 3]; 2] = [
        [rng.uniform_in(-0.9, 0.9), rng.uniform_in(-0.9, 0.9), rng.uniform_in(-0.9, 0.9)],
        [rng.uniform_in(-0.9, 0.9), rng.uniform_in(-0.9, 0.9), rng.uniform_in(-0.9, 0.9)],
    ];
    let bg_level = rng.uniform_in(-0.3, 0.3);
    let (fy, fx) = (rng.uniform_in(0.2, 0.8), rng.uniform_in(0.2, 0.8));
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (lo_y, hi_y) = (half.min(h as f64 / 2.0), (h as f64 - half).max(h as f64 / 2.0));
    let (lo_x, hi_x) = (half.min(w as f64 / 2.0), (w as f64 - half).max(w as f64 / 2.0));
    let mut cy = rng.uniform_in(lo_y, hi_y);
    let mut cx = rng.uniform_in(lo_x, hi_x);
    let mut vy = rng.uniform_in(-cfg.max_speed, cfg.max_speed);
    let mut vx = rng.uniform_in(-cfg.max_speed, cfg.max_speed);

    let mut video = Vec::with_capacity(f * h * w * 3);
    let mut mask_bits = vec![false; h * w];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5 - cx) / half;
                let v = (y as f64 + 0.5 - cy) / half;
                let px = if inside(shape, u, v) {
                    if fi == 0 {
                        mask_bits[y * w + x] = true;
                    }
                    colors[(v >= 0.0) as usize]
                } else {
                    let t = 0.1 * ((fy * y as f64 + phase).sin() * (fx * x as f64).cos());
                    [bg_level + t; 3]
                };
                let a = if cfg.watermark { glyph_alpha(y, x, h, w) } else { 0.0 };
                video.extend(px.iter().map(|&c| ((1.0 - a) * c + a) as f32));
            }
        }
        cy += vy;
        cx += vx;
        if cy < lo_y || cy > hi_y {
            vy = -vy;
            cy = cy.clamp(lo_y, hi_y);
        }
        if cx < lo_x || cx > hi_x {
            vx = -vx;
            cx = cx.clamp(lo_x, hi_x);
        }
    }
    let video = Tensor::new(vec![f, h, w, 3], video)?;
    let mask = Mask::new(h, w, mask_bits)?;

    let adjective = SYNTH_ADJECTIVES[rng.below(SYNTH_ADJECTIVES.len())];
    let verb = SYNTH_VERBS[rng.below(SYNTH_VERBS.len())];
    let det = if rng.uniform() < cfg.determiner_prob { "a " } else { "" };
    let caption = format!("{det}{adjective} {class} {verb}");
    let meta = ManifestRecord {
        clip_id: format!("clip{index:06}"),
        caption,
        span: None,
        class: "-".into(),
        area_ratio: mask.area_ratio(),
        verdict: Verdict::Kept,
        split: Split::Unassigned,
    };
    let mut rec = ClipRecord {
        video,
        subject_class: class,
        subject_mask: mask,
        meta,
    };
    annotate(&mut rec.meta);
    Ok(rec)
}

/// Fills in the parsed span and head noun (or marks a parse failure).
pub fn annotate(meta: &mut ManifestRecord) {
    match parse_subject_span(&meta.caption) {
        Ok(p) => {
            meta.span = Some((p.k, p.n));
            meta.class = p.head;
        }
        Err(_) => {
            meta.span = None;
            meta.class = "-".into();
        }
    }
}

/// `n_clips` clips, each a pure function of `(seed, index, config)`.
pub fn synth_generate(n_clips: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<ClipRecord>> {
    (0..n_clips).map(|i| synth_clip(i, seed, cfg)).collect()
}

/// Assigns a verdict to every record.
pub fn filter_records(records: &mut [ManifestRecord], rules: &FilterRules) {
    for r in records {
        r.verdict = verdict_for(r, rules);
    }
}

pub fn verdict_for(r: &ManifestRecord, rules: &FilterRules) -> Verdict {
    if r.area_ratio < rules.min_ratio {
        Verdict::TooSmall
    } else if r.area_ratio > rules.max_ratio {
        Verdict::TooLarge
    } else if r.span.is_none() || !rules.keywords.contains(&r.class) {
        Verdict::ClassRejected
    } else {
        Verdict::Kept
    }
}

/// Curated, split records.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: &str = "# videobooth-manifest v1";
const MANIFEST_COLUMNS: &str = "clip_id\tcaption\tk\tn\tclass\tarea_ratio\tverdict\tsplit";

/// Shuffles the kept records with `seed` and assigns the first
/// `test_count` to the test split; everything else kept goes to train.
pub fn split_manifest(mut records: Vec<ManifestRecord>, test_count: usize, seed: u64) -> Result<Manifest> {
    let mut kept: Vec<usize> = (0..records.len()).filter(|&i| records[i].verdict == Verdict::Kept).collect();
    if test_count > kept.len() {
        return Err(Error::Split {
            requested: test_count,
            available: kept.len(),
        });
    }
    RngStream::new(seed).split(7).shuffle(&mut kept);
    for r in records.iter_mut() {
        r.split = Split::Unassigned;
    }
    for (rank, &i) in kept.iter().enumerate() {
        records[i].split = if rank < test_count { Split::Test } else { Split::Train };
    }
    Ok(Manifest { records })
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn verdict_counts(&self) -> BTreeMap<Verdict, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.verdict).or_insert(0) += 1;
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n{MANIFEST_COLUMNS}\n");
        for r in &self.records {
            let (k, n) = match r.span {
                Some((k, n)) => (k.to_string(), n.to_string()),
                None => ("-".into(), "-".into()),
            };
            s.push_str(&format!(
                "{}\t{}\t{k}\t{n}\t{}\t{}\t{}\t{}\n",
                r.clip_id,
                r.caption,
                r.class,
                r.area_ratio,
                r.verdict,
                r.split.as_str()
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Version(format!("manifest must start with `{MANIFEST_HEADER}`")));
        }
        if lines.next() != Some(MANIFEST_COLUMNS) {
            return Err(Error::Parse("manifest column header missing".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Parse(format!("manifest row {}: {m}", i + 1));
            if f.len() != 8 {
                return Err(bad("expected 8 tab-separated fields"));
            }
            let span = match (f[2], f[3]) {
                ("-", "-") => None,
                (k, n) => Some((
                    k.parse().map_err(|_| bad("bad k"))?,
                    n.parse().map_err(|_| bad("bad n"))?,
                )),
            };
            records.push(ManifestRecord {
                clip_id: f[0].into(),
                caption: f[1].into(),
                span,
                class: f[4].into(),
                area_ratio: f[5].parse().map_err(|_| bad("bad area_ratio"))?,
                verdict: f[6].parse()?,
                split: f[7].parse()?,
            });
        }
        Ok(Manifest { records })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text).map_err(|e| match e {
            Error::Parse(msg) | Error::Version(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

/// Writes through a temporary file in the same directory so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// First-frame subject pixels on a zero background, cropped to the mask's
/// bounding box and resized (nearest) to `size x size`.
pub fn extract_prompt_image(video: &Tensor<f32>, mask: &Mask, size: usize) -> Result<Tensor<f32>> {
    let s = video.shape();
    if s.len() != 4 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::dim(format!(
            "mask {}x{} does not match video {:?}",
            mask.height, mask.width, s
        )));
    }
    let c = s[3];
    let (y0, y1, x0, x1) = mask
        .bounding_box()
        .ok_or_else(|| Error::Extraction("empty subject mask".into()))?;
    let (bh, bw) = (y1 - y0, x1 - x0);
    let first = &video.data()[..s[1] * s[2] * c];
    let mut out = Vec::with_capacity(size * size * c);
    for oy in 0..size {
        let y = y0 + oy * bh / size;
        for ox in 0..size {
            let x = x0 + ox * bw / size;
            let on = mask.get(y, x);
            for ch in 0..c {
                out.push(if on { first[(y * s[2] + x) * c + ch] } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![size, size, c], out)
}

impl ClipRecord {
    pub fn prompt_image(&self, size: usize) -> Result<Tensor<f32>> {
        extract_prompt_image(&self.video, &self.subject_mask, size)
    }
}

/// File holding a clip's `[F, H, W, 3]` pixels inside a clip store.
pub fn clip_video_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join("clips").join(format!("{clip_id}.vbt"))
}

/// File holding a clip's first-frame subject mask inside a clip store.
pub fn clip_mask_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join("clips").join(format!("{clip_id}.mask"))
}

/// Watermark-free pixels of a clip, stored next to the stamped ones.
pub fn clean_video_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join("clips").join(format!("{clip_id}.clean.vbt"))
}

/// Writes `manifest.tsv` plus one pixel blob and one mask per clip.
pub fn save_clip_store(dir: &Path, clips: &[ClipRecord], manifest: &Manifest) -> Result<()> {
    for c in clips {
        write_atomic(&clip_video_path(dir, &c.meta.clip_id), &c.video.to_bytes())?;
        write_atomic(&clip_mask_path(dir, &c.meta.clip_id), &c.subject_mask.to_bytes())?;
    }
    manifest.save(&dir.join("manifest.tsv"))
}

/// Loads the clips of `manifest` assigned to `split` from the store at `dir`.
pub fn load_clips(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<ClipRecord>> {
    manifest
        .split(split)
        .map(|m| {
            let vp = clip_video_path(dir, &m.clip_id);
            let mp = clip_mask_path(dir, &m.clip_id);
            let video = Tensor::from_bytes(&std::fs::read(&vp).map_err(|e| Error::io(&vp, e))?)?;
            let subject_mask = Mask::from_bytes(&std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
            let s = video.shape();
            if s.len() != 4 || s[1] != subject_mask.height || s[2] != subject_mask.width {
                return Err(Error::Format {
                    path: vp,
                    msg: format!("clip {s:?} does not match its mask"),
                });
            }
            Ok(ClipRecord {
                video,
                subject_class: m.class.clone(),
                subject_mask,
                meta: m.clone(),
            })
        })
        .collect()
}

/// The generator plus the curation protocol in one call.
pub fn curate(clips: &mut [ClipRecord], rules: &FilterRules, test_count: usize, seed: u64) -> Result<Manifest> {
    let mut metas: Vec<ManifestRecord> = clips.iter().map(|c| c.meta.clone()).collect();
    filter_records(&mut metas, rules);
    let manifest = split_manifest(metas, test_count, seed)?;
    for (c, m) in clips.iter_mut().zip(&manifest.records) {
        c.meta = m.clone();
    }
    Ok(manifest)
}
