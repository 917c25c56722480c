use std::collections::BTreeSet;

use proptest::prelude::*;
use videobooth::dataset::*;
use videobooth::{RngStream, Tensor};

fn record(id: usize, caption: &str, ratio: f64) -> ManifestRecord {
    let mut r = ManifestRecord {
        clip_id: format!("r{id:03}"),
        caption: caption.into(),
        span: None,
        class: "-".into(),
        area_ratio: ratio,
        verdict: Verdict::Kept,
        split: Split::Unassigned,
    };
    annotate(&mut r);
    r
}

#[test]
fn empty_generation_and_determinism() {
    let cfg = SynthConfig::default();
    assert!(synth_generate(0, 1, &cfg).unwrap().is_empty());
    let a = synth_generate(6, 42, &cfg).unwrap();
    let b = synth_generate(6, 42, &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.video.bitwise_eq(&y.video));
        assert_eq!(x.subject_mask, y.subject_mask);
        assert_eq!(x.meta, y.meta);
    }
    let c = synth_generate(6, 43, &cfg).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| !x.video.bitwise_eq(&y.video)));
}

/// Area and perimeter of each silhouette in units of the half side.
fn silhouette_geometry(shape: usize) -> (f64, f64) {
    use std::f64::consts::PI;
    match shape {
        0 => (PI, 2.0 * PI),
        1 => (2.0, 2.0 + 2.0 * 5f64.sqrt()),
        2 => (4.0, 8.0),
        3 => (2.0, 6.0),
        4 => (0.75 * PI, 3.0 * PI),
        5 => (2.0, 4.0 * 2f64.sqrt()),
        6 => (2.0, 6.0),
        7 => (0.6 * PI, PI * (4.8 - (3.6f64 * 2.8).sqrt())),
        _ => (2.31, 8.0),
    }
}

#[test]
fn mask_area_matches_the_analytic_silhouette_within_one_pixel_ring() {
    let cfg = SynthConfig::default();
    for i in 0..40 {
        let clip = synth_clip(i, 7, &cfg).unwrap();
        // the generator draws class then side first from the clip's stream
        let mut rng = RngStream::new(7).split(1000 + i as u64);
        let class = &cfg.classes[rng.below(cfg.classes.len())];
        assert_eq!(class, &clip.subject_class);
        let half = rng.uniform_in(cfg.subject_scale[0], cfg.subject_scale[1]) * 32.0 / 2.0;
        let (area, perimeter) = silhouette_geometry(class_shape(class));
        let want = area * half * half;
        let got = clip.subject_mask.count() as f64;
        assert!((got - want).abs() <= perimeter * half, "clip {i} {class}: {got} vs {want:.1}");
        assert_eq!(clip.meta.area_ratio, got / 1024.0);
    }
}

#[test]
fn full_frame_mask_prompt_is_the_first_frame() {
    let clip = synth_clip(0, 1, &SynthConfig::default()).unwrap();
    let full = Mask::new(32, 32, vec![true; 1024]).unwrap();
    let p = extract_prompt_image(&clip.video, &full, 32).unwrap();
    assert_eq!(p.data(), &clip.video.data()[..32 * 32 * 3]);
}

#[test]
fn single_pixel_mask_prompt_is_constant() {
    let clip = synth_clip(1, 1, &SynthConfig::default()).unwrap();
    let mut bits = vec![false; 1024];
    bits[5 * 32 + 9] = true;
    let p = extract_prompt_image(&clip.video, &Mask::new(32, 32, bits).unwrap(), 16).unwrap();
    let px = &clip.video.data()[(5 * 32 + 9) * 3..(5 * 32 + 9) * 3 + 3];
    assert!(p.data().chunks(3).all(|c| c == px));
    let empty = Mask::new(32, 32, vec![false; 1024]).unwrap();
    assert!(matches!(extract_prompt_image(&clip.video, &empty, 16), Err(videobooth::Error::Extraction(_))));
}

#[test]
fn square_subject_prompt_is_zero_off_mask() {
    let cfg = SynthConfig {
        classes: vec!["bear".into()],
        ..Default::default()
    };
    for i in 0..5 {
        let clip = synth_clip(i, 3, &cfg).unwrap();
        let m = &clip.subject_mask;
        let (y0, y1, x0, x1) = m.bounding_box().unwrap();
        let size = 16;
        let p = clip.prompt_image(size).unwrap();
        for oy in 0..size {
            for ox in 0..size {
                // nearest source pixel inside the bounding box
                let (y, x) = (y0 + oy * (y1 - y0) / size, x0 + ox * (x1 - x0) / size);
                let on = m.get(y, x);
                for c in 0..3 {
                    let want = if on { clip.video.at(&[0, y, x, c]) } else { 0.0 };
                    assert_eq!(p.at(&[oy, ox, c]), want);
                }
            }
        }
    }
}

#[test]
fn crafted_records_get_the_expected_verdicts() {
    let rules = FilterRules::default();
    let mut rs = vec![
        record(0, "a happy dog runs", 0.2),
        record(1, "a happy dog runs", 0.0),
        record(2, "a happy dog runs", 1.0),
        record(3, "the calm zebra walks", 0.3),
        record(4, "sunset over the ocean", 0.3),
        record(5, "big panda plays", 0.05),
        record(6, "big panda plays", 0.85),
        record(7, "brave lion turns back", 0.049),
        record(8, "brave fox turns back", 0.9),
        record(9, "an old elephant wanders", 0.5),
    ];
    filter_records(&mut rs, &rules);
    let got: Vec<Verdict> = rs.iter().map(|r| r.verdict).collect();
    use Verdict::*;
    assert_eq!(got, vec![Kept, TooSmall, TooLarge, ClassRejected, ClassRejected, Kept, Kept, TooSmall, TooLarge, Kept]);
    assert_eq!(rules.keywords, ["dog", "cat", "bear", "car", "panda", "tiger", "horse", "elephant", "lion"]);
}

fn kept_records(n: usize) -> Vec<ManifestRecord> {
    (0..n).map(|i| record(i, "a happy dog runs", 0.3)).collect()
}

#[test]
fn split_edge_cases() {
    let m = split_manifest(kept_records(12), 0, 1).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (12, 0));
    let m = split_manifest(kept_records(12), 12, 1).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (0, 12));
    assert!(matches!(
        split_manifest(kept_records(12), 13, 1),
        Err(videobooth::Error::Split { requested: 13, available: 12 })
    ));
    let mut rs = kept_records(5);
    rs[2].verdict = Verdict::TooSmall;
    let m = split_manifest(rs, 2, 3).unwrap();
    assert_eq!(m.records[2].split, Split::Unassigned);
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (2, 2));
}

#[test]
fn splits_are_disjoint_over_many_seeds() {
    for seed in 0..100 {
        let m = split_manifest(kept_records(40), 10, seed).unwrap();
        let train: BTreeSet<_> = m.split(Split::Train).map(|r| r.clip_id.clone()).collect();
        let test: BTreeSet<_> = m.split(Split::Test).map(|r| r.clip_id.clone()).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!((train.len(), test.len()), (30, 10));
    }
}

#[test]
fn caption_parsing_examples() {
    let p = parse_subject_span("papillon dog celebrates birthday with gifts").unwrap();
    assert_eq!(p.tokens[p.k..p.k + p.n], ["papillon", "dog"]);
    assert_eq!(p.head, "dog");
    let p = parse_subject_span("a red car drives fast").unwrap();
    assert_eq!((p.k, p.n, p.head.as_str()), (1, 2, "car"));
    assert!(matches!(parse_subject_span("sunset over the ocean"), Err(videobooth::Error::Parse(_))));
}

#[test]
fn curated_pipeline_is_pure_and_round_trips() {
    let run = || {
        let mut clips = synth_generate(30, 9, &SynthConfig::default()).unwrap();
        curate(&mut clips, &FilterRules::default(), 5, 9).unwrap()
    };
    let m = run();
    assert_eq!(m.hash(), run().hash());
    assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    for r in m.records.iter().filter(|r| r.verdict == Verdict::Kept) {
        assert!((0.05..=0.85).contains(&r.area_ratio));
        assert!(KEYWORD_CLASSES.contains(&r.class.as_str()));
    }
    assert!(matches!(Manifest::parse("clip\tx\n"), Err(videobooth::Error::Version(_))));

    let dir = tempfile::tempdir().unwrap();
    let mut clips = synth_generate(8, 2, &SynthConfig::default()).unwrap();
    let m = curate(&mut clips, &FilterRules::default(), 2, 2).unwrap();
    save_clip_store(dir.path(), &clips, &m).unwrap();
    let loaded = Manifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded, m);
    let test = load_clips(dir.path(), &loaded, Split::Test).unwrap();
    assert_eq!(test.len(), 2);
    for c in &test {
        let orig = clips.iter().find(|o| o.meta.clip_id == c.meta.clip_id).unwrap();
        assert!(c.video.bitwise_eq(&orig.video));
        assert_eq!(c.subject_mask, orig.subject_mask);
    }
}

#[test]
fn mask_bitmap_has_a_sixteen_byte_header() {
    let m = Mask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
    let bytes = m.to_bytes();
    assert_eq!(bytes.len(), 16 + 6);
    assert_eq!(&bytes[..8], b"VBMASK01");
    assert_eq!(Mask::from_bytes(&bytes).unwrap(), m);
    let mut bad = bytes.clone();
    bad[16] = 7;
    assert!(Mask::from_bytes(&bad).is_err());
    assert!(Mask::from_bytes(&bytes[..10]).is_err());
}

proptest! {
    #[test]
    fn parsed_spans_fuse_cleanly(adj in 0usize..3, cls in 0usize..9, det in proptest::bool::ANY) {
        let adjs = ["", "happy ", "brave old "];
        let caption = format!("{}{}{} walks slowly", if det { "the " } else { "" }, adjs[adj], KEYWORD_CLASSES[cls]);
        let p = parse_subject_span(&caption).unwrap();
        prop_assert!(p.n >= 1 && p.k + p.n <= p.tokens.len());
        prop_assert_eq!(&p.tokens[p.k + p.n - 1], KEYWORD_CLASSES[cls]);
        let g = videobooth::Graph::<f64>::new();
        let len = p.tokens.len();
        let ft = g.constant(Tensor::zeros(vec![8, 2]));
        let fi = g.constant(Tensor::zeros(vec![2]));
        let c = videobooth::conditioning::fuse(&g, ft, len, fi, p.k, p.n, &Tensor::zeros(vec![8, 2])).unwrap();
        prop_assert_eq!(c.len(), len - p.n + 1);
    }
}
