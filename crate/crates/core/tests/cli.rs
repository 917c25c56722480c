mod common;

use std::path::Path;
use std::process::Command;

use videobooth::cli::*;
use videobooth::config::{RunConfig, StageSettings};
use videobooth::dataset::Manifest;
use videobooth::params::StageTag;
use videobooth::trainer::Stage;

fn tiny_run() -> RunConfig {
    let model = common::tiny_config();
    let mut cfg = RunConfig {
        model: model.clone(),
        ..Default::default()
    };
    cfg.data.clips = 24;
    cfg.data.test_count = 3;
    cfg.data.synth = common::tiny_synth(&model);
    let quick = StageSettings {
        steps: 2,
        batch_size: 2,
        ..Default::default()
    };
    cfg.train.base = quick.clone();
    cfg.train.stage1 = quick.clone();
    cfg.train.stage2 = quick.clone();
    cfg.train.refiner = quick;
    cfg.sample.steps = 3;
    cfg.sample.batch = 2;
    cfg.validate().unwrap();
    cfg
}

fn write_ppm(path: &Path) {
    let mut bytes = b"P6\n4 4\n255\n".to_vec();
    for i in 0..16u8 {
        bytes.extend([i * 16, 255 - i * 8, 40]);
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn datagen_train_sample_eval_inspect_round_trip() {
    let cfg = tiny_run();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = cmd_datagen(&cfg, &data).unwrap();
    assert_eq!(d.test, 3);
    assert_eq!(d.verdicts.values().sum::<usize>(), 24);
    assert_eq!(Manifest::load(&data.join("manifest.tsv")).unwrap().hash(), d.manifest_hash);
    assert!(data.join("run.toml").exists());

    let s1 = dir.path().join("s1.ckpt");
    let s2 = dir.path().join("s2.ckpt");
    let t = cmd_train(&cfg, &data, None, None, &s1).unwrap();
    assert_eq!(t.stages, vec![Stage::Base, Stage::Stage1, Stage::Stage2]);
    assert!(t.final_losses.iter().all(|l| l.is_finite()));
    let resolved = RunConfig::load(&resolved_config_beside(&s1)).unwrap();
    assert_eq!(resolved.invocation.as_ref().unwrap().command, "train");

    // a further stage-2 pass on top must leave every non-stage-2 tensor untouched
    cmd_train(&cfg, &data, Some(Stage::Stage2), Some(&s1), &s2).unwrap();
    let report = cmd_inspect(&s2, Some(&s1)).unwrap();
    assert_eq!(report.stages.last(), Some(&Stage::Stage2));
    assert!(!report.changed_with_tag(StageTag::Stage2).is_empty());
    for tag in [StageTag::Base, StageTag::Stage1] {
        assert!(report.changed_with_tag(tag).is_empty(), "{tag:?} moved");
    }
    assert!(report.to_string().contains("stages   base -> stage1 -> stage2 -> stage2"));

    let img = dir.path().join("prompt.ppm");
    write_ppm(&img);
    let sample = |out: &str| cmd_sample(&cfg, &s2, &img, "a dog runs across the field", 4, &dir.path().join(out), None).unwrap();
    let (a, b) = (sample("a"), sample("b"));
    assert_eq!(a.latent_hash, b.latent_hash);
    assert_eq!(a.frames_hash, b.frames_hash);
    let other = cmd_sample(&cfg, &s2, &img, "a dog runs across the field", 5, &dir.path().join("c"), None).unwrap();
    assert_ne!(other.latent_hash, a.latent_hash);
    assert!(cmd_sample(&cfg, &s2, &img, "a dog runs", 4, &dir.path().join("d"), Some(true)).is_err());

    let eval_dir = dir.path().join("eval");
    let reports = cmd_eval(&cfg, std::slice::from_ref(&s2), &data.join("manifest.tsv"), &eval_dir, None).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].per_clip.len(), 3);
    let table = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    assert_eq!(table.lines().count(), 2);
    let jsonl = std::fs::read_to_string(eval_dir.join("report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);
}

#[test]
fn refiner_stage_trains_only_the_refiner_and_output_conv() {
    let mut cfg = tiny_run();
    cfg.data.synth.watermark = true;
    cfg.refiner = videobooth::refiner::RefinerConfig::for_backbone(cfg.model.unet.base_channels);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_datagen(&cfg, &data).unwrap();
    let base = dir.path().join("base.ckpt");
    let refined = dir.path().join("refined.ckpt");
    cmd_train(&cfg, &data, Some(Stage::Base), None, &base).unwrap();
    cmd_train(&cfg, &data, Some(Stage::Refiner), Some(&base), &refined).unwrap();
    let report = cmd_inspect(&refined, Some(&base)).unwrap();
    for r in &report.rows {
        if r.unchanged == Some(false) {
            assert!(r.name.starts_with("conv_out."), "{} moved", r.name);
        }
    }
    assert!(report.rows.iter().any(|r| r.tag == StageTag::Refiner && r.unchanged.is_none()));
}

#[test]
fn binary_exposes_every_subcommand_and_maps_errors_to_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_videobooth");
    let help = Command::new(bin).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["datagen", "train", "sample", "eval", "inspect"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[features]\ninjektion = false\n").unwrap();
    let out = Command::new(bin).args(["--config", bad.to_str().unwrap(), "inspect", "nothing.ckpt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).args(["inspect", dir.path().join("missing.ckpt").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = Command::new(bin)
        .args(["train", "--data", dir.path().to_str().unwrap(), "--stage", "stage9", "--out", "x.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
