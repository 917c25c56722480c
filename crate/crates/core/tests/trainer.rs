mod common;

use std::collections::BTreeSet;

use common::{tiny_examples, tiny_model};
use videobooth::params::StageTag;
use videobooth::trainer::*;

fn names_where(model: &videobooth::model::VideoBooth<f32>, f: impl Fn(&str, StageTag) -> bool) -> BTreeSet<String> {
    model.store.iter().filter(|(n, e)| f(n, e.tag)).map(|(n, _)| n.to_string()).collect()
}

#[test]
fn stage_subsets_are_exact() {
    let model = tiny_model(1);
    let s1 = select_trainable(&model.store, &StagePlan::new(Stage::Stage1, 1, 1, 1e-3, 0)).unwrap();
    let want1 = names_where(&model, |n, _| n.starts_with("mapper.") || n.contains(".xattn.k") || n.contains(".xattn.v"));
    assert_eq!(s1, want1);
    assert!(!s1.is_empty());

    let s2 = select_trainable(&model.store, &StagePlan::new(Stage::Stage2, 1, 1, 1e-3, 0)).unwrap();
    let want2 = names_where(&model, |n, _| n.contains(".inj_"));
    assert_eq!(s2, want2);
    assert!(!s2.is_empty());

    let base = select_trainable(&model.store, &StagePlan::new(Stage::Base, 1, 1, 1e-3, 0)).unwrap();
    assert!(base.iter().all(|n| !n.starts_with("mapper.") && !n.contains(".inj_")));
    assert!(base.is_superset(&names_where(&model, |n, _| n.contains(".xattn.k"))));

    let mut bad = StagePlan::new(Stage::Stage1, 1, 1, 1e-3, 0);
    bad.tags = vec!["nonsense".into()];
    assert!(matches!(select_trainable(&model.store, &bad), Err(videobooth::Error::Plan(_))));
    assert!(matches!("stage9".parse::<Stage>(), Err(videobooth::Error::Plan(_))));
}

#[test]
fn empty_plan_and_zero_lr_leave_parameters_bitwise_unchanged() {
    let mut model = tiny_model(2);
    let data = tiny_examples(&model, 3, 2);
    let before = model.store.hashes();
    let mut empty = StagePlan::new(Stage::Stage1, 3, 2, 1e-2, 0);
    empty.tags.clear();
    assert!(select_trainable(&model.store, &empty).unwrap().is_empty());
    run_stage(&mut model, &data, &empty, None).unwrap();
    assert_eq!(model.store.hashes(), before);

    let frozen = StagePlan::new(Stage::Stage1, 3, 2, 0.0, 0);
    let losses = run_stage(&mut model, &data, &frozen, None).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert_eq!(model.store.hashes(), before);
}

#[test]
fn stage_training_only_moves_its_own_tensors() {
    let mut model = tiny_model(3);
    let data = tiny_examples(&model, 4, 3);
    let init = model.store.clone();
    run_stage(&mut model, &data, &StagePlan::new(Stage::Stage1, 3, 2, 1e-2, 5), None).unwrap();
    let s1 = select_trainable(&init, &StagePlan::new(Stage::Stage1, 1, 1, 1.0, 0)).unwrap();
    let changed = changed_entries(&init, &model.store);
    assert!(!changed.is_empty() && changed.is_subset(&s1));

    let after1 = model.store.clone();
    let plan2 = StagePlan::new(Stage::Stage2, 3, 2, 1e-2, 6);
    run_stage(&mut model, &data, &plan2, None).unwrap();
    let changed = changed_entries(&after1, &model.store);
    let s2 = select_trainable(&after1, &plan2).unwrap();
    assert!(!changed.is_empty() && changed.is_subset(&s2));
    for (n, e) in after1.iter() {
        if e.tag != StageTag::Stage2 {
            assert!(model.store.get(n).unwrap().bitwise_eq(&e.value), "{n} moved in stage 2");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = tiny_model(4);
        let data = tiny_examples(&model, 3, 4);
        let losses = run_stage(&mut model, &data, &StagePlan::new(Stage::Stage1, 2, 2, 1e-2, 9), None).unwrap();
        (losses, model.store.digest())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn single_clip_overfits_tenfold() {
    let mut model = tiny_model(5);
    let data = tiny_examples(&model, 1, 5);
    let plan = StagePlan::new(Stage::Base, 500, 4, 1e-2, 11);
    let losses = run_stage(&mut model, &data, &plan, None).unwrap();
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    println!("first {:.4} last-10 mean {:.4}", losses[0], tail);
    assert!(losses[0] >= 10.0 * tail, "{} vs {}", losses[0], tail);
}
