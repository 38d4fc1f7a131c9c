//! Session protocol on the mock backbone: layouts, schedule, memory, the
//! freeze ledger, sourcing rules, determinism and checkpoints.

use std::collections::BTreeSet;

use difscil::config::RunConfig;
use difscil::error::Error;
use difscil::eval::{emit, evaluate_session};
use difscil::protocol::{
    beta_schedule, build_sessions, cumulative_classes, sessions_from_classes, update_memory,
    DatasetLayout, DistillSchedule, ExemplarMemory,
};
use difscil::runner::{load_backbone, load_benchmark, new_state, run_in_memory};
use difscil::TrainState;

fn mock_config() -> RunConfig {
    let mut c = RunConfig {
        dataset: "mock".into(),
        backbone: "mock".into(),
        ..RunConfig::default()
    };
    c.protocol.optim.base_epochs = 3;
    c.protocol.optim.inc_epochs = 3;
    c.protocol.prompt.iters = 5;
    c
}

#[test]
fn layouts_match_published_splits() {
    let cub = build_sessions(&DatasetLayout::cub200()).unwrap();
    assert_eq!(cub.len(), 11);
    assert_eq!(
        cumulative_classes(&cub),
        (0..=10).map(|s| 100 + 10 * s).collect::<Vec<_>>()
    );
    for layout in [DatasetLayout::mini_imagenet(), DatasetLayout::cifar100()] {
        let s = build_sessions(&layout).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(
            cumulative_classes(&s),
            (0..=8).map(|k| 60 + 5 * k).collect::<Vec<_>>()
        );
        assert!(s[1..].iter().all(|x| x.shots == Some(5) && x.ways() == 5));
    }
    assert_eq!(
        cumulative_classes(&build_sessions(&DatasetLayout::toy()).unwrap()),
        vec![10, 12, 14]
    );
    assert!(matches!(
        sessions_from_classes(vec![vec![0, 1], vec![1, 2]], 5),
        Err(Error::Spec(_))
    ));
    assert!(DatasetLayout::named("imagenet").is_err());
}

#[test]
fn beta_schedule_values() {
    let sched = DistillSchedule {
        beta_init: 0.1,
        sessions: 8,
    };
    assert!((beta_schedule(4, &sched).unwrap() - 0.55).abs() < 1e-12);
    assert_eq!(beta_schedule(8, &sched).unwrap(), 1.0);
    assert!((beta_schedule(1, &sched).unwrap() - (0.1 + 0.9 / 8.0)).abs() < 1e-12);
    assert!(beta_schedule(0, &sched).is_err());
    assert!(beta_schedule(9, &sched).is_err());
    assert_eq!(difscil::ProtocolConfig::default().beta_init, 0.1);
}

#[test]
fn memory_holds_one_real_sample_per_class() {
    let cfg = mock_config();
    let bench = load_benchmark(&cfg).unwrap();
    let mut mem = ExemplarMemory::default();
    update_memory(&mut mem, &bench.sessions[0], &bench.dataset).unwrap();
    assert_eq!(mem.len(), 10);
    assert!(matches!(
        update_memory(&mut mem, &bench.sessions[0], &bench.dataset),
        Err(Error::Memory(_))
    ));
    update_memory(&mut mem, &bench.sessions[1], &bench.dataset).unwrap();
    assert_eq!(mem.len(), 12);
    for (c, id) in &mem.entries {
        let first = bench
            .dataset
            .train
            .iter()
            .find(|s| s.class_id == *c)
            .unwrap();
        assert_eq!(first.id, *id);
    }
}

#[test]
fn full_mock_run_obeys_freeze_ledger_and_sourcing() {
    let cfg = mock_config();
    let bb = load_backbone("mock").unwrap();
    let bench = load_benchmark(&cfg).unwrap();
    let backbone_before = bb.checksum();
    let mut st = new_state(&cfg, &bb, &bench).unwrap();
    st.train_base(&bench).unwrap();
    let agg = st.aggregator.store.checksum();
    let neck = st.neck.store.checksum();
    assert_eq!(st.memory.len(), 10);
    assert!(matches!(st.train_base(&bench), Err(Error::State(_))));
    assert!(matches!(
        st.train_incremental(&bench, 2),
        Err(Error::Ordering(_))
    ));
    for s in 1..bench.sessions.len() {
        let head = st.head.store.checksum();
        let teacher = st.teacher.as_ref().unwrap().checksum();
        st.train_incremental(&bench, s).unwrap();
        assert_ne!(st.head.store.checksum(), head);
        assert_ne!(st.teacher.as_ref().unwrap().checksum(), teacher);
        assert_eq!(st.aggregator.store.checksum(), agg);
        assert_eq!(st.neck.store.checksum(), neck);
    }
    assert_eq!(bb.checksum(), backbone_before);
    let l = &st.ledger;
    assert!(l[0].aggregator_updated && l[0].neck_updated && l[0].head_updated);
    for (s, e) in l.iter().enumerate().skip(1) {
        assert!(!e.aggregator_updated && !e.neck_updated && e.head_updated);
        let old: BTreeSet<usize> = bench.classes_upto(s - 1).into_iter().collect();
        let new: BTreeSet<usize> = bench.sessions[s].classes.iter().copied().collect();
        assert!(!e.replay_classes.is_empty() && e.replay_classes.iter().all(|c| old.contains(c)));
        assert!(!e.aug_classes.is_empty() && e.aug_classes.iter().all(|c| new.contains(c)));
    }
    assert!(l.iter().all(|e| e.backbone_checksum == backbone_before));
    assert_eq!(st.memory.len(), 14);
}

#[test]
fn zero_beta_contributes_nothing() {
    let mut cfg = mock_config().with_preset("no_distill").unwrap();
    cfg.protocol.optim.inc_epochs = 1;
    let bb = load_backbone("mock").unwrap();
    let bench = load_benchmark(&cfg).unwrap();
    let (_, st) = run_in_memory(&cfg, &bb, &bench, None).unwrap();
    for l in &st.last_losses[1..] {
        assert_eq!(l.beta, 0.0);
        assert_eq!(l.total, l.dr);
    }
    let (_, with) = run_in_memory(&mock_config(), &bb, &bench, None).unwrap();
    assert!(with.last_losses[1..]
        .iter()
        .all(|l| l.beta > 0.0 && l.distill >= 0.0));
}

#[test]
fn inv_only_has_no_distillation_or_prompts() {
    let cfg = mock_config().with_preset("ablation_a").unwrap();
    let bb = load_backbone("mock").unwrap();
    let bench = load_benchmark(&cfg).unwrap();
    let (_, st) = run_in_memory(&cfg, &bb, &bench, None).unwrap();
    assert!(st.prompts.entries.is_empty());
    assert!(st.last_losses.iter().all(|l| l.distill == 0.0));
    assert!(st
        .ledger
        .iter()
        .all(|e| e.aug_classes.is_empty() && e.replay_classes.is_empty()));
}

#[test]
fn runs_are_reproducible_and_checkpoints_resume() {
    let cfg = mock_config();
    let bb = load_backbone("mock").unwrap();
    let bench = load_benchmark(&cfg).unwrap();
    let (s1, st) = run_in_memory(&cfg, &bb, &bench, None).unwrap();
    let (s2, _) = run_in_memory(&cfg, &bb, &bench, None).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    emit(&s1, d1.path()).unwrap();
    emit(&s2, d2.path()).unwrap();
    for f in ["results.jsonl", "summary.csv", "summary.json", "curve.svg"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap(),
            "{f}"
        );
    }

    let path = d1.path().join("final.ck");
    st.save(&path).unwrap();
    let back = TrainState::load(
        &path,
        bb.clone(),
        cfg.protocol.clone(),
        bench.num_classes(),
        st.prompts.clone(),
    )
    .unwrap();
    let imgs: Vec<_> = bench.dataset.test.iter().map(|s| &s.image).collect();
    assert_eq!(
        back.predict(&bench, &imgs).unwrap(),
        st.predict(&bench, &imgs).unwrap()
    );
    assert_eq!(back.memory, st.memory);
    assert_eq!(evaluate_session(&back, &bench, 2).unwrap(), s1.sessions[2]);
    let mut other = cfg.protocol.clone();
    other.m = 6;
    assert!(TrainState::load(&path, bb, other, bench.num_classes(), st.prompts.clone()).is_err());
}

#[test]
fn inference_is_deterministic_and_matches_evaluation_path() {
    let cfg = mock_config();
    let bb = load_backbone("mock").unwrap();
    let bench = load_benchmark(&cfg).unwrap();
    let mut st = new_state(&cfg, &bb, &bench).unwrap();
    assert!(matches!(
        st.infer(&bench, &bench.dataset.test[0].image),
        Err(Error::State(_))
    ));
    st.train_base(&bench).unwrap();
    let base_test: Vec<_> = bench
        .dataset
        .test
        .iter()
        .filter(|s| s.class_id < 10)
        .collect();
    let batch: Vec<_> = base_test.iter().map(|s| &s.image).collect();
    let batched = st.predict(&bench, &batch).unwrap();
    for (s, p) in base_test.iter().zip(&batched) {
        assert_eq!(st.infer(&bench, &s.image).unwrap(), *p);
        assert_eq!(st.infer(&bench, &s.image).unwrap(), *p);
    }
    let r = evaluate_session(&st, &bench, 0).unwrap();
    let correct = base_test
        .iter()
        .zip(&batched)
        .filter(|(s, p)| s.class_id == **p)
        .count();
    assert!((r.acc - 100.0 * correct as f64 / base_test.len() as f64).abs() < 1e-12);
    assert!(evaluate_session(&st, &bench, 1).is_err());
}
