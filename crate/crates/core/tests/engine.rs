mod common;

use std::sync::OnceLock;

use common::quick_bundle;
use disc_core::classifier::{TrainMode, TrainedBundle};
use disc_core::datasets::{make_toy_dataset, LabeledImageSet};
use disc_core::engine::*;
use disc_core::objectives::{predicted_label, ObjectiveSpec, TargetSpec};
use disc_core::priors::{bitwise_equal, GeneratorState, InrConfig, PriorConfig, PriorKind};
use disc_core::seed;

fn bundle() -> &'static TrainedBundle {
    static B: OnceLock<TrainedBundle> = OnceLock::new();
    B.get_or_init(|| quick_bundle(TrainMode::Dep))
}

fn queries(n: usize) -> LabeledImageSet {
    make_toy_dataset(n, 16, 5).unwrap().of_class(0).unwrap()
}

fn settings() -> RunSettings {
    RunSettings {
        prior: PriorConfig {
            kind: PriorKind::Inr,
            inr: InrConfig {
                num_frequencies: 32,
                hidden_width: 16,
                ..InrConfig::default()
            },
            warm_start_steps: Some(40),
            ..PriorConfig::default()
        },
        objective: ObjectiveSpec::default(),
        policy: StagePolicy {
            steps_per_stage: 12,
            plateau_window: 5,
            success_prob: 1.0,
            ..StagePolicy::default()
        },
        master_seed: 17,
    }
}

fn same(a: &CFResult, b: &CFResult) -> bool {
    bitwise_equal(&a.counterfactual, &b.counterfactual).unwrap()
        && a.trajectory == b.trajectory
        && a.success == b.success
        && a.final_prob.to_bits() == b.final_prob.to_bits()
        && a.seed == b.seed
}

#[test]
fn zero_stages_returns_initial_render() {
    let q = queries(1).image(0).unwrap();
    let s = settings();
    let mut state = GeneratorState::build(&s.prior, &q, 1).unwrap();
    warm_start_prior(&mut state, &q, 10, 1e-3).unwrap();
    let initial = state.render().unwrap();
    let policy = StagePolicy { max_stages: Some(0), ..s.policy.clone() };
    let r = generate_cf(&q, TargetSpec::flip(0, 1), bundle(), &mut state, &s.objective, &policy).unwrap();
    assert!(r.trajectory.is_empty());
    assert_eq!(r.stages_run, 0);
    assert!(r.stage_snapshots.is_empty());
    assert!(bitwise_equal(&r.counterfactual, &initial).unwrap());
    let label = predicted_label(&bundle().classifier.logits(&initial).unwrap()).unwrap();
    assert_eq!(r.success, label == 1);
}

#[test]
fn warm_start_with_zero_steps_is_a_no_op() {
    let q = queries(1).image(0).unwrap();
    let mut state = GeneratorState::build(&settings().prior, &q, 2).unwrap();
    let before = state.render().unwrap();
    warm_start_prior(&mut state, &q, 0, 1e-3).unwrap();
    assert!(bitwise_equal(&before, &state.render().unwrap()).unwrap());
    assert_eq!(state.unlock_index(), 0);
}

#[test]
fn warm_start_moves_towards_query() {
    let q = queries(1).image(0).unwrap();
    let mut state = GeneratorState::build(&settings().prior, &q, 2).unwrap();
    let err = |s: &GeneratorState| disc_core::metrics::mse(&q, &s.render().unwrap()).unwrap();
    let before = err(&state);
    warm_start_prior(&mut state, &q, 100, 1e-3).unwrap();
    assert!(err(&state) < before);
}

#[test]
fn trajectory_bookkeeping() {
    let q = queries(1);
    let s = settings();
    let r = run_query(&q.image(0).unwrap(), TargetSpec::flip(0, 1), bundle(), &s, 3).unwrap();
    assert_eq!(r.stages_run, 4, "success_prob 1 forces every stage");
    assert_eq!(r.stage_snapshots.len(), r.stages_run);
    assert!(r.frozen_verified);
    assert!(r.trajectory.windows(2).all(|w| w[0].stage <= w[1].stage && w[0].step + 1 == w[1].step));
    for rec in &r.trajectory {
        let expected = s.objective.lambda1 / s.objective.kappa.powi(rec.stage as i32 - 1);
        assert_eq!(rec.lambda1, expected);
        assert_eq!(rec.lambda1, stage_lambda1(s.objective.lambda1, s.objective.kappa, rec.stage));
    }
    for stage in 1..=r.stages_run {
        let recs: Vec<_> = r.trajectory.iter().filter(|t| t.stage == stage).collect();
        assert!(!recs.is_empty() && recs.len() <= s.policy.steps_per_stage);
    }
    let label = predicted_label(&bundle().classifier.logits(&r.counterfactual).unwrap()).unwrap();
    assert_eq!(r.success, label == 1);
    assert_eq!(r.final_label, label);
}

#[test]
fn frozen_groups_match_post_warm_start_snapshot() {
    let q = queries(1).image(0).unwrap();
    let s = settings();
    let mut state = GeneratorState::build(&s.prior, &q, 4).unwrap();
    warm_start_prior(&mut state, &q, 20, 1e-3).unwrap();
    let snap = state.groups().values().unwrap();
    let policy = StagePolicy { max_stages: Some(2), ..s.policy.clone() };
    let r = generate_cf(&q, TargetSpec::flip(0, 1), bundle(), &mut state, &s.objective, &policy).unwrap();
    assert_eq!(r.final_unlock, 2);
    let now = state.groups().values().unwrap();
    for k in 2..state.num_groups() {
        for (a, b) in now[k].iter().zip(&snap[k]) {
            assert!(bitwise_equal(a, b).unwrap());
        }
    }
}

#[test]
fn batch_of_one_equals_single_run() {
    let q = queries(1);
    let s = settings();
    let batch = batch_generate(&q, &TargetRule::flip(0, 1), bundle(), &s, 1, None).unwrap();
    let single = run_query(&q.image(0).unwrap(), TargetSpec::flip(0, 1), bundle(), &s, seed::derive(s.master_seed, 0)).unwrap();
    assert_eq!(batch.len(), 1);
    assert!(same(&batch[0], &single));
}

#[test]
fn worker_count_does_not_change_results() {
    let q = queries(3);
    let s = settings();
    let one = batch_generate(&q, &TargetRule::flip(0, 1), bundle(), &s, 1, None).unwrap();
    let four = batch_generate(&q, &TargetRule::flip(0, 1), bundle(), &s, 4, None).unwrap();
    assert_eq!(one.len(), 3);
    for (a, b) in one.iter().zip(&four) {
        assert!(same(a, b));
    }
    let fp = s.fingerprint().unwrap();
    assert_eq!(
        GenerationSummary::from_results(&one, &fp),
        GenerationSummary::from_results(&four, &fp)
    );
}

#[test]
fn failures_are_recorded_per_query() {
    let data = make_toy_dataset(2, 16, 8).unwrap();
    let s = settings();
    let res = batch_generate(&data, &TargetRule::flip(0, 1), bundle(), &s, 1, None).unwrap();
    assert_eq!(res.len(), data.len());
    for (r, &label) in res.iter().zip(data.labels()) {
        assert_eq!(r.error.is_some(), label == 1);
        if label == 1 {
            assert!(!r.success);
        }
    }
}

#[test]
fn outputs_round_trip() {
    let q = queries(2);
    let s = settings();
    let res = batch_generate(&q, &TargetRule::flip(0, 1), bundle(), &s, 1, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fp = s.fingerprint().unwrap();
    let summary = write_outputs(dir.path(), &res, &fp).unwrap();
    for i in 0..2 {
        for name in [format!("cf_{i}.png"), format!("query_{i}.png"), format!("diff_{i}.png"), format!("trajectory_{i}.json")] {
            assert!(dir.path().join(name).exists());
        }
    }
    assert_eq!(summary.success_rate, summary.num_success as f64 / 2.0);
    let (back, loaded) = load_outputs(dir.path()).unwrap();
    assert_eq!(back, summary);
    for (a, b) in res.iter().zip(&loaded) {
        assert!(bitwise_equal(&a.counterfactual, &b.counterfactual).unwrap());
        assert!(bitwise_equal(&a.query, &b.query).unwrap());
    }
    assert!(matches!(
        load_outputs(&dir.path().join("missing")),
        Err(disc_core::DiscError::MissingArtifact(_))
    ));
}

#[test]
fn incompatible_bundle_fails_before_any_step() {
    let plain = quick_bundle(TrainMode::Plain);
    let q = queries(1);
    let err = batch_generate(&q, &TargetRule::flip(0, 1), &plain, &settings(), 1, None).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn fingerprint_tracks_settings() {
    let a = settings();
    let mut b = settings();
    assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    b.policy.lr *= 2.0;
    assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
}
