use std::sync::OnceLock;

use candle_core::Tensor;
use disc_core::classifier::*;
use disc_core::datasets::{corrupt, make_toy_dataset, CorruptionKind, CorruptionSpec, LabeledImageSet, Split};
use disc_core::priors::bitwise_equal;
use disc_core::seed;
use rand::seq::SliceRandom;

fn train_set() -> LabeledImageSet {
    make_toy_dataset(300, 16, 1).unwrap()
}

fn test_set() -> LabeledImageSet {
    make_toy_dataset(150, 16, 99).unwrap().with_split(Split::Test)
}

fn dep() -> &'static TrainedBundle {
    static B: OnceLock<TrainedBundle> = OnceLock::new();
    B.get_or_init(|| train_joint_dep(&train_set(), &TrainConfig::default()).unwrap())
}

fn duq() -> &'static TrainedBundle {
    static B: OnceLock<TrainedBundle> = OnceLock::new();
    B.get_or_init(|| train_duq(&train_set(), &TrainConfig::default()).unwrap())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn learns_toy_task_at_32px() {
    let data = make_toy_dataset(500, 32, 3).unwrap();
    let b = train_classifier(&data, &TrainConfig { epochs: 6, ..TrainConfig::default() }).unwrap();
    assert!(b.manifest.val_accuracy >= 0.95, "val accuracy {}", b.manifest.val_accuracy);
    assert!(b.loss_predictor.is_none() && b.duq_head.is_none());
}

#[test]
fn permuted_labels_stay_near_chance() {
    let data = make_toy_dataset(200, 16, 4).unwrap();
    let mut labels = data.labels().to_vec();
    labels.shuffle(&mut seed::rng(8));
    let shuffled = data.with_labels(labels).unwrap();
    let cfg = TrainConfig { val_fraction: 0.25, ..TrainConfig::default() };
    let b = train_classifier(&shuffled, &cfg).unwrap();
    assert!((b.manifest.val_accuracy - 0.5).abs() <= 0.1, "val accuracy {}", b.manifest.val_accuracy);
}

#[test]
fn tiny_run_round_trips_bitwise() {
    let data = make_toy_dataset(5, 16, 5).unwrap();
    let probe = make_toy_dataset(3, 16, 6).unwrap();
    for mode in [TrainMode::Plain, TrainMode::Dep, TrainMode::Duq] {
        let cfg = TrainConfig { mode, epochs: 1, min_steps: 0, batch_size: 4, ..TrainConfig::default() };
        let b = train(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = TrainedBundle::load(dir.path()).unwrap();
        assert_eq!(back.manifest, b.manifest);
        let o1 = predict_with_taps(&b, probe.images()).unwrap();
        let o2 = predict_with_taps(&back, probe.images()).unwrap();
        assert!(bitwise_equal(&o1.logits, &o2.logits).unwrap());
        if mode == TrainMode::Dep {
            assert!(bitwise_equal(&b.loss_estimate(&o1).unwrap(), &back.loss_estimate(&o2).unwrap()).unwrap());
        }
        if mode == TrainMode::Duq {
            assert!(bitwise_equal(&b.kernel(&o1).unwrap(), &back.kernel(&o2).unwrap()).unwrap());
        }
    }
}

#[test]
fn training_rejects_non_train_split() {
    let data = make_toy_dataset(5, 16, 5).unwrap().with_split(Split::Val);
    assert!(train_classifier(&data, &TrainConfig::default()).is_err());
}

#[test]
fn manifest_records_dep_settings() {
    let m = &dep().manifest;
    assert_eq!((m.beta1, m.beta2, m.gamma), (1.0, 0.5, 1.0));
    assert!(m.train_loss_stats.count > 0 && m.train_loss_stats.mean >= 0.0);
    assert_eq!(m.tap_names.len(), 4);
}

#[test]
fn loss_predictor_ranks_held_out_losses() {
    let b = dep();
    let test = test_set();
    let corrupted = corrupt(&test, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 0.5, seed: 1 }).unwrap();
    let mixed = LabeledImageSet::concat(&[&test, &corrupted]).unwrap();
    let s = per_sample_losses(&b.classifier, &mixed).unwrap();
    let shat = loss_estimates(b, mixed.images()).unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..s.len() {
        for j in (i + 1)..s.len() {
            if s[i] == s[j] || shat[i] == shat[j] {
                continue;
            }
            total += 1;
            if (s[i] > s[j]) == (shat[i] > shat[j]) {
                agree += 1;
            }
        }
    }
    let acc = agree as f64 / total as f64;
    assert!(acc >= 0.7, "pairwise ranking accuracy {acc}");
}

#[test]
fn loss_predictor_flags_noise() {
    let b = dep();
    let test = test_set();
    let logits = b.classifier.predict_logits_batched(test.images(), 256).unwrap();
    let pred: Vec<u32> = logits.argmax(1).unwrap().to_vec1().unwrap();
    let keep: Vec<usize> = (0..test.len()).filter(|&i| pred[i] == test.labels()[i]).collect();
    let clean = test.select(&keep).unwrap();
    let noisy = corrupt(&clean, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 0.8, seed: 2 }).unwrap();
    let mut g_clean = loss_estimates(b, clean.images()).unwrap();
    let mut g_noisy = loss_estimates(b, noisy.images()).unwrap();
    assert!(g_clean.len() >= 200);
    assert!(median(&mut g_noisy) > median(&mut g_clean));
}

#[test]
fn beta2_zero_matches_plain_accuracy() {
    let cfg = TrainConfig { beta2: 0.0, ..TrainConfig::default() };
    let a = train_joint_dep(&train_set(), &cfg).unwrap();
    let p = train_classifier(&train_set(), &TrainConfig::default()).unwrap();
    let test = test_set();
    let (acc_a, acc_p) = (accuracy(&a.classifier, &test).unwrap(), accuracy(&p.classifier, &test).unwrap());
    assert!((acc_a - acc_p).abs() <= 0.02, "{acc_a} vs {acc_p}");
}

#[test]
fn duq_classifies_and_detects_noise() {
    let b = duq();
    let test = test_set();
    let acc = duq_accuracy(b, &test).unwrap();
    assert!(acc >= 0.9, "duq accuracy {acc}");
    assert_eq!(b.manifest.duq.as_ref().unwrap().length_scale, 0.5);
    assert_eq!(b.manifest.duq.as_ref().unwrap().gradient_penalty, 0.5);

    let mut u_in = duq_uncertainty(b, test.images()).unwrap();
    u_in.sort_by(f64::total_cmp);
    let p90 = u_in[(u_in.len() as f64 * 0.9) as usize];
    let noise = disc_core::nn::uniform(&mut seed::rng(5), &[100, 3, 16, 16], 0.0, 1.0, candle_core::DType::F32).unwrap();
    let mut u_noise = duq_uncertainty(b, &noise).unwrap();
    assert!(median(&mut u_noise) > p90, "noise uncertainty {} vs p90 {p90}", median(&mut u_noise));

    let k: Vec<f32> = duq_kernels(b, test.images()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn duq_centroids_sit_nearest_their_own_class() {
    let b = duq();
    let head = b.duq_head.as_ref().unwrap();
    let data = train_set();
    let feats = b.classifier.forward_with_taps(data.images()).unwrap().features;
    let emb = head.embed(&feats).unwrap();
    let d2: Vec<Vec<f32>> = head.sq_distances(&emb).unwrap().t().unwrap().to_vec2().unwrap();
    let mut own = 0;
    for (class, dists) in d2.iter().enumerate() {
        let nearest = dists.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        if data.labels()[nearest] as usize == class {
            own += 1;
        }
    }
    assert!(own as f64 / d2.len() as f64 >= 0.9);
}

#[test]
fn taps_are_deterministic_and_shaped() {
    let b = dep();
    let x = test_set().first(5).unwrap();
    let a = predict_with_taps(b, x.images()).unwrap();
    let c = predict_with_taps(b, x.images()).unwrap();
    assert!(bitwise_equal(&a.logits, &c.logits).unwrap());
    assert_eq!(a.logits.dims(), &[5, 2]);
    assert_eq!(a.taps.len(), b.tap_names().len());
    for t in &a.taps {
        assert_eq!(t.dim(0).unwrap(), 5);
    }
    let wrong = Tensor::zeros((1, 3, 8, 8), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
    let err = predict_with_taps(b, &wrong).unwrap_err().to_string();
    assert!(err.contains("expected") && err.contains("got"), "{err}");
}
