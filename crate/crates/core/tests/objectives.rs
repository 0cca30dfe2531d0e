mod common;

use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Optimizer;
use common::{quick_bundle, rel_err};
use disc_core::classifier::{TrainMode, TrainedBundle};
use disc_core::datasets::make_toy_dataset;
use disc_core::nn::adam;
use disc_core::objectives::*;
use disc_core::DiscError;
use proptest::prelude::*;

fn dep_bundle() -> &'static TrainedBundle {
    static B: OnceLock<TrainedBundle> = OnceLock::new();
    B.get_or_init(|| quick_bundle(TrainMode::Dep))
}

fn plain_bundle() -> &'static TrainedBundle {
    static B: OnceLock<TrainedBundle> = OnceLock::new();
    B.get_or_init(|| quick_bundle(TrainMode::Plain))
}

fn images() -> (Tensor, Tensor) {
    let d = make_toy_dataset(2, 16, 21).unwrap();
    (d.image(0).unwrap(), d.image(1).unwrap())
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn target() -> TargetSpec {
    TargetSpec::flip(0, 1)
}

#[test]
fn semantics_vanishes_on_identity() {
    let (x, _) = images();
    for semantics in [SemanticsMode::Iso, SemanticsMode::Lso] {
        let spec = ObjectiveSpec { semantics, ..ObjectiveSpec::default() };
        assert_eq!(scalar(&semantics_loss(&x, &x, dep_bundle(), &spec).unwrap()), 0.0);
    }
}

#[test]
fn iso_constant_offset() {
    let x = Tensor::full(0.3f64, (3, 4, 4), &Device::Cpu).unwrap();
    let xb = (&x + 0.1).unwrap();
    assert!((scalar(&iso_loss(&xb, &x).unwrap()) - 0.01).abs() < 1e-12);
}

#[test]
fn lso_matches_independent_reimplementation() {
    let (x, xb) = images();
    let bundle = dep_bundle();
    let spec = ObjectiveSpec { semantics: SemanticsMode::Lso, ..ObjectiveSpec::default() };
    let got = scalar(&semantics_loss(&xb, &x, bundle, &spec).unwrap());

    let taps = |img: &Tensor| -> Vec<Vec<f32>> {
        let out = bundle.classifier.forward_with_taps(&img.unsqueeze(0).unwrap()).unwrap();
        out.taps.iter().map(|t| t.flatten_all().unwrap().to_vec1().unwrap()).collect()
    };
    let (a, b) = (taps(&xb), taps(&x));
    let mut expected = 0.0f64;
    for (ta, tb) in a.iter().zip(&b) {
        let ss: f64 = ta.iter().zip(tb).map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2)).sum();
        expected += ss / ta.len() as f64;
    }
    assert!(rel_err(got, expected) < 1e-5, "{got} vs {expected}");

    let one = ObjectiveSpec { taps: Some(vec!["block2".into()]), ..spec.clone() };
    let got_one = scalar(&semantics_loss(&xb, &x, bundle, &one).unwrap());
    let ss: f64 = a[1].iter().zip(&b[1]).map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2)).sum();
    assert!(rel_err(got_one, ss / a[1].len() as f64) < 1e-5);
}

#[test]
fn empty_tap_set_is_rejected() {
    let (x, xb) = images();
    let spec = ObjectiveSpec { taps: Some(vec![]), ..ObjectiveSpec::default() };
    assert!(matches!(spec.validate(dep_bundle()), Err(DiscError::Config(_))));
    assert!(semantics_loss(&xb, &x, dep_bundle(), &spec).is_err());
    let unknown = ObjectiveSpec { taps: Some(vec!["block9".into()]), ..ObjectiveSpec::default() };
    assert!(unknown.validate(dep_bundle()).is_err());
}

#[test]
fn dep_margin_examples() {
    let s = Tensor::new(&[0.7f64], &Device::Cpu).unwrap();
    assert!((scalar(&dep_margin(&s, 0.2).unwrap()) - 0.5).abs() < 1e-12);
    assert_eq!(scalar(&dep_margin(&s, 0.7).unwrap()), 0.0);
}

fn kernel(ks: f64, kt: f64) -> Tensor {
    Tensor::new(&[[ks, kt]], &Device::Cpu).unwrap()
}

#[test]
fn duq_margin_examples() {
    assert_eq!(scalar(&duq_margin(&kernel(0.2, 0.9), &target(), 0.5).unwrap()), 0.0);
    assert!((scalar(&duq_margin(&kernel(0.4, 0.5), &target(), 0.5).unwrap()) - 0.4).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn duq_margin_is_zero_once_satisfied(ks in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let kt = ks + 0.5 + gap;
        prop_assert_eq!(scalar(&duq_margin(&kernel(ks, kt), &target(), 0.5).unwrap()), 0.0);
    }

    #[test]
    fn duq_margin_is_bounded(ks in 1e-6f64..1.0, kt in 1e-6f64..1.0, tau in 0.0f64..2.0) {
        let v = scalar(&duq_margin(&kernel(ks, kt), &target(), tau).unwrap());
        prop_assert!(v >= 0.0 && v <= tau + 1.0);
    }

    #[test]
    fn dep_margin_is_zero_only_at_target(s in 0.0f64..10.0, star in 0.0f64..10.0) {
        let t = Tensor::new(&[s], &Device::Cpu).unwrap();
        let v = scalar(&dep_margin(&t, star).unwrap());
        prop_assert!((v - (s - star).abs()).abs() < 1e-12);
    }

    #[test]
    fn fc_loss_is_shift_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -20.0f64..20.0) {
        let l = Tensor::new(&[[a, b]], &Device::Cpu).unwrap();
        let s = (&l + c).unwrap();
        prop_assert!((scalar(&fc_loss(&l, &target()).unwrap()) - scalar(&fc_loss(&s, &target()).unwrap())).abs() < 1e-6);
    }
}

#[test]
fn fc_loss_examples() {
    let saturated = Tensor::new(&[[0.0f64, 50.0]], &Device::Cpu).unwrap();
    assert!(scalar(&fc_loss(&saturated, &target()).unwrap()) < 1e-6);
    let uniform = Tensor::new(&[[0.3f64, 0.3]], &Device::Cpu).unwrap();
    assert!((scalar(&fc_loss(&uniform, &target()).unwrap()) - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn mc_losses_require_matching_heads() {
    let dep = ObjectiveSpec { consistency: ConsistencyMode::Dep, ..ObjectiveSpec::default() };
    let duq = ObjectiveSpec { consistency: ConsistencyMode::Duq, ..ObjectiveSpec::default() };
    match dep.validate(plain_bundle()) {
        Err(DiscError::Incompatible(m)) => assert_eq!(m, "bundle lacks loss predictor"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(duq.validate(dep_bundle()), Err(DiscError::Incompatible(_))));
    let (x, _) = images();
    assert!(mc_loss_dep(&x, plain_bundle(), 0.1).is_err());
    assert!(mc_loss_duq(&x, dep_bundle(), &target(), 0.5).is_err());
}

#[test]
fn term_omission_and_zero_weights() {
    let (x, xb) = images();
    let bundle = dep_bundle();
    let spec = ObjectiveSpec { lambda2: 0.0, consistency: ConsistencyMode::None, ..ObjectiveSpec::default() };
    let (total, b) = total_objective(&xb, &x, bundle, &spec, &target(), false).unwrap();
    let sem = scalar(&semantics_loss(&xb, &x, bundle, &spec).unwrap());
    let fc = scalar(&fc_loss(&bundle.classifier.logits(&xb).unwrap(), &target()).unwrap());
    assert!((scalar(&total) - (spec.lambda1 * sem + spec.lambda3 * fc)).abs() < 1e-6);
    assert_eq!(b.mc, 0.0);

    let zero = ObjectiveSpec { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..ObjectiveSpec::default() };
    let (total, _) = total_objective(&xb, &x, bundle, &zero, &target(), false).unwrap();
    assert_eq!(scalar(&total), 0.0);
}

#[test]
fn breakdown_recombines_to_total() {
    let data = make_toy_dataset(4, 16, 33).unwrap();
    let bundle = dep_bundle();
    for semantics in [SemanticsMode::Iso, SemanticsMode::Lso] {
        for regularize in [false, true] {
            let spec = ObjectiveSpec { semantics, lambda2: 0.3, ..ObjectiveSpec::default() };
            for i in 1..data.len() {
                let (_, b) = total_objective(&data.image(i).unwrap(), &data.image(0).unwrap(), bundle, &spec, &target(), regularize).unwrap();
                let sum = b.weighted_semantics + b.weighted_mc + b.weighted_fc + b.weighted_tv + b.weighted_l2;
                assert!(rel_err(sum, b.total) < 1e-6, "{sum} vs {}", b.total);
                for v in [b.semantics, b.mc, b.fc, b.tv, b.l2, b.total] {
                    assert!(v >= 0.0);
                }
                assert_eq!(b.tv > 0.0, regularize);
            }
        }
    }
}

/// Analytic vs central-difference gradient of the bound objective w.r.t.
/// three raw parameters, one per channel, broadcast over a 16×16 image.
/// Returns the error relative to the gradient norm.
fn objective_fd_error(spec: &ObjectiveSpec, regularize: bool, h: f32) -> f64 {
    let (x, _) = images();
    let ctx = ObjectiveContext::new(dep_bundle(), spec, target(), &x, regularize).unwrap();
    let image = |raw: &Tensor| -> Tensor {
        let s = candle_nn::ops::sigmoid(raw).unwrap();
        s.reshape((3, 1, 1)).unwrap().broadcast_as((3, 16, 16)).unwrap().contiguous().unwrap()
    };
    let theta = [0.3f32, -0.4, 0.8];
    let var = Var::from_slice(&theta, 3, &Device::Cpu).unwrap();
    let ev = ctx.evaluate(&image(var.as_tensor())).unwrap();
    let g: Vec<f32> = ev.total.backward().unwrap().get(&var).unwrap().to_vec1().unwrap();
    let f = |t: [f32; 3]| ctx.evaluate(&image(&Tensor::new(&t, &Device::Cpu).unwrap())).unwrap().breakdown.total;
    let (mut err, mut norm) = (0.0, 0.0);
    for i in 0..3 {
        let mut p = theta;
        p[i] += h;
        let mut m = theta;
        m[i] -= h;
        let fd = (f(p) - f(m)) / (2.0 * f64::from(h));
        err += (f64::from(g[i]) - fd).powi(2);
        norm += f64::from(g[i]).powi(2);
    }
    (err / norm).sqrt()
}

#[test]
fn smooth_objective_gradient_matches_finite_differences() {
    let spec = ObjectiveSpec { semantics: SemanticsMode::Iso, consistency: ConsistencyMode::None, lambda3: 0.0, ..ObjectiveSpec::default() };
    let e = objective_fd_error(&spec, true, 5e-3);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn objective_gradient_matches_finite_differences() {
    // The classifier is piecewise linear, so central differences only agree
    // up to the kinks crossed within ±h.
    let spec = ObjectiveSpec { semantics: SemanticsMode::Lso, lambda2: 0.3, ..ObjectiveSpec::default() };
    let e = objective_fd_error(&spec, true, 1e-3);
    assert!(e < 5e-2, "relative error {e}");
}

#[test]
fn dep_term_alone_decreases_under_descent() {
    let bundle = dep_bundle();
    let raw = disc_core::nn::normal(&mut disc_core::seed::rng(4), &[3, 16, 16], 0.0, 1.0, DType::F32).unwrap();
    let var = Var::from_tensor(&raw).unwrap();
    let s_star = bundle.train_loss_stats().mean;
    let mut opt = adam(vec![var.clone()], 1e-2).unwrap();
    let mut best = Vec::new();
    for _ in 0..200 {
        let img = candle_nn::ops::sigmoid(var.as_tensor()).unwrap();
        let loss = mc_loss_dep(&img, bundle, s_star).unwrap();
        let v = scalar(&loss);
        let prev = best.last().copied().unwrap_or(f64::INFINITY);
        best.push(v.min(prev));
        opt.backward_step(&loss).unwrap();
    }
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(best[199] < best[0], "no progress: {} -> {}", best[0], best[199]);
}

#[test]
fn s_star_parses_auto_and_numbers() {
    let a: ObjectiveSpec = serde_json::from_str(r#"{"s_star": "auto"}"#).unwrap();
    assert_eq!(a.s_star, SStar::Auto);
    let v: ObjectiveSpec = serde_json::from_str(r#"{"s_star": 0.25}"#).unwrap();
    assert_eq!(v.s_star, SStar::Value(0.25));
    assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"s_star": "often"}"#).is_err());
    assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"lambda4": 1}"#).is_err());
    assert_eq!(v.resolve_s_star(dep_bundle()), 0.25);
    assert_eq!(a.resolve_s_star(dep_bundle()), dep_bundle().train_loss_stats().mean);
}

#[test]
fn target_validation() {
    assert!(TargetSpec::flip(1, 1).validate(2).is_err());
    assert!(TargetSpec::flip(0, 2).validate(2).is_err());
    assert!(TargetSpec::flip(0, 1).validate(2).is_ok());
}
