use approx::assert_abs_diff_eq;

use super::*;
use crate::losses::PairLabel;
use crate::network::{init_params, Variant};
use crate::synth::{generate, SynthSpec};

fn data(n: usize, seed: u64) -> Vec<LabeledImage> {
    generate(&SynthSpec {
        n_identities: n,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        triplets_per_pair: 3,
        ..TrainConfig::default()
    }
}

fn scalar_store(v: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("theta", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    s
}

fn scalar_grad(like: &ParamStore<f32>, v: f32) -> Gradients<f32> {
    let mut g = Gradients::zeros_like(like);
    g.get_mut("theta").unwrap().data_mut()[0] = v;
    g
}

fn bits(p: &ParamStore<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn sgd_without_momentum_is_gradient_descent() {
    let mut p = scalar_store(2.0);
    let g = scalar_grad(&p, 0.5);
    let mut v = Gradients::zeros_like(&p);
    sgd_step(&mut p, &g, 0.1, 0.0, &mut v).unwrap();
    assert_eq!(p.get("theta").unwrap().data()[0], 2.0 - 0.1 * 0.5);
}

#[test]
fn sgd_two_steps_by_hand() {
    let mut p = scalar_store(1.0);
    let mut v = Gradients::zeros_like(&p);
    let (lr, mu) = (0.1f64, 0.9f64);
    let (g1, g2) = (scalar_grad(&p, 2.0), scalar_grad(&p, -1.0));
    sgd_step(&mut p, &g1, lr, mu, &mut v).unwrap();
    sgd_step(&mut p, &g2, lr, mu, &mut v).unwrap();
    // v1 = -0.2, θ1 = 0.8; v2 = 0.9·(-0.2) + 0.1 = -0.08, θ2 = 0.72.
    assert_abs_diff_eq!(v.get("theta").unwrap().data()[0], -0.08, epsilon = 1e-6);
    assert_abs_diff_eq!(p.get("theta").unwrap().data()[0], 0.72, epsilon = 1e-6);
}

#[test]
fn velocity_decays_without_gradient() {
    let mut p = scalar_store(0.0);
    let mut v = Gradients::zeros_like(&p);
    let g = scalar_grad(&p, 1.0);
    sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
    let zero = scalar_grad(&p, 0.0);
    let mut last = f32::NAN;
    for _ in 0..400 {
        sgd_step(&mut p, &zero, 0.1, 0.9, &mut v).unwrap();
        last = p.get("theta").unwrap().data()[0];
    }
    assert!(v.get("theta").unwrap().data()[0].abs() < 1e-12);
    // Geometric series: θ∞ = -lr·g / (1 - μ).
    assert_abs_diff_eq!(last, -1.0, epsilon = 1e-5);
}

#[test]
fn sgd_shape_mismatch() {
    let mut p = scalar_store(0.0);
    let mut other = ParamStore::new();
    other.insert("theta", Tensor::<f32>::zeros(&[2])).unwrap();
    let g = Gradients::zeros_like(&other);
    let mut v = Gradients::zeros_like(&p);
    assert!(matches!(sgd_step(&mut p, &g, 0.1, 0.9, &mut v), Err(Error::Shape { .. })));
}

#[test]
fn config_validation() {
    assert!(TrainConfig { learning_rate: 0.0, ..quick(1) }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..quick(1) }.validate().is_err());
    assert!(TrainConfig { momentum: 1.0, ..quick(1) }.validate().is_err());
    assert!(TrainMode::parse("cross").is_ok() && TrainMode::parse("x").is_err());
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let mut net = NetConfig::desk();
    net.loss.lambda_rnk = 0.0;
    net.loss.lambda_cls = 0.0;
    let p0 = init_params::<f32>(&net, 1).unwrap();
    let out = train_single(&net, p0.clone(), &data(4, 0), &quick(2), None).unwrap();
    assert_eq!(bits(&out.params), bits(&p0));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let net = NetConfig::desk();
    let d = data(8, 1);
    let cfg = quick(6);
    let a = train_single(&net, init_params(&net, 2).unwrap(), &d, &cfg, None).unwrap();
    let b = train_single(&net, init_params(&net, 2).unwrap(), &d, &cfg, None).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.history, b.history);
    let (first, last) = (a.history[0].combined, a.history.last().unwrap().combined);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_names_node() {
    let net = NetConfig::desk();
    let mut p = init_params::<f32>(&net, 3).unwrap();
    p.get_mut("trunk.conv2.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train_single(&net, p, &data(4, 0), &quick(1), None).unwrap_err();
    match err {
        Error::NonFinite { label, .. } => assert!(label.contains("trunk.conv2"), "{label}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn epoch_hook_runs_on_schedule() {
    let net = NetConfig::desk();
    let mut seen = Vec::new();
    let mut hook = |e: usize, _: &ParamStore<f32>| -> Result<()> {
        seen.push(e);
        Ok(())
    };
    let cfg = TrainConfig { eval_every: 2, ..quick(5) };
    train_single(&net, init_params(&net, 0).unwrap(), &data(3, 0), &cfg, Some(&mut hook)).unwrap();
    assert_eq!(seen, vec![1, 3]);
}

#[test]
fn cross_without_contrastive_matches_fine_tuning() {
    let mut net = NetConfig::desk();
    net.loss.lambda_cts = 0.0;
    let (src, tgt) = (data(6, 4), data(4, 5));
    let p0 = init_params::<f32>(&net, 6).unwrap();
    let cfg = quick(3);
    let plain = train_single(&net, p0.clone(), &tgt, &cfg, None).unwrap();
    let cross = train_cross(CrossDomainState::from_source(&net, p0), &src, &tgt, &cfg, None).unwrap();
    assert_eq!(bits(&plain.params), bits(&cross.params));
    assert_eq!(plain.history, cross.history);
}

#[test]
fn cross_with_contrastive_differs_and_records_loss() {
    let net = NetConfig::desk();
    let (src, tgt) = (data(6, 4), data(4, 5));
    let p0 = init_params::<f32>(&net, 6).unwrap();
    let cfg = quick(2);
    let plain = train_single(&net, p0.clone(), &tgt, &cfg, None).unwrap();
    let cross = train_cross(CrossDomainState::from_source(&net, p0.clone()), &src, &tgt, &cfg, None).unwrap();
    assert_ne!(bits(&plain.params), bits(&cross.params));
    assert!(cross.history.iter().all(|h| h.l_cts.is_some_and(|v| v >= 0.0)));
    let frozen = TrainConfig { freeze_source: true, ..cfg };
    train_cross(CrossDomainState::from_source(&net, p0.clone()), &src, &tgt, &frozen, None).unwrap();

    let rnk = net.with_variant(Variant::RnkOnly);
    let p = init_params::<f32>(&rnk, 0).unwrap();
    assert!(train_cross(CrossDomainState::from_source(&rnk, p), &src, &tgt, &quick(1), None).is_err());
}

#[test]
fn initial_loss_scales_ignore_the_contrastive_weight() {
    let (src, tgt) = (data(6, 4), data(4, 5));
    let net = NetConfig::desk();
    let p0 = init_params::<f32>(&net, 6).unwrap();
    let cfg = quick(1);
    let (reid, cts) = initial_loss_scales(&CrossDomainState::from_source(&net, p0.clone()), &src, &tgt, &cfg, 8).unwrap();
    assert!(reid > 0.0 && reid.is_finite());
    assert!(cts >= 0.0 && cts.is_finite());

    let mut heavy = net.clone();
    heavy.loss.lambda_cts = 50.0;
    let again = initial_loss_scales(&CrossDomainState::from_source(&heavy, p0.clone()), &src, &tgt, &cfg, 8).unwrap();
    assert_eq!(again, (reid, cts));

    let rnk = net.with_variant(Variant::RnkOnly);
    let p = init_params::<f32>(&rnk, 0).unwrap();
    assert!(initial_loss_scales(&CrossDomainState::from_source(&rnk, p), &src, &tgt, &cfg, 8).is_err());
}

#[test]
fn contrastive_gradient_vanishes_for_identical_positive_responses() {
    let f = Tensor::new(vec![4], vec![0.3f32, -1.0, 2.0, 0.5]).unwrap();
    let (l, ga, gb) = contrastive_with_grads(&f, &f, PairLabel::Positive, 1.0).unwrap();
    assert_eq!(l, 0.0);
    assert!(ga.iter().chain(&gb).all(|v| *v == 0.0));
}

fn fc2_distance_after_step(y: PairLabel, seed: u64) -> (f64, f64) {
    let net = NetConfig::desk();
    let d = data(2, seed);
    let build = |s| Network::build(&net, ForwardMode::TestPair, init_params::<f32>(&net, s).unwrap()).unwrap();
    let (mut na, mut nb) = (build(seed), build(seed + 50));
    let dist = |na: &mut Network<f32>, nb: &mut Network<f32>| {
        let fa = na.joint_feature_fc2(&d[0].image, &d[1].image).unwrap();
        let fb = nb.joint_feature_fc2(&d[2].image, &d[3].image).unwrap();
        let dd: f64 = fa.data().iter().zip(fb.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        (fa, fb, dd.sqrt())
    };
    let (fa, fb, d0) = dist(&mut na, &mut nb);
    let margin = if y == PairLabel::Negative { 2.0 * d0 } else { 1.0 };
    let (_, ga, gb) = contrastive_with_grads(&fa, &fb, y, margin).unwrap();
    for (n, g) in [(&mut na, ga), (&mut nb, gb)] {
        let node = n.handles().fc2[0];
        let grads = n.graph().backward_seeded(&[(node, g)]).unwrap();
        let mut vel = Gradients::zeros_like(n.params());
        sgd_step(n.params_mut(), &grads, 1e-3, 0.0, &mut vel).unwrap();
    }
    let (_, _, d1) = dist(&mut na, &mut nb);
    (d0, d1)
}

#[test]
fn contrastive_step_pulls_positives_together() {
    for seed in 0..3 {
        let (d0, d1) = fc2_distance_after_step(PairLabel::Positive, seed);
        assert!(d0 > 0.0 && d1 < d0, "{d0} -> {d1}");
    }
}

#[test]
fn contrastive_step_pushes_negatives_apart() {
    for seed in 0..3 {
        let (d0, d1) = fc2_distance_after_step(PairLabel::Negative, seed);
        assert!(d1 > d0, "{d0} -> {d1}");
    }
}

#[test]
fn aug_merges_disjoint_identities() {
    let (src, tgt) = (data(5, 0), data(3, 1));
    let merged = merge_for_aug(&src, &tgt);
    let count = |d: &[LabeledImage]| sampling::enumerate_positive_pairs(d).len();
    assert_eq!(count(&merged), count(&src) + count(&tgt));
    let net = NetConfig::desk();
    train_aug(&net, init_params(&net, 0).unwrap(), &src, &tgt, &quick(1), None).unwrap();
}

#[test]
fn history_csv_schema() {
    let h = [EpochLoss {
        epoch: 0,
        l_trp: Some(0.5),
        l_cls: None,
        l_cts: None,
        combined: 0.25,
    }];
    let csv = history_csv(&h);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines[1], "0,0.500000000,,,0.250000000");
}
