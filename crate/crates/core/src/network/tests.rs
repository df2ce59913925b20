use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{finite_diff_check, CheckOptions};
use crate::autodiff::Op;

fn image(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = numel(&cfg.input_shape);
    Tensor::new(cfg.input_shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn desk_net(cfg: &NetConfig, mode: ForwardMode, seed: u64) -> Network<f64> {
    Network::build(cfg, mode, init_params(cfg, seed).unwrap()).unwrap()
}

fn zero_params(cfg: &NetConfig) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (name, shape) in cfg.param_shapes().unwrap() {
        s.insert(name, Tensor::zeros(&shape)).unwrap();
    }
    s
}

#[test]
fn paper_preset_shapes() {
    let cfg = NetConfig::paper();
    assert_eq!(cfg.trunk_output_shape().unwrap(), [256, 13, 13]);
    assert_eq!(cfg.joint_shape().unwrap(), [512, 13, 13]);
    assert_eq!(cfg.embed_dim, 512);
    let shapes: std::collections::HashMap<_, _> = cfg.param_shapes().unwrap().into_iter().collect();
    assert_eq!(shapes["cls.conv3.weight"], vec![384, 512, 3, 3]);
    assert_eq!(shapes["embed.weight"], vec![512, 256 * 13 * 13]);
    assert_eq!(shapes["cls.fc6.weight"], vec![4096, 256 * 6 * 6]);
    assert_eq!(shapes["cls.fc8.weight"], vec![2, 4096]);

    let net = Network::<f32>::build(&cfg, ForwardMode::TrainTriplet, zero_params(&cfg)).unwrap();
    let g = net.graph();
    let h = net.handles();
    for &t in &h.trunk {
        assert_eq!(g.shape(t), &[256, 13, 13]);
    }
    for &j in &h.joint {
        assert_eq!(g.shape(j), &[512, 13, 13]);
    }
    for &e in &h.embeddings {
        assert_eq!(g.shape(e), &[512]);
    }
    assert_eq!(g.shape(h.probs[0]), &[2]);
}

#[test]
fn desk_preset_shapes() {
    let cfg = NetConfig::desk();
    assert_eq!(cfg.trunk_output_shape().unwrap(), [32, 6, 6]);
    assert_eq!(cfg.joint_shape().unwrap(), [64, 6, 6]);
    let n: usize = cfg.param_shapes().unwrap().iter().map(|(_, s)| numel(s)).sum();
    assert!((100_000..1_000_000).contains(&n), "{n} parameters");
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = NetConfig::desk();
    cfg.fc_dims[2] = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = NetConfig::desk();
    cfg.input_shape = [3, 8, 8];
    assert!(cfg.validate().is_err());
    let mut cfg = NetConfig::desk();
    cfg.trunk[0].kernel = 0;
    assert!(Network::<f64>::build(&cfg, ForwardMode::TestPair, ParamStore::new()).is_err());
    assert!(Variant::parse("both").is_err());
}

#[test]
fn build_rejects_wrong_parameter_shape() {
    let cfg = NetConfig::desk();
    let mut p = init_params::<f64>(&cfg, 0).unwrap();
    *p.get_mut("cls.fc7.weight").unwrap() = Tensor::zeros(&[64, 127]);
    let err = Network::build(&cfg, ForwardMode::TestPair, p).unwrap_err();
    assert!(err.to_string().contains("cls.fc7.weight"), "{err}");
}

#[test]
fn one_param_node_per_name() {
    let cfg = NetConfig::desk();
    let net = desk_net(&cfg, ForwardMode::TrainTriplet, 1);
    let params = net.graph().find_ops(|op| matches!(op, Op::Param(_)));
    assert_eq!(params.len(), net.params().len());
    let convs = net.graph().find_ops(|op| matches!(op, Op::Conv2d { .. }));
    // 2 trunk convs on 3 images, 3 cls convs on 2 pairs.
    assert_eq!(convs.len(), 2 * 3 + 3 * 2);
}

#[test]
fn test_pair_graph_structure() {
    let cfg = NetConfig::desk();
    let net = desk_net(&cfg, ForwardMode::TestPair, 1);
    assert_eq!(net.handles().inputs.len(), 2);
    assert!(net.handles().triplet.is_none());
    assert!(net.graph().find_ops(|op| matches!(op, Op::SqEuclidean | Op::Euclidean)).is_empty());
    let p = net.graph().find_ops(|op| matches!(op, Op::Param(_)));
    let names: Vec<&str> = p.iter().map(|&id| net.graph().label(id)).collect();
    assert!(names.iter().all(|n| !n.starts_with("embed")), "{names:?}");
}

#[test]
fn zero_final_layer_gives_half() {
    let cfg = NetConfig::desk();
    let mut p = init_params::<f64>(&cfg, 3).unwrap();
    zero_final_layer(&mut p);
    let mut net = Network::build(&cfg, ForwardMode::TestPair, p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        let (a, b) = (image(&cfg, &mut rng), image(&cfg, &mut rng));
        assert_eq!(net.forward_similarity(&a, &b).unwrap(), 0.5);
    }
}

#[test]
fn similarity_is_probability_and_deterministic() {
    let cfg = NetConfig::desk();
    let mut net = desk_net(&cfg, ForwardMode::TestPair, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (image(&cfg, &mut rng), image(&cfg, &mut rng));
    let s = net.forward_similarity(&a, &b).unwrap();
    assert!((0.0..=1.0).contains(&s));
    let probs = net.graph().value(net.handles().probs[0]).data().to_vec();
    assert_abs_diff_eq!(probs[0] + probs[1], 1.0, epsilon = 1e-12);
    let s1 = net.forward_similarity(&a, &a).unwrap();
    let s2 = net.forward_similarity(&a, &a).unwrap();
    assert_eq!(s1.to_bits(), s2.to_bits());
}

#[test]
fn shape_mismatch_rejected() {
    let cfg = NetConfig::desk();
    let mut net = desk_net(&cfg, ForwardMode::TestPair, 0);
    let bad = Tensor::<f64>::zeros(&[3, 31, 32]);
    let ok = Tensor::<f64>::zeros(&[3, 32, 32]);
    assert!(matches!(net.forward_similarity(&bad, &ok), Err(Error::Shape { .. })));
    assert!(net.forward_embedding(&ok).is_err());
}

#[test]
fn embeddings() {
    let mut cfg = NetConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = image(&cfg, &mut rng);
    let mut net = desk_net(&cfg, ForwardMode::EmbedOnly, 5);
    let e1 = net.forward_embedding(&a).unwrap();
    let e2 = net.forward_embedding(&a).unwrap();
    assert_eq!(e1.shape(), &[64]);
    assert_eq!(e1.data(), e2.data());

    cfg.loss.normalize_embeddings = true;
    let mut net = desk_net(&cfg, ForwardMode::EmbedOnly, 5);
    assert_abs_diff_eq!(net.forward_embedding(&a).unwrap().l2_norm().as_f64(), 1.0, epsilon = 1e-6);

    let cfg = NetConfig::desk().with_variant(Variant::RnkOnly);
    let mut net = desk_net(&cfg, ForwardMode::EmbedOnly, 5);
    assert_eq!(net.forward_embedding(&a).unwrap().shape(), &[64]);
}

#[test]
fn fc2_dimension_and_order_sensitivity() {
    let cfg = NetConfig::desk();
    let mut net = desk_net(&cfg, ForwardMode::TestPair, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (image(&cfg, &mut rng), image(&cfg, &mut rng));
    let ab = net.joint_feature_fc2(&a, &b).unwrap();
    let ab2 = net.joint_feature_fc2(&a, &b).unwrap();
    let ba = net.joint_feature_fc2(&b, &a).unwrap();
    assert_eq!(ab.shape(), &[cfg.fc_dims[1]]);
    assert_eq!(ab.data(), ab2.data());
    assert_ne!(ab.data(), ba.data());
}

#[test]
fn mode_variant_mismatch_rejected() {
    let rnk = NetConfig::desk().with_variant(Variant::RnkOnly);
    assert!(Network::build(&rnk, ForwardMode::TestPair, init_params::<f64>(&rnk, 0).unwrap()).is_err());
    let cls = NetConfig::desk().with_variant(Variant::ClsOnly);
    assert!(Network::build(&cls, ForwardMode::EmbedOnly, init_params::<f64>(&cls, 0).unwrap()).is_err());
}

#[test]
fn trunk_weights_shared_across_branches() {
    let cfg = NetConfig::desk();
    let mut net = desk_net(&cfg, ForwardMode::TrainTriplet, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = image(&cfg, &mut rng);
    net.forward_triplet(&a, &a, &a).unwrap();
    let before = net.graph().value(net.handles().trunk[0]).data().to_vec();
    net.params_mut().get_mut("trunk.conv1.weight").unwrap().data_mut()[5] += 0.1;
    net.forward_triplet(&a, &a, &a).unwrap();
    let after: Vec<Vec<f64>> = net.handles().trunk.iter().map(|&t| net.graph().value(t).data().to_vec()).collect();
    assert_ne!(after[0], before);
    assert_eq!(after[0], after[1]);
    assert_eq!(after[0], after[2]);
}

fn trained_graph(cfg: &NetConfig, seed: u64) -> Network<f64> {
    let mut net = desk_net(cfg, ForwardMode::TrainTriplet, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let (a, p, n) = (image(cfg, &mut rng), image(cfg, &mut rng), image(cfg, &mut rng));
    net.forward_triplet(&a, &p, &n).unwrap();
    net
}

#[test]
fn gradients_from_both_losses_add_up() {
    let mut cfg = NetConfig::desk();
    cfg.loss.alpha = 1e3;
    cfg.loss.lambda_rnk = 0.7;
    cfg.loss.lambda_cls = 1.3;
    let net = trained_graph(&cfg, 8);
    let h = net.handles();
    let g = net.graph();
    let total = g.backward(h.loss.unwrap()).unwrap();
    let trp = g.backward(h.triplet.unwrap()).unwrap();
    let cls = g.backward(h.cls_total.unwrap()).unwrap();
    assert!(trp.get("trunk.conv1.weight").unwrap().data().iter().any(|v| *v != 0.0));
    for name in ["trunk.conv1.weight", "trunk.conv2.weight", "trunk.conv2.bias"] {
        let t = total.get(name).unwrap().data();
        let r = trp.get(name).unwrap().data();
        let c = cls.get(name).unwrap().data();
        for i in 0..t.len() {
            assert_abs_diff_eq!(t[i], 0.7 * r[i] + 1.3 * c[i], epsilon = 1e-10 * (1.0 + t[i].abs()));
        }
    }
}

#[test]
fn triplet_loss_does_not_reach_cls_head() {
    let mut cfg = NetConfig::desk();
    cfg.loss.alpha = 1e3;
    let net = trained_graph(&cfg, 9);
    let trp = net.graph().backward(net.handles().triplet.unwrap()).unwrap();
    for (name, g) in trp.iter() {
        if name.starts_with("cls.") {
            assert!(g.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
    let cls = net.graph().backward(net.handles().cls_total.unwrap()).unwrap();
    assert!(cls.get("embed.weight").unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn variant_parameter_sets() {
    let names = |v: Variant| -> Vec<String> {
        NetConfig::desk().with_variant(v).param_shapes().unwrap().into_iter().map(|(n, _)| n).collect()
    };
    let full = names(Variant::Full);
    let cls = names(Variant::ClsOnly);
    assert!(cls.iter().all(|n| full.contains(n)));
    let rnk = names(Variant::RnkOnly);
    let convs = |v: &[String]| v.iter().filter(|n| n.contains("conv") && n.ends_with("weight")).count();
    assert_eq!(convs(&rnk), 5);
    assert_eq!(convs(&cls), 5);
    assert_eq!(rnk.iter().filter(|n| n.contains(".fc") && n.ends_with("weight")).count(), 3);

    let net = ablation_build::<f64>(&NetConfig::desk(), Variant::ClsOnly, 0).unwrap();
    assert_eq!(net.config().loss.lambda_rnk, 0.0);
    assert!(net.handles().triplet.is_none());
}

fn gradcheck_variant(v: Variant) {
    let mut cfg = NetConfig::desk().with_variant(v);
    cfg.loss.alpha = 10.0;
    let mut net = trained_graph(&cfg, 10);
    let loss = net.loss_node().unwrap();
    let opts = CheckOptions { max_coords: Some(8), ..CheckOptions::default() };
    let report = finite_diff_check(net.graph_mut(), loss, &opts).unwrap();
    assert!(report.passed(), "{}\n{}", v.name(), report.render());
}

#[test]
fn gradcheck_full() {
    gradcheck_variant(Variant::Full);
}

#[test]
fn gradcheck_cls_only() {
    gradcheck_variant(Variant::ClsOnly);
}

#[test]
fn gradcheck_rnk_only() {
    gradcheck_variant(Variant::RnkOnly);
}
