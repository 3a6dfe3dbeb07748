use fcan_core::aan::{aan_loss, domain_style, gram, AanConfig, Alpha};
use fcan_core::backbone::{adapt_bn_stats, BackboneConfig, Layer, MiniFcn};
use fcan_core::data::{gen_scene, Domain, LabelMap, SceneSpec, IGNORE};
use fcan_core::eval::{confusion, fuse_scores, ConfusionMatrix};
use fcan_core::ops::{self, NormMode, RunningStats};
use fcan_core::ran::{adversarial_loss_on, d_step, Discriminator, DiscriminatorConfig, Granularity, Sgd};
use fcan_core::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn small_backbone(seed: u64) -> MiniFcn {
    MiniFcn::new(BackboneConfig {
        channels: [4, 4, 6, 6, 8],
        num_classes: 3,
        init_seed: seed,
        ..BackboneConfig::default()
    })
    .unwrap()
}

/// Lower-triangular factor of a symmetric matrix, if positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn simplex_map(k: usize, plane: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, k * plane).prop_map(move |mut v| {
        for p in 0..plane {
            let z: f64 = (0..k).map(|c| v[c * plane + p]).sum();
            (0..k).for_each(|c| v[c * plane + p] /= z);
        }
        Tensor::new([k, 1, plane], v).unwrap()
    })
}

fn label_map(k: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(prop_oneof![0..k, Just(IGNORE)], 12).prop_map(|v| LabelMap::new(3, 4, v).unwrap())
}

proptest! {
    #[test]
    fn sigmoid_and_relu_ranges(x in tensor(vec![1, 2, 3, 3], -30.0, 30.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.sigmoid(v);
        let r = tape.relu(v);
        prop_assert!(tape.value(s).iter().all(|&p| p > 0.0 && p < 1.0));
        prop_assert!(tape.value(r).iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn eval_norm_is_deterministic_and_leaves_stats(x in tensor(vec![2, 3, 2, 2], -3.0, 3.0)) {
        let gamma = Tensor::new([3], vec![1.0, 0.5, -2.0]).unwrap();
        let beta = Tensor::new([3], vec![0.0, 1.0, 0.25]).unwrap();
        let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![1.0, 2.0, 0.5] };
        let before = stats.clone();
        let a = ops::batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Eval).unwrap();
        let b = ops::batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Eval).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(stats, before);
    }

    #[test]
    fn gram_is_symmetric_psd(m in tensor(vec![4, 3, 3], -2.0, 2.0)) {
        let g = gram(&m).unwrap();
        let n = g.size();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        let mut jittered = g.values().to_vec();
        (0..n).for_each(|i| jittered[i * n + i] += 1e-9);
        prop_assert!(cholesky(&jittered, n).is_some());
    }

    #[test]
    fn softmax_loss_ignores_logit_shift(
        logits in tensor(vec![3, 2, 2], -4.0, 4.0),
        shift in -50.0f64..50.0,
        labels in prop::collection::vec(prop_oneof![0u8..3, Just(IGNORE)], 4),
    ) {
        let shifted = Tensor::new([3, 2, 2], logits.data().iter().map(|v| v + shift).collect()).unwrap();
        let (a, sa) = ops::softmax_ce_loss(&logits, &labels, IGNORE).unwrap();
        let (b, _) = ops::softmax_ce_loss(&shifted, &labels, IGNORE).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(sa.all_ignored, labels.iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn adversarial_loss_is_non_negative(
        s in tensor(vec![1, 1, 2, 3], 0.0, 1.0),
        t in tensor(vec![1, 1, 3, 1], 0.0, 1.0),
    ) {
        let mut tape = Tape::new();
        let (sv, tv) = (tape.constant(&s), tape.constant(&t));
        let (l, _) = adversarial_loss_on(&mut tape, sv, tv).unwrap();
        prop_assert!(tape.scalar(l) >= 0.0);
    }

    #[test]
    fn fusion_is_order_free_and_stays_on_simplex(
        a in simplex_map(3, 4),
        b in simplex_map(3, 4),
        c in simplex_map(3, 4),
    ) {
        let f1 = fuse_scores(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let f2 = fuse_scores(&[c, a, b]).unwrap();
        prop_assert!(f1.max_abs_diff(&f2) < 1e-15);
        for p in 0..4 {
            let z: f64 = (0..3).map(|k| f1.data()[k * 4 + p]).sum();
            prop_assert!((z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_accumulation_is_order_free(
        pairs in prop::collection::vec((label_map(4), label_map(4)), 1..6),
    ) {
        let pred = |m: &LabelMap| {
            LabelMap::new(3, 4, m.data().iter().map(|&v| if v == IGNORE { 0 } else { v }).collect()).unwrap()
        };
        let mut fwd = ConfusionMatrix::new(4);
        for (p, g) in &pairs {
            fwd.add(&pred(p), g).unwrap();
        }
        let mut merged = ConfusionMatrix::new(4);
        for (p, g) in pairs.iter().rev() {
            merged.merge(&confusion(&pred(p), g, 4).unwrap()).unwrap();
        }
        prop_assert_eq!(fwd, merged);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_pure_and_labels_are_legal(seed in any::<u64>(), target in any::<bool>()) {
        let spec = SceneSpec { seed, height: 40, width: 36, ..SceneSpec::default() };
        let domain = if target { Domain::Target } else { Domain::Source };
        let (img_a, lbl_a) = gen_scene(&spec, domain).unwrap();
        let (img_b, lbl_b) = gen_scene(&spec, domain).unwrap();
        prop_assert!(img_a.data().iter().zip(img_b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(&lbl_a, &lbl_b);
        prop_assert!(lbl_a.data().iter().all(|&l| (l as usize) < spec.num_classes || l == IGNORE));
        prop_assert!(img_a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn appearance_loss_is_non_negative(seed in 0u64..1000) {
        let net = small_backbone(seed);
        let img = |s: u64| gen_scene(&SceneSpec { seed: s, height: 32, width: 32, ..SceneSpec::default() }, Domain::Source).unwrap().0;
        let style = domain_style(&[img(seed + 1)], &net, &Layer::ALL).unwrap();
        let config = AanConfig { alpha: Alpha::Fixed(1.0), ..AanConfig::default() };
        prop_assert!(aan_loss(&img(seed + 2), &img(seed), &style, &net, &config).unwrap() >= 0.0);
    }

    #[test]
    fn bn_adaptation_keeps_learnable_params(seed in 0u64..1000) {
        let net = small_backbone(seed);
        let images: Vec<Tensor> = (0..8)
            .map(|i| gen_scene(&SceneSpec { seed: seed + i, height: 32, width: 32, ..SceneSpec::default() }, Domain::Target).unwrap().0)
            .collect();
        let adapted = adapt_bn_stats(&net, &images).unwrap();
        for (a, b) in net.params().iter().zip(adapted.params()) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_ne!(net.stages()[0].stats.mean.clone(), adapted.stages()[0].stats.mean.clone());
    }

    #[test]
    fn parameter_count_follows_config(widths in prop::array::uniform5(1usize..12), classes in 2usize..6) {
        let config = BackboneConfig { channels: widths, num_classes: classes, ..BackboneConfig::default() };
        let a = MiniFcn::new(config.clone()).unwrap();
        let b = MiniFcn::new(BackboneConfig { init_seed: 99, ..config }).unwrap();
        prop_assert_eq!(a.num_params(), b.num_params());
        prop_assert_eq!(a.param_names(), b.param_names());
        let shapes = |m: &MiniFcn| m.params().iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn small_critic_steps_do_not_raise_the_loss(
        fs in tensor(vec![2, 3, 4, 4], -1.0, 1.0),
        ft in tensor(vec![2, 3, 4, 4], 0.0, 2.0),
        seed in 0u64..100,
    ) {
        let mut disc = Discriminator::new(DiscriminatorConfig {
            in_channels: 3,
            branch_channels: 4,
            rates: vec![1, 2],
            init_seed: seed,
            ..DiscriminatorConfig::default()
        }).unwrap();
        let mut opt = Sgd::new(0.0, 0.0);
        let first = d_step(&mut disc, &mut opt, &fs, &ft, 1e-4).unwrap().value;
        let second = d_step(&mut disc, &mut opt, &fs, &ft, 1e-4).unwrap().value;
        prop_assert!(second <= first + 1e-12, "{} -> {}", first, second);
    }

    #[test]
    fn image_level_critic_is_region_critic_on_pooled_features(
        f in tensor(vec![2, 3, 5, 4], -1.0, 1.0),
        seed in 0u64..100,
    ) {
        let base = DiscriminatorConfig {
            in_channels: 3,
            branch_channels: 4,
            rates: vec![1],
            init_seed: seed,
            ..DiscriminatorConfig::default()
        };
        let image = Discriminator::new(DiscriminatorConfig { granularity: Granularity::Image, ..base.clone() }).unwrap();
        let region = Discriminator::new(DiscriminatorConfig { granularity: Granularity::Region, ..base }).unwrap();
        let mut tape = Tape::new();
        let (bi, br) = (image.bind(&mut tape, false), region.bind(&mut tape, false));
        let x = tape.constant(&f);
        let si = image.forward(&mut tape, &bi, x).unwrap();
        let pooled = tape.adaptive_avg_pool(x, 1).unwrap();
        let sr = region.forward(&mut tape, &br, pooled).unwrap();
        prop_assert_eq!(tape.shape(si), &[2, 1, 1, 1]);
        prop_assert_eq!(tape.value(si), tape.value(sr));
    }
}
