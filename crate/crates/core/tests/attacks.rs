mod common;

use clat_core::attacks::{
    self, feature_deviation, feature_deviation_pgd, feature_fgsm, fgsm, per_sample_cross_entropy, pgd_untargeted,
    random_start, AttackConfig, Norm,
};
use clat_core::trainer::evaluate;
use clat_core::{Error, Network, Tensor};
use common::fixtures::{desk_arch, desk_attack, mlp, pretrained, rng, tiny_cnn, uniform};
use proptest::prelude::*;

fn within_budget(x: &Tensor, delta: &Tensor, cfg: &AttackConfig) -> bool {
    let len = x.sample_len();
    let box_ok = x.data().iter().zip(delta.data()).all(|(&xv, &d)| {
        let a = xv + d;
        (0.0..=1.0).contains(&a) && d.abs() <= cfg.epsilon + 1e-6
    });
    let ball_ok = match cfg.norm {
        Norm::Linf => true,
        Norm::L2 => delta
            .data()
            .chunks(len)
            .all(|c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() <= cfg.epsilon as f64 + 1e-6),
    };
    box_ok && ball_ok
}

fn labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

#[test]
fn zero_budget_gives_zero_perturbation() {
    let net = Network::init(desk_arch(), 1).unwrap();
    let x = uniform(&[4, 1, 12, 12], 2);
    let y = labels(4, 4);
    let cfg = AttackConfig::default().with_epsilon(0.0);
    let zero = Tensor::zeros(x.shape().to_vec());
    assert!(fgsm(&net, &x, &y, &cfg, &mut rng(0)).unwrap().bit_eq(&zero));
    assert!(pgd_untargeted(&net, &x, &y, &cfg, &mut rng(0)).unwrap().bit_eq(&zero));
    assert!(feature_deviation_pgd(&net, &x, &[2, 4], &cfg, &mut rng(0)).unwrap().bit_eq(&zero));
    assert!(feature_fgsm(&net, &x, &[3], &cfg, &mut rng(0)).unwrap().bit_eq(&zero));
}

#[test]
fn zero_budget_adversarial_accuracy_is_clean_accuracy() {
    let net = Network::init(desk_arch(), 1).unwrap();
    let data = common::fixtures::desk_data(64, 3);
    let (clean, adv) = evaluate(&net, &data, Some(&AttackConfig::default().with_epsilon(0.0)), 0).unwrap();
    assert_eq!(clean, adv);
}

#[test]
fn fgsm_has_sign_structure() {
    let net = Network::init(desk_arch(), 4).unwrap();
    // Interior inputs so domain clamping never binds.
    let x = Tensor::uniform([8, 1, 12, 12], 0.2, 0.8, &mut rng(1));
    let cfg = AttackConfig {
        random_start: false,
        ..AttackConfig::default()
    };
    let d = fgsm(&net, &x, &labels(8, 4), &cfg, &mut rng(2)).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0 || v == cfg.epsilon || v == -cfg.epsilon));
    assert!(d.data().iter().any(|&v| v != 0.0));
}

#[test]
fn paper_settings_respect_the_budget() {
    let cfg = AttackConfig::default();
    assert_eq!((cfg.epsilon, cfg.alpha, cfg.steps), (0.03, 0.007, 10));
    let net = Network::init(desk_arch(), 5).unwrap();
    let x = uniform(&[16, 1, 12, 12], 9);
    let d = pgd_untargeted(&net, &x, &labels(16, 4), &cfg, &mut rng(3)).unwrap();
    assert!(d.max_abs() <= 0.03);
    assert!(within_budget(&x, &d, &cfg));
}

#[test]
fn attacks_raise_the_loss_of_a_trained_net() {
    let (net, data) = pretrained(1, 3, 256);
    let (x, y) = data.batch(&(0..256).collect::<Vec<_>>()).unwrap();
    let cfg = desk_attack();
    let mean = |d: &Tensor| {
        let l = per_sample_cross_entropy(&net.forward(&x.add(d).unwrap()).unwrap(), &y);
        l.iter().sum::<f64>() / l.len() as f64
    };
    let clean = mean(&Tensor::zeros(x.shape().to_vec()));
    let mut losses = Vec::new();
    for steps in [1, 5, 10] {
        let d = pgd_untargeted(&net, &x, &y, &cfg.with_steps(steps), &mut rng(7)).unwrap();
        losses.push(mean(&d));
    }
    let f = mean(&fgsm(&net, &x, &y, &cfg, &mut rng(7)).unwrap());
    assert!(f > clean, "fgsm {f} vs clean {clean}");
    assert!(losses[0] > clean);
    // Statistical monotonicity in the number of steps.
    assert!(losses[1] >= losses[0] - 1e-3, "{losses:?}");
    assert!(losses[2] >= losses[1] - 1e-3, "{losses:?}");
}

#[test]
fn pgd_dominates_fgsm_on_a_logistic_model() {
    let net = Network::init(mlp(&[2, 2], &[false]), 3).unwrap();
    let x = Tensor::uniform([200, 2], 0.2, 0.8, &mut rng(4));
    let y = labels(200, 2);
    let cfg = AttackConfig::default().with_epsilon(0.1).with_alpha(0.025);
    let pgd = pgd_untargeted(&net, &x, &y, &cfg, &mut rng(5)).unwrap();
    let fg = fgsm(&net, &x, &y, &cfg, &mut rng(5)).unwrap();
    let lp = per_sample_cross_entropy(&net.forward(&x.add(&pgd).unwrap()).unwrap(), &y);
    let lf = per_sample_cross_entropy(&net.forward(&x.add(&fg).unwrap()).unwrap(), &y);
    let wins = lp.iter().zip(&lf).filter(|(p, f)| **p >= **f - 1e-6).count();
    assert!(wins * 10 >= 9 * 200, "pgd >= fgsm on only {wins}/200");
}

#[test]
fn feature_pgd_never_ends_below_its_start() {
    let net = Network::init(desk_arch(), 6).unwrap();
    let x = uniform(&[12, 1, 12, 12], 8);
    let cfg = AttackConfig::default().with_epsilon(0.1).with_alpha(0.02);
    for set in [vec![1], vec![2, 5], vec![6]] {
        let mut r = rng(10);
        let start = random_start(&x, &cfg, &mut r.clone());
        let d = feature_deviation_pgd(&net, &x, &set, &cfg, &mut r).unwrap();
        let at_start = feature_deviation(&net, &x, &start, &set).unwrap();
        let at_end = feature_deviation(&net, &x, &d, &set).unwrap();
        for (s, e) in at_start.iter().zip(&at_end) {
            assert!(e >= s, "set {set:?}: {e} < {s}");
        }
    }
}

#[test]
fn single_layer_objective_is_the_feature_deviation() {
    let net = Network::init(desk_arch(), 6).unwrap();
    let x = uniform(&[3, 1, 12, 12], 8);
    let d = Tensor::uniform([3, 1, 12, 12], -0.05, 0.05, &mut rng(1));
    let (_, clean) = net.forward_with_taps(&x, &[3]).unwrap();
    let (_, adv) = net.forward_with_taps(&x.add(&d).unwrap(), &[3]).unwrap();
    let want = adv.get(3).unwrap().sub(clean.get(3).unwrap()).unwrap();
    let got = feature_deviation(&net, &x, &d, &[3]).unwrap();
    let len = want.sample_len();
    for (n, g) in got.iter().enumerate() {
        let w: f64 = want.data()[n * len..(n + 1) * len].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((g - w).abs() <= 1e-5 * w.max(1.0));
    }
}

/// Max of `‖W·s·ε‖₂` over all 16 sign patterns `s` of a 4-pixel input.
fn exhaustive_linear_max(w: &Tensor, eps: f64) -> f64 {
    let (d, m) = (w.shape()[0], w.shape()[1]);
    (0..1u32 << d)
        .map(|mask| {
            let s: Vec<f64> = (0..d).map(|j| if mask & (1 << j) != 0 { eps } else { -eps }).collect();
            (0..m)
                .map(|o| (0..d).map(|j| s[j] * w.data()[j * m + o] as f64).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[test]
fn feature_pgd_reaches_exhaustive_optimum_on_linear_layer() {
    for seed in 0..5 {
        let net = Network::init(mlp(&[4, 3], &[false]), seed).unwrap();
        let x = Tensor::uniform([6, 4], 0.3, 0.7, &mut rng(seed));
        let cfg = AttackConfig::default().with_epsilon(0.1).with_alpha(0.025).with_restarts(10);
        let d = feature_deviation_pgd(&net, &x, &[1], &cfg, &mut rng(seed + 50)).unwrap();
        let best = exhaustive_linear_max(&net.layer(1).unwrap().weight, 0.1);
        for v in feature_deviation(&net, &x, &d, &[1]).unwrap() {
            assert!(v >= 0.95 * best && v <= best * (1.0 + 1e-5), "seed {seed}: {v} vs {best}");
        }
    }
}

#[test]
fn single_start_can_stall_at_a_local_vertex() {
    // The box-constrained sup of a convex objective has non-global local
    // maxima; one start from a uniform draw does not always find the best vertex.
    let net = Network::init(mlp(&[4, 3], &[false]), 1).unwrap();
    let x = Tensor::uniform([6, 4], 0.3, 0.7, &mut rng(1));
    let cfg = AttackConfig::default().with_epsilon(0.1).with_alpha(0.025);
    let best = exhaustive_linear_max(&net.layer(1).unwrap().weight, 0.1);
    let one = feature_deviation(&net, &x, &feature_deviation_pgd(&net, &x, &[1], &cfg, &mut rng(51)).unwrap(), &[1]).unwrap();
    let many = feature_deviation(
        &net,
        &x,
        &feature_deviation_pgd(&net, &x, &[1], &cfg.with_restarts(10), &mut rng(51)).unwrap(),
        &[1],
    )
    .unwrap();
    assert!(one.iter().any(|&v| v < 0.95 * best));
    for (a, b) in one.iter().zip(&many) {
        assert!(b >= a);
    }
}

#[test]
fn restarts_never_lower_the_pgd_loss() {
    let net = Network::init(tiny_cnn(), 2).unwrap();
    let x = uniform(&[8, 1, 6, 6], 3);
    let y = labels(8, 3);
    let cfg = AttackConfig::default().with_epsilon(0.1).with_alpha(0.02);
    let one = pgd_untargeted(&net, &x, &y, &cfg, &mut rng(9)).unwrap();
    let many = pgd_untargeted(&net, &x, &y, &cfg.with_restarts(4), &mut rng(9)).unwrap();
    let l1 = per_sample_cross_entropy(&net.forward(&x.add(&one).unwrap()).unwrap(), &y);
    let l4 = per_sample_cross_entropy(&net.forward(&x.add(&many).unwrap()).unwrap(), &y);
    for (a, b) in l1.iter().zip(&l4) {
        assert!(b >= a);
    }
}

#[test]
fn empty_critical_set_is_usage_error() {
    let net = Network::init(tiny_cnn(), 0).unwrap();
    let x = uniform(&[2, 1, 6, 6], 0);
    let cfg = AttackConfig::default();
    assert!(matches!(feature_deviation_pgd(&net, &x, &[], &cfg, &mut rng(0)), Err(Error::Usage(_))));
    assert!(matches!(feature_fgsm(&net, &x, &[], &cfg, &mut rng(0)), Err(Error::Usage(_))));
    assert!(feature_deviation_pgd(&net, &x, &[5], &cfg, &mut rng(0)).is_err());
}

#[test]
fn shape_and_config_errors() {
    let net = Network::init(tiny_cnn(), 0).unwrap();
    let x = uniform(&[2, 1, 5, 5], 0);
    assert!(matches!(
        pgd_untargeted(&net, &x, &[0, 1], &AttackConfig::default(), &mut rng(0)),
        Err(Error::Dimension { .. })
    ));
    let x = uniform(&[2, 1, 6, 6], 0);
    assert!(pgd_untargeted(&net, &x, &[0], &AttackConfig::default(), &mut rng(0)).is_err());
    let bad = AttackConfig::default().with_steps(0);
    assert!(matches!(pgd_untargeted(&net, &x, &[0, 1], &bad, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn norm_round_trips_through_text() {
    for n in [Norm::Linf, Norm::L2] {
        assert_eq!(n.to_string().parse::<Norm>().unwrap(), n);
    }
    assert!("l1".parse::<Norm>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_attack_stays_in_budget(
        seed in any::<u64>(),
        eps in 0.0f32..0.3,
        l2 in any::<bool>(),
        edge in any::<bool>(),
    ) {
        let net = Network::init(tiny_cnn(), seed).unwrap();
        let mut x = uniform(&[4, 1, 6, 6], seed ^ 3);
        if edge {
            // Saturated pixels exercise the domain clamp.
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                if i % 3 == 0 { *v = 1.0 } else if i % 3 == 1 { *v = 0.0 }
            }
        }
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: (eps / 4.0).max(1e-3),
            steps: 3,
            norm: if l2 { Norm::L2 } else { Norm::Linf },
            ..AttackConfig::default()
        };
        let y = labels(4, 3);
        let all = [
            fgsm(&net, &x, &y, &cfg, &mut rng(seed)).unwrap(),
            pgd_untargeted(&net, &x, &y, &cfg, &mut rng(seed)).unwrap(),
            feature_deviation_pgd(&net, &x, &[2], &cfg, &mut rng(seed)).unwrap(),
            feature_fgsm(&net, &x, &[1, 3], &cfg, &mut rng(seed)).unwrap(),
        ];
        for d in &all {
            prop_assert!(within_budget(&x, d, &cfg));
        }
    }

    #[test]
    fn attacks_are_deterministic(seed in any::<u64>()) {
        let net = Network::init(tiny_cnn(), seed).unwrap();
        let x = uniform(&[3, 1, 6, 6], seed);
        let y = labels(3, 3);
        let cfg = AttackConfig::default();
        let a = pgd_untargeted(&net, &x, &y, &cfg, &mut rng(seed)).unwrap();
        let b = pgd_untargeted(&net, &x, &y, &cfg, &mut rng(seed)).unwrap();
        prop_assert!(a.bit_eq(&b));
        let a = feature_deviation_pgd(&net, &x, &[2, 3], &cfg, &mut rng(seed)).unwrap();
        let b = feature_deviation_pgd(&net, &x, &[2, 3], &cfg, &mut rng(seed)).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), eps in 0.0f32..0.5) {
        let x = uniform(&[2, 1, 6, 6], seed);
        let cfg = AttackConfig::default().with_epsilon(eps);
        let mut d = Tensor::uniform([2, 1, 6, 6], -1.0, 1.0, &mut rng(seed));
        attacks::project(&x, &mut d, &cfg);
        let once = d.clone();
        attacks::project(&x, &mut d, &cfg);
        prop_assert!(d.bit_eq(&once));
        prop_assert!(within_budget(&x, &d, &cfg));
    }
}
