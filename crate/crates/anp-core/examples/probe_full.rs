// Full-scale probe: vanilla vs FGSM-adversarial-training ceiling vs noise
// propagation variants, at the 10k/2k 10-epoch scale.

use anp_core::attacks::{craft, AttackSpec};
use anp_core::data::builtin_digits_splits;
use anp_core::nn::{accuracy, build_lenet_small};
use anp_core::tensor::{NormOrder, Rng};
use anp_core::train::{train_adversarial, train_anp, train_vanilla, AnpConfig, MaskSpec};

fn fgsm_acc(net: &anp_core::nn::Network, tx: &anp_core::tensor::Tensor, ty: &[usize]) -> f64 {
    let b = craft(net, tx, ty, &AttackSpec::fgsm(0.2)).unwrap();
    accuracy(net, &b.x_adv, ty).unwrap()
}

fn main() {
    let (train, test) = builtin_digits_splits(10_000, 2_000, 42).unwrap();
    let idx: Vec<usize> = (0..1000).collect();
    let (tx, ty) = test.gather(&idx);

    let base = AnpConfig {
        epochs: 10,
        seed: 7,
        ..AnpConfig::default()
    };

    let mut van = build_lenet_small(&mut Rng::seed_from(1));
    let t = std::time::Instant::now();
    train_vanilla(&mut van, &train, Some(&test), &base).unwrap();
    println!(
        "vanilla: clean {:.3} fgsm02 {:.3} ({:.0}s)",
        accuracy(&van, &tx, &ty).unwrap(),
        fgsm_acc(&van, &tx, &ty),
        t.elapsed().as_secs_f64()
    );

    let mut nat = build_lenet_small(&mut Rng::seed_from(1));
    let t = std::time::Instant::now();
    train_adversarial(&mut nat, &train, Some(&test), &base, &AttackSpec::fgsm(0.2)).unwrap();
    println!(
        "nat-fgsm02 (ceiling): clean {:.3} fgsm02 {:.3} ({:.0}s)",
        accuracy(&nat, &tx, &ty).unwrap(),
        fgsm_acc(&nat, &tx, &ty),
        t.elapsed().as_secs_f64()
    );

    let variants: Vec<(&str, AnpConfig)> = vec![
        (
            "anp pinf abs0.2 top4",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.2,
                eps_absolute: true,
                ..base.clone()
            },
        ),
        (
            "anp pinf abs0.3 top4",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.3,
                eps_absolute: true,
                ..base.clone()
            },
        ),
        (
            "anp pinf abs0.3 single0",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.3,
                eps_absolute: true,
                layer_mask: MaskSpec::Single(0),
                ..base.clone()
            },
        ),
    ];

    for (name, cfg) in variants {
        let mut net = build_lenet_small(&mut Rng::seed_from(1));
        let t = std::time::Instant::now();
        train_anp(&mut net, &train, Some(&test), &cfg).unwrap();
        println!(
            "{name}: clean {:.3} fgsm02 {:.3} ({:.0}s)",
            accuracy(&net, &tx, &ty).unwrap(),
            fgsm_acc(&net, &tx, &ty),
            t.elapsed().as_secs_f64()
        );
    }
}
