// Scratch experiment runner: compares noise-training configurations on the
// bundled digits corpus. Not part of the library surface.

use anp_core::attacks::{craft, AttackSpec};
use anp_core::data::builtin_digits_splits;
use anp_core::nn::{accuracy, build_lenet_small};
use anp_core::tensor::{NormOrder, Rng};
use anp_core::train::{train_anp, train_vanilla, AnpConfig, MaskSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let test_n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);

    let (train, test) = builtin_digits_splits(train_n, test_n, 42).unwrap();
    let eval_n = test_n.min(1000);
    let idx: Vec<usize> = (0..eval_n).collect();
    let (tx, ty) = test.gather(&idx);

    let base_cfg = AnpConfig {
        epochs,
        seed: 7,
        ..AnpConfig::default()
    };

    let mut van = build_lenet_small(&mut Rng::seed_from(1));
    let t0 = std::time::Instant::now();
    train_vanilla(&mut van, &train, Some(&test), &base_cfg).unwrap();
    let clean_v = accuracy(&van, &tx, &ty).unwrap();
    let fgsm_v = {
        let b = craft(&van, &tx, &ty, &AttackSpec::fgsm(0.2)).unwrap();
        accuracy(&van, &b.x_adv, &ty).unwrap()
    };
    println!(
        "vanilla: clean {:.3} fgsm02 {:.3} ({:.0}s)",
        clean_v,
        fgsm_v,
        t0.elapsed().as_secs_f64()
    );

    let configs: Vec<(&str, AnpConfig)> = vec![
        ("A p2 rms1.0 top4", base_cfg.clone()),
        (
            "B p2 rms3.0 top4",
            AnpConfig {
                eps: 3.0,
                ..base_cfg.clone()
            },
        ),
        (
            "C pinf abs0.2 top4",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.2,
                eps_absolute: true,
                ..base_cfg.clone()
            },
        ),
        (
            "D pinf abs0.1 top4",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.1,
                eps_absolute: true,
                ..base_cfg.clone()
            },
        ),
        (
            "E pinf rms0.5 top4",
            AnpConfig {
                p: NormOrder::LInf,
                eps: 0.5,
                ..base_cfg.clone()
            },
        ),
        (
            "F p2 rms1.0 single0",
            AnpConfig {
                layer_mask: MaskSpec::Single(0),
                ..base_cfg.clone()
            },
        ),
    ];

    for (name, cfg) in configs {
        let mut net = build_lenet_small(&mut Rng::seed_from(1));
        let t0 = std::time::Instant::now();
        train_anp(&mut net, &train, Some(&test), &cfg).unwrap();
        let clean = accuracy(&net, &tx, &ty).unwrap();
        let fgsm = {
            let b = craft(&net, &tx, &ty, &AttackSpec::fgsm(0.2)).unwrap();
            accuracy(&net, &b.x_adv, &ty).unwrap()
        };
        println!(
            "{name}: clean {:.3} fgsm02 {:.3} (gap {:+.1} pts, clean drop {:+.1} pts) ({:.0}s)",
            clean,
            fgsm,
            (fgsm - fgsm_v) * 100.0,
            (clean_v - clean) * 100.0,
            t0.elapsed().as_secs_f64()
        );
    }
}
