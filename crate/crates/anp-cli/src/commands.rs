//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anp_core::attacks::{craft, worst_case_accuracy, AttackMethod, AttackSpec};
use anp_core::corruption::{make_sequence, CorruptionKind, CorruptionSpec, PerturbationSequence};
use anp_core::data::{
    load_checkpoint, materialize_corrupted, save_checkpoint, write_atomic, write_idx, corrupt_dataset, Dataset,
};
use anp_core::metrics::{
    build_error_table, corruption_error, empirical_boundary_distance, flip_probability, flip_rates,
    generate_polluted, hidden_insensitivity, make_boundary_probe, noise_insensitivity, relative_mce,
    MetricReport, RelativeMceMode,
};
use anp_core::nn::{accuracy, Network};
use anp_core::train::{train_adversarial, train_anp, train_vanilla, AnpConfig, MaskSpec, TrainReport};
use anp_core::{AnpError, Result};

use crate::dataset::{build_arch, load_splits};
use crate::{Command, TrainOverrides};

fn resolve_cfg(overrides: &TrainOverrides, seed: Option<u64>) -> Result<AnpConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => AnpConfig::from_file(path)?,
        None => AnpConfig::default(),
    };
    if let Some(v) = overrides.eta {
        cfg.eta = v;
    }
    if let Some(v) = overrides.eps {
        cfg.eps = v;
    }
    if let Some(v) = overrides.k {
        cfg.k = v;
    }
    if let Some(v) = &overrides.p {
        cfg.p = anp_core::tensor::NormOrder::parse(v)?;
    }
    if let Some(v) = &overrides.layer_mask {
        cfg.layer_mask = MaskSpec::parse(v)?;
    }
    if let Some(v) = overrides.lr {
        cfg.lr = v;
    }
    if let Some(v) = overrides.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = overrides.batch_size {
        cfg.batch_size = v;
    }
    if overrides.eps_absolute {
        cfg.eps_absolute = true;
    }
    if overrides.accumulate_updates {
        cfg.accumulate_updates = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv(path: &Path, content: &str) -> Result<()> {
    write_atomic(path, content.as_bytes())
}

fn save_train_outputs(out: &Path, net: &Network, mut report: TrainReport) -> Result<()> {
    let ckpt = out.join("model.ckpt");
    save_checkpoint(net, &ckpt)?;
    report.checkpoint = Some(ckpt.display().to_string());
    write_csv(&out.join("train_report.csv"), &report.to_csv())?;
    if let Some(acc) = report.final_test_accuracy() {
        println!("final test accuracy {acc:.4}");
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// The full 8-kind x 5-severity suite, with per-cell seeds derived from the
/// master seed.
fn corruption_specs(seed: u64) -> Vec<CorruptionSpec> {
    let mut specs = Vec::new();
    for (ki, kind) in CorruptionKind::ALL.iter().enumerate() {
        for severity in 1..=5u8 {
            let cell_seed = seed
                .wrapping_mul(8 * 5)
                .wrapping_add((ki * 5 + severity as usize) as u64);
            specs.push(CorruptionSpec::new(*kind, severity, cell_seed).expect("severity in range"));
        }
    }
    specs
}

fn corruption_suite(test: &Dataset, seed: u64) -> Result<Vec<(CorruptionKind, u8, Dataset)>> {
    corruption_specs(seed)
        .into_iter()
        .map(|spec| Ok((spec.kind, spec.severity, corrupt_dataset(test, &spec)?)))
        .collect()
}

fn sequence_suite(test: &Dataset, images: usize, seed: u64) -> Result<Vec<(CorruptionKind, Vec<PerturbationSequence>)>> {
    let n = images.min(test.len());
    if n == 0 {
        return Err(AnpError::domain("no images available for sequences"));
    }
    CorruptionKind::ALL
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            let seqs = (0..n)
                .map(|i| {
                    let img = test.images.example_image(i);
                    make_sequence(&img, kind, 11, seed.wrapping_add((ki * 10_007 + i) as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((kind, seqs))
        })
        .collect()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            overrides,
            seed,
            out,
            dataset,
            arch,
            trainer,
            attack,
        } => {
            let cfg = resolve_cfg(&overrides, seed)?;
            let (train, test) = load_splits(&dataset, cfg.seed)?;
            let mut net = build_arch(&arch, &train, cfg.seed)?;
            let report = match trainer.as_str() {
                "anp" => train_anp(&mut net, &train, Some(&test), &cfg)?,
                "vanilla" => train_vanilla(&mut net, &train, Some(&test), &cfg)?,
                "adv" => {
                    let spec = AttackSpec::parse(
                        attack
                            .as_deref()
                            .ok_or_else(|| AnpError::config("--trainer adv needs --attack"))?,
                    )?;
                    train_adversarial(&mut net, &train, Some(&test), &cfg, &spec)?
                }
                other => return Err(AnpError::config(format!("unknown trainer {other:?}"))),
            };
            save_train_outputs(&out, &net, report)
        }

        Command::Attack {
            model,
            attack,
            dataset,
            seed,
            out,
        } => {
            let seed = seed.unwrap_or(0);
            let net = load_checkpoint(&model)?;
            let (_, test) = load_splits(&dataset, seed)?;
            let spec = AttackSpec::parse(&attack)?;
            let batch = craft(&net, &test.images, &test.labels, &spec)?;
            write_idx(
                &batch.x_adv,
                &test.labels,
                &out.join("adversarial-images-idx3-ubyte"),
                &out.join("adversarial-labels-idx1-ubyte"),
            )?;
            let mut csv = String::from("example,success,distortion\n");
            for (i, (s, d)) in batch.success_mask.iter().zip(&batch.distortion).enumerate() {
                csv.push_str(&format!("{i},{},{d}\n", *s as u8));
            }
            write_csv(&out.join("attack_success.csv"), &csv)?;
            println!(
                "attack {spec}: success rate {:.4} over {} examples",
                batch.success_rate(),
                test.len()
            );
            Ok(())
        }

        Command::EvalAdv {
            model,
            holdout,
            attack,
            dataset,
            seed,
            out,
        } => {
            let seed = seed.unwrap_or(0);
            let net = load_checkpoint(&model)?;
            let (_, test) = load_splits(&dataset, seed)?;
            let spec = AttackSpec::parse(&attack)?;
            let clean = accuracy(&net, &test.images, &test.labels)?;
            let mut report = MetricReport::default();
            report.push("clean_accuracy", "*", "*", clean);
            if holdout.is_empty() {
                let batch = craft(&net, &test.images, &test.labels, &spec)?;
                let adv = accuracy(&net, &batch.x_adv, &test.labels)?;
                report.push("whitebox_accuracy", spec.method.name(), "*", adv);
                println!("clean {clean:.4}, white-box {} accuracy {adv:.4}", spec.method.name());
            } else {
                let nets: Vec<Network> =
                    holdout.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
                let refs: Vec<&Network> = nets.iter().collect();
                let worst = worst_case_accuracy(&net, &refs, &test.images, &test.labels, &spec)?;
                report.push("worstcase_accuracy", spec.method.name(), "*", worst);
                println!(
                    "clean {clean:.4}, worst-case {} accuracy over {} holdouts {worst:.4}",
                    spec.method.name(),
                    nets.len()
                );
            }
            write_csv(&out.join("eval_adv.csv"), &report.to_csv())
        }

        Command::EvalCorr {
            model,
            baseline,
            dataset,
            seed,
            out,
            sequence_images,
            relative_clean_once,
        } => {
            let seed = seed.unwrap_or(0);
            let net = load_checkpoint(&model)?;
            let base_net = load_checkpoint(&baseline)?;
            let (_, test) = load_splits(&dataset, seed)?;

            let suite = corruption_suite(&test, seed)?;
            let model_table = build_error_table(&net, &test, &suite)?;
            let base_table = build_error_table(&base_net, &test, &suite)?;
            let ce = corruption_error(&model_table, &base_table)?;
            let mode = if relative_clean_once {
                RelativeMceMode::CleanOnce
            } else {
                RelativeMceMode::ScaledBySeverities
            };
            let rel = relative_mce(&model_table, &base_table, mode)?;

            let seqs = sequence_suite(&test, sequence_images, seed)?;
            let mut base_fp = BTreeMap::new();
            for (kind, s) in &seqs {
                base_fp.insert(*kind, flip_probability(&base_net, s)?);
            }
            let flips = flip_rates(&net, &seqs, &base_fp)?;

            let mut report = MetricReport::default();
            report.push("clean_err", "*", "*", model_table.clean_error);
            for ((kind, severity), err) in &model_table.cells {
                report.push("err", kind.name(), &severity.to_string(), *err);
            }
            for (kind, v) in &ce.per_kind {
                report.push("ce", kind.name(), "*", *v);
            }
            report.push("mce", "*", "*", ce.mce);
            report.push("relative_mce", "*", "*", rel);
            for (kind, fp, fr) in &flips.per_kind {
                report.push("fp", kind.name(), "*", *fp);
                report.push("fr", kind.name(), "*", *fr);
            }
            report.push("mfr", "*", "*", flips.mfr);
            write_csv(&out.join("eval_corr.csv"), &report.to_csv())?;
            println!("mCE {:.2}, relative mCE {:.2}, mFR {:.2}", ce.mce, rel, flips.mfr);
            Ok(())
        }

        Command::EvalStructure {
            model,
            dataset,
            seed,
            out,
            probe_images,
            probe_dirs,
            probe_step,
            probe_cap,
            insensitivity_eps,
            insensitivity_images,
        } => {
            let seed = seed.unwrap_or(0);
            let net = load_checkpoint(&model)?;
            let (_, test) = load_splits(&dataset, seed)?;
            let dim = test.images.example_len();

            let probe = make_boundary_probe(dim, probe_dirs.min(dim), probe_step, probe_cap, seed)?;
            let probe_set = test.take(probe_images.min(test.len()));
            let boundary = empirical_boundary_distance(&net, &probe_set.images, &probe)?;

            let ins_set = test.take(insensitivity_images.min(test.len()));
            let samples = generate_polluted(
                &net,
                &ins_set.images,
                &ins_set.labels,
                insensitivity_eps,
                2,
                seed,
            )?;
            let ins = noise_insensitivity(&net, &samples)?;

            let pairs: Vec<_> = samples
                .iter()
                .filter(|s| !s.polluted.is_empty())
                .map(|s| (s.clean.clone(), s.polluted[0].clone()))
                .collect();
            let hidden = hidden_insensitivity(&net, &pairs)?;

            let mut report = MetricReport::default();
            report.push("boundary_distance", "*", "*", boundary.w_f);
            report.push(
                "boundary_capped_fraction",
                "*",
                "*",
                boundary.capped.iter().filter(|&&c| c).count() as f64 / boundary.capped.len() as f64,
            );
            report.push("noise_insensitivity", "*", "*", ins.value);
            for layer in &hidden.layers {
                report.push(
                    "hidden_insensitivity",
                    &format!("layer{}", layer.layer_index),
                    "*",
                    layer.value,
                );
            }
            report.push("hidden_insensitivity", "*", "*", hidden.mean);
            write_csv(&out.join("eval_structure.csv"), &report.to_csv())?;
            println!(
                "boundary distance {:.4}, noise insensitivity {:.4}, hidden insensitivity {:.4}",
                boundary.w_f, ins.value, hidden.mean
            );
            Ok(())
        }

        Command::Ablate {
            overrides,
            masks,
            seed,
            out,
            dataset,
            arch,
            attack,
        } => {
            let cfg = resolve_cfg(&overrides, seed)?;
            let (train, test) = load_splits(&dataset, cfg.seed)?;
            let spec = AttackSpec::parse(&attack)?;
            if spec.method == AttackMethod::CwL2 {
                return Err(AnpError::config("ablate expects an l-inf attack spec"));
            }
            let init = build_arch(&arch, &train, cfg.seed)?;

            let mut sweep = Vec::new();
            for m in &masks {
                sweep.extend(parse_mask_sweep(m)?);
            }
            // validate every mask up front against the architecture
            for m in &sweep {
                m.resolve(&init)?;
            }

            // one shared vanilla baseline for the mCE column
            let suite = corruption_suite(&test, cfg.seed)?;
            let mut vanilla = init.clone();
            train_vanilla(&mut vanilla, &train, Some(&test), &cfg)?;
            let base_table = build_error_table(&vanilla, &test, &suite)?;

            let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
            for mask in &sweep {
                let mut net = init.clone();
                let run_cfg = AnpConfig {
                    layer_mask: mask.clone(),
                    ..cfg.clone()
                };
                train_anp(&mut net, &train, Some(&test), &run_cfg)?;
                let clean = accuracy(&net, &test.images, &test.labels)?;
                let adv = {
                    let b = craft(&net, &test.images, &test.labels, &spec)?;
                    accuracy(&net, &b.x_adv, &test.labels)?
                };
                let table = build_error_table(&net, &test, &suite)?;
                let mce = corruption_error(&table, &base_table)?.mce;
                rows.push((mask.to_string(), clean, adv, mce));
            }
            // deterministic reduction order regardless of sweep declaration
            rows.sort_by(|a, b| a.0.cmp(&b.0));

            let mut csv = String::from("mask,clean_accuracy,attack_accuracy,mce\n");
            for (mask, clean, adv, mce) in &rows {
                csv.push_str(&format!("{mask},{clean:.6},{adv:.6},{mce:.4}\n"));
            }
            write_csv(&out.join("ablate.csv"), &csv)?;
            println!("{} mask rows written to {}", rows.len(), out.join("ablate.csv").display());
            Ok(())
        }

        Command::Materialize { dataset, seed, out } => {
            let seed = seed.unwrap_or(0);
            let (_, test) = load_splits(&dataset, seed)?;
            let specs = corruption_specs(seed);
            let manifest = materialize_corrupted(&test, &specs, &out)?;
            println!(
                "materialized {} corrupted splits under {}",
                manifest.rows.len(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Expand `top:1..5` style sweep specs into concrete masks. Single values
/// (`top:3`, `single:2`, `0,1,2`) pass through as one-element sweeps.
fn parse_mask_sweep(s: &str) -> Result<Vec<MaskSpec>> {
    let s = s.trim();
    let parse_range = |v: &str| -> Result<(usize, usize)> {
        match v.split_once("..") {
            Some((lo, hi)) => {
                let lo: usize = lo
                    .trim()
                    .parse()
                    .map_err(|_| AnpError::config(format!("bad sweep bound {v:?}")))?;
                let hi: usize = hi
                    .trim()
                    .parse()
                    .map_err(|_| AnpError::config(format!("bad sweep bound {v:?}")))?;
                if lo > hi {
                    return Err(AnpError::config(format!("empty sweep range {v:?}")));
                }
                Ok((lo, hi))
            }
            None => {
                let x: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| AnpError::config(format!("bad sweep value {v:?}")))?;
                Ok((x, x))
            }
        }
    };

    if let Some((kind, arg)) = s.split_once(':') {
        match kind.trim() {
            "top" => {
                let (lo, hi) = parse_range(arg)?;
                return Ok((lo..=hi).map(MaskSpec::Top).collect());
            }
            "bottom" => {
                let (lo, hi) = parse_range(arg)?;
                return Ok((lo..=hi).map(MaskSpec::Bottom).collect());
            }
            "single" => {
                let (lo, hi) = parse_range(arg)?;
                return Ok((lo..=hi).map(MaskSpec::Single).collect());
            }
            "pair" => {
                let (base, ivs) = arg
                    .split_once('+')
                    .ok_or_else(|| AnpError::config(format!("pair sweep {arg:?} wants base+lo..hi")))?;
                let base: usize = base
                    .trim()
                    .parse()
                    .map_err(|_| AnpError::config(format!("bad pair base {base:?}")))?;
                let (lo, hi) = parse_range(ivs)?;
                return Ok((lo..=hi)
                    .map(|interval| MaskSpec::Pair { base, interval })
                    .collect());
            }
            _ => {}
        }
    }
    Ok(vec![MaskSpec::parse(s)?])
}
