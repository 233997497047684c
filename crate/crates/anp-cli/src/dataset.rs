//! Dataset and architecture specs for the command line.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anp_core::data::{builtin_digits_splits, load_idx, mnist_splits, synth_blobs, synth_spirals, Dataset};
use anp_core::nn::{build_lenet_small, build_mlp, Network};
use anp_core::tensor::Rng;
use anp_core::{AnpError, Result};

fn parse_kv(rest: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for pair in rest.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| AnpError::config(format!("dataset spec item {pair:?} is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get_usize(map: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| AnpError::config(format!("dataset spec {key}={v:?} is not an integer"))),
    }
}

fn get_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| AnpError::config(format!("dataset spec {key}={v:?} is not a number"))),
    }
}

/// Parse a dataset spec into (train, test) splits.
///
/// Forms: `blobs:n=2000,classes=2,spread=0.08`, `spirals:n=2000`,
/// `digits:train=2000,test=500`, `mnist:dir=PATH,train=10000,test=2000`,
/// `idx:images=PATH,labels=PATH` (single split used for both).
pub fn load_splits(spec: &str, seed: u64) -> Result<(Dataset, Dataset)> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let map = parse_kv(rest)?;
    match name.trim() {
        "blobs" => {
            let n = get_usize(&map, "n", 2000)?;
            let classes = get_usize(&map, "classes", 2)?;
            let spread = get_f64(&map, "spread", 0.08)?;
            let train = synth_blobs(n, classes, spread, seed)?;
            let test = synth_blobs((n / 4).max(classes), classes, spread, seed.wrapping_add(1))?;
            Ok((train, test))
        }
        "spirals" => {
            let n = get_usize(&map, "n", 2000)?;
            let train = synth_spirals(n, seed)?;
            let test = synth_spirals((n / 4).max(2), seed.wrapping_add(1))?;
            Ok((train, test))
        }
        "digits" => {
            let train_n = get_usize(&map, "train", 2000)?;
            let test_n = get_usize(&map, "test", 500)?;
            builtin_digits_splits(train_n, test_n, seed)
        }
        "mnist" => {
            let dir = map
                .get("dir")
                .ok_or_else(|| AnpError::config("mnist spec needs dir=PATH"))?;
            let train_n = get_usize(&map, "train", 10_000)?;
            let test_n = get_usize(&map, "test", 2_000)?;
            mnist_splits(&PathBuf::from(dir), train_n, test_n, seed)
        }
        "idx" => {
            let images = map
                .get("images")
                .ok_or_else(|| AnpError::config("idx spec needs images=PATH"))?;
            let labels = map
                .get("labels")
                .ok_or_else(|| AnpError::config("idx spec needs labels=PATH"))?;
            let ds = load_idx(&PathBuf::from(images), &PathBuf::from(labels))?;
            Ok((ds.clone(), ds))
        }
        other => Err(AnpError::config(format!("unknown dataset spec {other:?}"))),
    }
}

/// Build a network for the dataset: `lenet`, `mlp:d0,d1,...,dK`, or pick a
/// default from the input shape when unspecified.
pub fn build_arch(arch: &Option<String>, train: &Dataset, seed: u64) -> Result<Network> {
    let mut rng = Rng::derive(seed, 0xa7c4);
    let input_shape: Vec<usize> = train.images.shape()[1..].to_vec();
    let input_dim: usize = input_shape.iter().product();
    match arch.as_deref() {
        Some("lenet") => {
            if input_shape != [1, 28, 28] {
                return Err(AnpError::config(format!(
                    "lenet expects 1x28x28 inputs, dataset has {input_shape:?}"
                )));
            }
            Ok(build_lenet_small(&mut rng))
        }
        Some(s) if s.starts_with("mlp:") => {
            let dims: Vec<usize> = s[4..]
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse()
                        .map_err(|_| AnpError::config(format!("bad mlp dim {d:?}")))
                })
                .collect::<Result<_>>()?;
            if dims.first() != Some(&input_dim) {
                return Err(AnpError::config(format!(
                    "mlp input dim {:?} does not match dataset dim {input_dim}",
                    dims.first()
                )));
            }
            if dims.last() != Some(&train.class_count) {
                return Err(AnpError::config(format!(
                    "mlp output dim {:?} does not match {} classes",
                    dims.last(),
                    train.class_count
                )));
            }
            build_mlp(&dims, &mut rng)
        }
        Some(other) => Err(AnpError::config(format!("unknown arch {other:?}"))),
        None => {
            if input_shape == [1, 28, 28] {
                Ok(build_lenet_small(&mut rng))
            } else {
                build_mlp(&[input_dim, 32, train.class_count], &mut rng)
            }
        }
    }
}
