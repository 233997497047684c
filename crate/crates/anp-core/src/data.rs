//! Dataset ingestion (IDX files, synthetic generators, the bundled digits
//! corpus), corrupted-set materialization, and checkpoint persistence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::corruption::{corrupt_with_rng, CorruptionSpec};
use crate::error::{AnpError, Result};
use crate::nn::{decode_network, encode_network, Network};
use crate::tensor::{Rng, Tensor};

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Labeled image set; images are `[N, C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub split: String,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        name: impl Into<String>,
        split: impl Into<String>,
        class_count: usize,
    ) -> Result<Dataset> {
        if images.shape().len() != 4 {
            return Err(AnpError::domain("dataset images must be [N, C, H, W]"));
        }
        if images.shape()[0] != labels.len() {
            return Err(AnpError::domain(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(AnpError::domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            split: split.into(),
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of the examples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.images.example_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.example(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(shape, data).expect("gather preserves shape"), labels)
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            name: self.name.clone(),
            split: split.into(),
            class_count: self.class_count,
        }
    }

    /// First `n` examples (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split.clone())
    }
}

fn read_be_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(AnpError::format(format!("file truncated reading {what}")));
    }
    let v = u32::from_be_bytes([bytes[*pos], bytes[*pos + 1], bytes[*pos + 2], bytes[*pos + 3]]);
    *pos += 4;
    Ok(v)
}

fn parse_idx_images(bytes: &[u8], source: &str) -> Result<Tensor> {
    let mut pos = 0;
    let magic = read_be_u32(bytes, &mut pos, "image magic")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(AnpError::format(format!(
            "{source}: image magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}"
        )));
    }
    let n = read_be_u32(bytes, &mut pos, "image count")? as usize;
    let h = read_be_u32(bytes, &mut pos, "image rows")? as usize;
    let w = read_be_u32(bytes, &mut pos, "image cols")? as usize;
    let need = n * h * w;
    if bytes.len() - pos != need {
        return Err(AnpError::format(format!(
            "{source}: payload is {} bytes, header implies {need}",
            bytes.len() - pos
        )));
    }
    let data: Vec<f64> = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<usize>> {
    let mut pos = 0;
    let magic = read_be_u32(bytes, &mut pos, "label magic")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(AnpError::format(format!(
            "{source}: label magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}"
        )));
    }
    let n = read_be_u32(bytes, &mut pos, "label count")? as usize;
    if bytes.len() - pos != n {
        return Err(AnpError::format(format!(
            "{source}: label payload is {} bytes, header implies {n}",
            bytes.len() - pos
        )));
    }
    Ok(bytes[pos..].iter().map(|&b| b as usize).collect())
}

/// Load a big-endian IDX image/label file pair; pixels are scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| AnpError::format(format!("{}: {e}", images_path.display())))?;
    let lbl_bytes = fs::read(labels_path)
        .map_err(|e| AnpError::format(format!("{}: {e}", labels_path.display())))?;
    let images = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    if images.shape()[0] != labels.len() {
        return Err(AnpError::format(format!(
            "{} images in {} but {} labels in {}",
            images.shape()[0],
            images_path.display(),
            labels.len(),
            labels_path.display()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        images,
        labels,
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        "idx",
        classes.max(10).min(256),
    )
}

/// Serialize images (quantized to u8) and labels as an IDX pair.
pub fn write_idx(images: &Tensor, labels: &[usize], images_path: &Path, labels_path: &Path) -> Result<()> {
    if images.shape().len() != 4 || images.shape()[1] != 1 {
        return Err(AnpError::domain("IDX writer expects [N, 1, H, W] images"));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let mut img_bytes = Vec::with_capacity(16 + n * h * w);
    img_bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    img_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(h as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for v in images.data() {
        img_bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lbl_bytes = Vec::with_capacity(8 + n);
    lbl_bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    lbl_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in labels {
        if y > 255 {
            return Err(AnpError::domain("IDX labels must fit in a byte"));
        }
        lbl_bytes.push(y as u8);
    }
    write_atomic(images_path, &img_bytes)?;
    write_atomic(labels_path, &lbl_bytes)?;
    Ok(())
}

/// Write via a temp file and rename, so partial writes never corrupt outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- synthetic generators ----

/// Gaussian class blobs on a circle inside the unit square. Labels are
/// assigned round-robin so classes stay balanced within one example.
pub fn synth_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || classes == 0 {
        return Err(AnpError::domain("blobs need n > 0 and classes > 0"));
    }
    let mut rng = Rng::derive(seed, 0xb20b);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let cx = 0.5 + 0.3 * angle.cos();
        let cy = 0.5 + 0.3 * angle.sin();
        data.push((cx + spread * rng.normal()).clamp(0.0, 1.0));
        data.push((cy + spread * rng.normal()).clamp(0.0, 1.0));
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 1, 2], data)?,
        labels,
        "blobs",
        "train",
        classes,
    )
}

/// Two interleaved spiral arms in the unit square.
pub fn synth_spirals(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(AnpError::domain("spirals need n > 0"));
    }
    let mut rng = Rng::derive(seed, 0x5b14);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.uniform(); // position along the arm
        let radius = 0.05 + 0.4 * t;
        let angle = 3.0 * std::f64::consts::PI * t + class as f64 * std::f64::consts::PI;
        let jitter = 0.01;
        data.push((0.5 + radius * angle.cos() + jitter * rng.normal()).clamp(0.0, 1.0));
        data.push((0.5 + radius * angle.sin() + jitter * rng.normal()).clamp(0.0, 1.0));
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 1, 2], data)?,
        labels,
        "spirals",
        "train",
        2,
    )
}

// ---- bundled digits corpus ----

const DIGITS_IMAGES: &[u8] = include_bytes!("../assets/digits-images-idx3-ubyte");
const DIGITS_LABELS: &[u8] = include_bytes!("../assets/digits-labels-idx1-ubyte");

/// The raw bundled corpus: 1797 handwritten digits at 8x8.
pub fn builtin_digits_raw() -> Result<Dataset> {
    let images = parse_idx_images(DIGITS_IMAGES, "builtin digits images")?;
    let labels = parse_idx_labels(DIGITS_LABELS, "builtin digits labels")?;
    Dataset::new(images, labels, "digits", "all", 10)
}

/// Upscale one 8x8 digit to 24x24 (nearest, 3x) and paste it into a 28x28
/// canvas at offset `(dx, dy)` with `dx, dy` in `0..=4`.
fn digit_to_28(src: &[f64], dx: usize, dy: usize) -> Vec<f64> {
    let mut out = vec![0.0; 28 * 28];
    for y in 0..24 {
        for x in 0..24 {
            out[(y + dy) * 28 + (x + dx)] = src[(y / 3) * 8 + (x / 3)];
        }
    }
    out
}

/// MNIST-shaped (1x28x28) train/test splits expanded from the bundled digits
/// corpus by deterministic translation augmentation. Base images are split
/// into disjoint train/test pools before augmentation, so test examples
/// never share a base image with training ones.
pub fn builtin_digits_splits(train_n: usize, test_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let raw = builtin_digits_raw()?;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    let mut rng = Rng::derive(seed, 0xd161);
    rng.shuffle(&mut order);
    let test_pool_n = raw.len() / 6;
    let (test_pool, train_pool) = order.split_at(test_pool_n);

    let expand = |pool: &[usize], n: usize, split: &str, rng: &mut Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let base = pool[i % pool.len()];
            let dx = rng.below(5);
            let dy = rng.below(5);
            data.extend_from_slice(&digit_to_28(raw.images.example(base), dx, dy));
            labels.push(raw.labels[base]);
        }
        Dataset::new(
            Tensor::new(vec![n, 1, 28, 28], data)?,
            labels,
            "digits28",
            split,
            10,
        )
    };

    let train = expand(train_pool, train_n, "train", &mut rng)?;
    let test = expand(test_pool, test_n, "test", &mut rng)?;
    Ok((train, test))
}

/// Load MNIST-format IDX files from a directory using the standard file
/// names, taking seeded train/test subsets.
pub fn mnist_splits(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let mut rng = Rng::derive(seed, 0x335);
    let mut tr_idx: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut tr_idx);
    tr_idx.truncate(train_n.min(train.len()));
    let mut te_idx: Vec<usize> = (0..test.len()).collect();
    rng.shuffle(&mut te_idx);
    te_idx.truncate(test_n.min(test.len()));
    Ok((train.subset(&tr_idx, "train"), test.subset(&te_idx, "test")))
}

// ---- checkpoints ----

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &encode_network(net))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes =
        fs::read(path).map_err(|e| AnpError::format(format!("{}: {e}", path.display())))?;
    decode_network(&bytes)
}

// ---- corrupted-set materialization ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub kind: String,
    pub severity: u8,
    pub seed: u64,
    /// Path of the images file relative to the manifest.
    pub rel_path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.kind, r.severity, r.seed, r.rel_path));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(AnpError::format(format!(
                    "manifest line {}: expected 4 tab-separated fields",
                    ln + 1
                )));
            }
            rows.push(ManifestRow {
                kind: parts[0].to_string(),
                severity: parts[1]
                    .parse()
                    .map_err(|_| AnpError::format(format!("manifest line {}: bad severity", ln + 1)))?,
                seed: parts[2]
                    .parse()
                    .map_err(|_| AnpError::format(format!("manifest line {}: bad seed", ln + 1)))?,
                rel_path: parts[3].to_string(),
            });
        }
        Ok(Manifest { rows })
    }
}

/// Corrupt every image of `dataset` under each spec and write the results as
/// IDX splits under `out_dir/corrupted/<kind>/<severity>/`, plus a manifest.
/// Per-image noise streams are derived from `(spec.seed, image index)`, so a
/// re-run with the same seeds is byte-identical.
pub fn materialize_corrupted(dataset: &Dataset, specs: &[CorruptionSpec], out_dir: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for spec in specs {
        let corrupted = corrupt_dataset(dataset, spec)?;
        let rel_dir = PathBuf::from("corrupted")
            .join(spec.kind.name())
            .join(spec.severity.to_string());
        let dir = out_dir.join(&rel_dir);
        write_idx(
            &corrupted.images,
            &corrupted.labels,
            &dir.join("images-idx3-ubyte"),
            &dir.join("labels-idx1-ubyte"),
        )?;
        manifest.rows.push(ManifestRow {
            kind: spec.kind.name().to_string(),
            severity: spec.severity,
            seed: spec.seed,
            rel_path: rel_dir.join("images-idx3-ubyte").to_string_lossy().into_owned(),
        });
    }
    write_atomic(&out_dir.join("manifest.tsv"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// In-memory corruption of a whole dataset under one spec.
pub fn corrupt_dataset(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let n = dataset.len();
    if n == 0 {
        return Err(AnpError::domain("cannot corrupt an empty dataset"));
    }
    let mut shape = dataset.images.shape().to_vec();
    let mut data = Vec::with_capacity(dataset.images.len());
    let chw: Vec<usize> = shape[1..].to_vec();
    for i in 0..n {
        let img = Tensor::new(chw.clone(), dataset.images.example(i).to_vec())?;
        let mut rng = Rng::derive(spec.seed, i as u64);
        let out = corrupt_with_rng(&img, spec.kind, spec.severity, &mut rng)?;
        data.extend_from_slice(out.data());
    }
    shape[0] = n;
    Dataset::new(
        Tensor::new(shape, data)?,
        dataset.labels.clone(),
        format!("{}-{}-s{}", dataset.name, spec.kind.name(), spec.severity),
        dataset.split.clone(),
        dataset.class_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::CorruptionKind;
    use crate::nn::build_mlp;

    #[test]
    fn idx_roundtrip_recovers_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        // hand-built 2-image fixture with exactly representable pixel values
        let images = Tensor::new(
            vec![2, 1, 2, 2],
            vec![0.0, 1.0, 34.0 / 255.0, 255.0 / 255.0, 0.0, 128.0 / 255.0, 7.0 / 255.0, 0.0],
        )
        .unwrap();
        let labels = vec![3usize, 9];
        let ip = dir.path().join("im");
        let lp = dir.path().join("lb");
        write_idx(&images, &labels, &ip, &lp).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, labels);
        for (a, b) in ds.images.data().iter().zip(images.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // a second write of the same data is byte-identical
        let ip2 = dir.path().join("im2");
        let lp2 = dir.path().join("lb2");
        write_idx(&ds.images, &ds.labels, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let images = Tensor::zeros(vec![1, 1, 2, 2]);
        let ip = dir.path().join("im");
        let lp = dir.path().join("lb");
        write_idx(&images, &[0], &ip, &lp).unwrap();

        // labels file handed in as images: wrong magic
        let err = load_idx(&lp, &lp).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // truncated payload
        let mut bytes = fs::read(&ip).unwrap();
        bytes.pop();
        fs::write(dir.path().join("bad"), &bytes).unwrap();
        let err = load_idx(&dir.path().join("bad"), &lp).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn blobs_are_reproducible_balanced_and_separable() {
        let a = synth_blobs(90, 3, 0.02, 5).unwrap();
        let b = synth_blobs(90, 3, 0.02, 5).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);

        let mut counts = [0usize; 3];
        for &y in &a.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

        // nearest-centroid oracle classifies a tight-spread set perfectly
        let tight = synth_blobs(120, 4, 1e-4, 6).unwrap();
        let mut centroids = vec![(0.0, 0.0, 0usize); 4];
        for i in 0..tight.len() {
            let xy = tight.images.example(i);
            let c = &mut centroids[tight.labels[i]];
            c.0 += xy[0];
            c.1 += xy[1];
            c.2 += 1;
        }
        let hits = (0..tight.len())
            .filter(|&i| {
                let xy = tight.images.example(i);
                let best = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = (xy[0] - a.0 / a.2 as f64).powi(2) + (xy[1] - a.1 / a.2 as f64).powi(2);
                        let db = (xy[0] - b.0 / b.2 as f64).powi(2) + (xy[1] - b.1 / b.2 as f64).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                best == tight.labels[i]
            })
            .count();
        assert_eq!(hits, tight.len());

        let s = synth_spirals(60, 2).unwrap();
        assert_eq!(s.len(), 60);
        assert_eq!(s.labels.iter().filter(|&&y| y == 0).count(), 30);
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_mlp(&[4, 7, 3], &mut Rng::seed_from(3)).unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&net, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(net, back);
        // save -> load -> save produces identical bytes
        let p2 = dir.path().join("model2.ckpt");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());

        fs::write(dir.path().join("trunc.ckpt"), &fs::read(&p).unwrap()[..10]).unwrap();
        assert!(load_checkpoint(&dir.path().join("trunc.ckpt")).is_err());
    }

    #[test]
    fn builtin_digits_have_disjoint_pools_and_right_shapes() {
        let (train, test) = builtin_digits_splits(600, 150, 9).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 150);
        assert_eq!(train.images.shape(), &[600, 1, 28, 28]);
        assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // reproducible
        let (train2, _) = builtin_digits_splits(600, 150, 9).unwrap();
        assert_eq!(train.images.data(), train2.images.data());
        // all ten classes appear in both splits
        for split in [&train, &test] {
            let mut seen = [false; 10];
            for &y in &split.labels {
                seen[y] = true;
            }
            assert!(seen.iter().all(|&s| s), "missing class in {}", split.split);
        }
    }

    #[test]
    fn materialized_corruption_is_replay_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = builtin_digits_splits(12, 4, 1).unwrap();
        let specs: Vec<CorruptionSpec> = [CorruptionKind::GaussianNoise, CorruptionKind::Brightness]
            .iter()
            .flat_map(|&k| (1..=2).map(move |s| CorruptionSpec::new(k, s, 77).unwrap()))
            .collect();

        let m1 = materialize_corrupted(&ds, &specs, dir.path()).unwrap();
        assert_eq!(m1.rows.len(), specs.len());
        let snapshot: Vec<Vec<u8>> = m1
            .rows
            .iter()
            .map(|r| fs::read(dir.path().join(&r.rel_path)).unwrap())
            .collect();

        let m2 = materialize_corrupted(&ds, &specs, dir.path()).unwrap();
        assert_eq!(m1, m2);
        for (r, snap) in m2.rows.iter().zip(&snapshot) {
            assert_eq!(&fs::read(dir.path().join(&r.rel_path)).unwrap(), snap);
        }

        // regenerating in memory and quantizing matches the bytes on disk
        let spec = specs[0];
        let mem = corrupt_dataset(&ds, &spec).unwrap();
        let file = fs::read(dir.path().join(&m1.rows[0].rel_path)).unwrap();
        let quantized: Vec<u8> = mem
            .images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        assert_eq!(&file[16..], quantized.as_slice());

        // manifest text round-trips
        let text = m1.to_text();
        assert_eq!(Manifest::parse(&text).unwrap(), m1);
    }
}
