//! Python bindings: datasets, models, noise-propagation training, attacks,
//! corruptions and the core metrics, operating on flat `list[float]`
//! buffers plus explicit shapes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use anp_core::attacks::{craft, worst_case_accuracy, AttackSpec};
use anp_core::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use anp_core::data::{builtin_digits_splits, load_idx, synth_blobs, synth_spirals, Dataset};
use anp_core::metrics::theorem2_bound;
use anp_core::nn::{accuracy, build_lenet_small, build_mlp, forward, predict, Network};
use anp_core::tensor::{NormOrder, Rng, Tensor};
use anp_core::train::{
    noise_update, train_adversarial, train_anp, train_vanilla, AnpConfig, MaskSpec,
};
use anp_core::AnpError;

fn to_py(err: AnpError) -> PyErr {
    match err {
        AnpError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

/// Labeled dataset of images in `[0, 1]`.
#[pyclass(name = "Data")]
#[derive(Clone)]
struct PyData {
    ds: Dataset,
}

#[pymethods]
impl PyData {
    /// Gaussian class blobs in the unit square.
    #[staticmethod]
    #[pyo3(signature = (n, classes=2, spread=0.08, seed=0))]
    fn blobs(n: usize, classes: usize, spread: f64, seed: u64) -> PyResult<PyData> {
        Ok(PyData {
            ds: synth_blobs(n, classes, spread, seed).map_err(to_py)?,
        })
    }

    /// Two interleaved spirals.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0))]
    fn spirals(n: usize, seed: u64) -> PyResult<PyData> {
        Ok(PyData {
            ds: synth_spirals(n, seed).map_err(to_py)?,
        })
    }

    /// Bundled handwritten digits expanded to 28x28 train/test splits.
    #[staticmethod]
    #[pyo3(signature = (train_n, test_n, seed=0))]
    fn digits(train_n: usize, test_n: usize, seed: u64) -> PyResult<(PyData, PyData)> {
        let (tr, te) = builtin_digits_splits(train_n, test_n, seed).map_err(to_py)?;
        Ok((PyData { ds: tr }, PyData { ds: te }))
    }

    /// Load a big-endian IDX image/label file pair.
    #[staticmethod]
    fn load_idx(images_path: &str, labels_path: &str) -> PyResult<PyData> {
        Ok(PyData {
            ds: load_idx(images_path.as_ref(), labels_path.as_ref()).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.ds.len()
    }

    /// Flat row-major image buffer.
    fn images(&self) -> Vec<f64> {
        self.ds.images.data().to_vec()
    }

    fn shape(&self) -> Vec<usize> {
        self.ds.images.shape().to_vec()
    }

    fn labels(&self) -> Vec<usize> {
        self.ds.labels.clone()
    }

    fn class_count(&self) -> usize {
        self.ds.class_count
    }
}

/// Training hyperparameters; `layer_mask` uses the textual mask grammar
/// (`top:4`, `bottom:2`, `single:0`, `pair:1+3`, or `0,1,2`).
#[pyclass(name = "TrainConfig")]
#[derive(Clone)]
struct PyTrainConfig {
    cfg: AnpConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (eta=0.1, eps=1.0, k=3, p="2", layer_mask="top:4", lr=0.05,
                        epochs=10, batch_size=64, seed=0, eps_absolute=false,
                        accumulate_updates=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        eta: f64,
        eps: f64,
        k: usize,
        p: &str,
        layer_mask: &str,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        eps_absolute: bool,
        accumulate_updates: bool,
    ) -> PyResult<PyTrainConfig> {
        let cfg = AnpConfig {
            eta,
            eps,
            k,
            p: NormOrder::parse(p).map_err(to_py)?,
            layer_mask: MaskSpec::parse(layer_mask).map_err(to_py)?,
            lr,
            epochs,
            batch_size,
            seed,
            eps_absolute,
            accumulate_updates,
        };
        cfg.validate().map_err(to_py)?;
        Ok(PyTrainConfig { cfg })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.cfg)
    }
}

/// A feed-forward network with per-layer noise slots.
#[pyclass(name = "Model")]
struct PyModel {
    net: Network,
}

#[pymethods]
impl PyModel {
    /// Small LeNet-style conv net for 1x28x28 inputs.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn lenet_small(seed: u64) -> PyModel {
        PyModel {
            net: build_lenet_small(&mut Rng::seed_from(seed)),
        }
    }

    /// Fully-connected ReLU stack with the given widths.
    #[staticmethod]
    #[pyo3(signature = (dims, seed=0))]
    fn mlp(dims: Vec<usize>, seed: u64) -> PyResult<PyModel> {
        Ok(PyModel {
            net: build_mlp(&dims, &mut Rng::seed_from(seed)).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyModel> {
        Ok(PyModel {
            net: anp_core::data::load_checkpoint(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        anp_core::data::save_checkpoint(&self.net, path.as_ref()).map_err(to_py)
    }

    fn input_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn class_count(&self) -> usize {
        self.net.class_count()
    }

    /// Noise slots: the input plus each affine/conv layer.
    fn noisy_slot_count(&self) -> usize {
        self.net.noisy_slot_count()
    }

    /// Every parameter, flattened in declaration order.
    fn params(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    fn predict(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<usize>> {
        predict(&self.net, &tensor_from(images, shape)?).map_err(to_py)
    }

    fn logits(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let trace = forward(&self.net, &tensor_from(images, shape)?, None).map_err(to_py)?;
        Ok(trace.logits().data().to_vec())
    }

    fn accuracy(&self, data: &PyData) -> PyResult<f64> {
        accuracy(&self.net, &data.ds.images, &data.ds.labels).map_err(to_py)
    }

    /// Train with layer-wise noise propagation. Returns per-epoch
    /// `(epoch, train_loss, train_accuracy, test_accuracy)` tuples.
    #[pyo3(signature = (train, cfg, test=None))]
    fn train_anp(
        &mut self,
        train: &PyData,
        cfg: &PyTrainConfig,
        test: Option<&PyData>,
    ) -> PyResult<Vec<(usize, f64, f64, Option<f64>)>> {
        let report = train_anp(&mut self.net, &train.ds, test.map(|t| &t.ds), &cfg.cfg).map_err(to_py)?;
        Ok(report
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy))
            .collect())
    }

    /// Plain SGD baseline.
    #[pyo3(signature = (train, cfg, test=None))]
    fn train_vanilla(
        &mut self,
        train: &PyData,
        cfg: &PyTrainConfig,
        test: Option<&PyData>,
    ) -> PyResult<Vec<(usize, f64, f64, Option<f64>)>> {
        let report =
            train_vanilla(&mut self.net, &train.ds, test.map(|t| &t.ds), &cfg.cfg).map_err(to_py)?;
        Ok(report
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy))
            .collect())
    }

    /// Adversarial-training baseline with an FGSM or PGD inner attack.
    #[pyo3(signature = (train, cfg, attack, test=None))]
    fn train_adversarial(
        &mut self,
        train: &PyData,
        cfg: &PyTrainConfig,
        attack: &str,
        test: Option<&PyData>,
    ) -> PyResult<Vec<(usize, f64, f64, Option<f64>)>> {
        let spec = AttackSpec::parse(attack).map_err(to_py)?;
        let report =
            train_adversarial(&mut self.net, &train.ds, test.map(|t| &t.ds), &cfg.cfg, &spec)
                .map_err(to_py)?;
        Ok(report
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy))
            .collect())
    }

    /// Craft adversarial examples; returns `(x_adv_flat, success, distortion)`.
    fn craft(&self, data: &PyData, attack: &str) -> PyResult<(Vec<f64>, Vec<bool>, Vec<f64>)> {
        let spec = AttackSpec::parse(attack).map_err(to_py)?;
        let batch = craft(&self.net, &data.ds.images, &data.ds.labels, &spec).map_err(to_py)?;
        Ok((batch.x_adv.data().to_vec(), batch.success_mask, batch.distortion))
    }

    /// Black-box worst-case accuracy across hold-out models.
    fn worst_case_accuracy(&self, holdouts: Vec<PyRef<PyModel>>, data: &PyData, attack: &str) -> PyResult<f64> {
        let spec = AttackSpec::parse(attack).map_err(to_py)?;
        let nets: Vec<&Network> = holdouts.iter().map(|h| &h.net).collect();
        worst_case_accuracy(&self.net, &nets, &data.ds.images, &data.ds.labels, &spec).map_err(to_py)
    }

    /// Layer-wise deviation bound audit for affine+ReLU stacks; returns
    /// `(lhs, rhs, holds)`.
    fn deviation_bound(&self, eps_per_layer: Vec<f64>, x: Vec<f64>, shape: Vec<usize>) -> PyResult<(f64, f64, bool)> {
        let audit = theorem2_bound(&self.net, &eps_per_layer, &tensor_from(x, shape)?).map_err(to_py)?;
        Ok((audit.lhs, audit.rhs, audit.holds))
    }
}

/// Apply one corruption to a CHW image.
#[pyfunction]
#[pyo3(name = "corrupt", signature = (image, shape, kind, severity, seed=0))]
fn py_corrupt(image: Vec<f64>, shape: Vec<usize>, kind: &str, severity: u8, seed: u64) -> PyResult<Vec<f64>> {
    let spec = CorruptionSpec::new(CorruptionKind::parse(kind).map_err(to_py)?, severity, seed)
        .map_err(to_py)?;
    let out = corrupt(&tensor_from(image, shape)?, &spec).map_err(to_py)?;
    Ok(out.data().to_vec())
}

/// Corruption kind names accepted by `corrupt`.
#[pyfunction]
fn corruption_kinds() -> Vec<&'static str> {
    CorruptionKind::ALL.iter().map(|k| k.name()).collect()
}

/// One register update `(1-eta) r + (eps/k) g/||g||_p`.
#[pyfunction]
#[pyo3(name = "noise_update")]
fn py_noise_update(r: Vec<f64>, g: Vec<f64>, eta: f64, eps: f64, k: usize, p: &str) -> PyResult<Vec<f64>> {
    let rt = Tensor::from_flat(r);
    let gt = Tensor::from_flat(g);
    let out = noise_update(&rt, &gt, eta, eps, k, NormOrder::parse(p).map_err(to_py)?).map_err(to_py)?;
    Ok(out.data().to_vec())
}

#[pymodule]
fn anp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyData>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(py_corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(py_noise_update, m)?)?;
    Ok(())
}
