//! Training loops: layer-wise adversarial noise propagation, plain SGD, and
//! FGSM/PGD adversarial-training baselines; layer-mask construction for the
//! ablation sweeps; flat key=value config files.
//!
//! One mini-batch of noise training runs `k` progressive iterations. Each
//! iteration forwards with the current registers (iteration 0 with zero
//! noise), backs up parameter and hidden-state gradients, applies an SGD
//! update, and then refreshes every masked register with
//! `r <- (1 - eta) * r + (eps / k) * g / ||g||_p`, per example.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use crate::attacks::{craft, AttackMethod, AttackSpec};
use crate::data::Dataset;
use crate::error::{AnpError, Result};
use crate::nn::{accuracy, backward, cross_entropy_loss, forward, BackwardTrace, Network, NoiseRegisters};
use crate::tensor::{normalize_lp_slice, NormOrder, Rng, Tensor};

/// Which noise slots a mask selects, before it is resolved against a
/// concrete network. Slot 0 is the input; slot `s >= 1` the `s`-th
/// affine/conv layer, counted from the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSpec {
    Top(usize),
    Bottom(usize),
    Single(usize),
    Pair { base: usize, interval: usize },
    Explicit(Vec<usize>),
}

impl MaskSpec {
    /// Parse `top:4`, `bottom:2`, `single:0`, `pair:1+3`, or `0,1,2`.
    pub fn parse(s: &str) -> Result<MaskSpec> {
        let s = s.trim();
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| AnpError::config(format!("mask spec number {v:?} is not an integer")))
        };
        if let Some((kind, arg)) = s.split_once(':') {
            return match kind.trim() {
                "top" => Ok(MaskSpec::Top(num(arg)?)),
                "bottom" => Ok(MaskSpec::Bottom(num(arg)?)),
                "single" => Ok(MaskSpec::Single(num(arg)?)),
                "pair" => {
                    let (b, i) = arg
                        .split_once('+')
                        .ok_or_else(|| AnpError::config(format!("pair mask {arg:?} wants base+interval")))?;
                    Ok(MaskSpec::Pair {
                        base: num(b)?,
                        interval: num(i)?,
                    })
                }
                other => Err(AnpError::config(format!("unknown mask kind {other:?}"))),
            };
        }
        let indices = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(num)
            .collect::<Result<Vec<usize>>>()?;
        if indices.is_empty() {
            return Err(AnpError::config("empty mask spec"));
        }
        Ok(MaskSpec::Explicit(indices))
    }

    /// Resolve against a concrete network. Group masks (`top`/`bottom`)
    /// clamp to the slot count so one default works across architectures;
    /// single, pair and explicit indices stay strict.
    pub fn resolve(&self, net: &Network) -> Result<LayerMask> {
        let count = net.noisy_slot_count();
        match *self {
            MaskSpec::Top(m) => layer_mask_top(net, m.min(count)),
            MaskSpec::Bottom(m) => layer_mask_bottom(net, m.min(count)),
            MaskSpec::Single(i) => layer_mask_single(net, i),
            MaskSpec::Pair { base, interval } => layer_mask_pair(net, base, interval),
            MaskSpec::Explicit(ref idx) => LayerMask::new(idx.clone(), net),
        }
    }
}

impl std::fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskSpec::Top(m) => write!(f, "top:{m}"),
            MaskSpec::Bottom(m) => write!(f, "bottom:{m}"),
            MaskSpec::Single(i) => write!(f, "single:{i}"),
            MaskSpec::Pair { base, interval } => write!(f, "pair:{base}+{interval}"),
            MaskSpec::Explicit(idx) => {
                let strs: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", strs.join(","))
            }
        }
    }
}

/// Validated, duplicate-free ordered set of noisy slot indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    indices: Vec<usize>,
}

impl LayerMask {
    pub fn new(indices: Vec<usize>, net: &Network) -> Result<LayerMask> {
        let count = net.noisy_slot_count();
        let set: BTreeSet<usize> = indices.iter().copied().collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= count) {
            return Err(AnpError::config(format!(
                "mask index {bad} out of range; network has noisy slots 0..{count}"
            )));
        }
        Ok(LayerMask {
            indices: set.into_iter().collect(),
        })
    }

    pub fn empty() -> LayerMask {
        LayerMask { indices: vec![] }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.indices.binary_search(&slot).is_ok()
    }
}

/// The `m` shallowest noisy slots (slot 0 = the input).
pub fn layer_mask_top(net: &Network, m: usize) -> Result<LayerMask> {
    let count = net.noisy_slot_count();
    if m == 0 || m > count {
        return Err(AnpError::config(format!(
            "top-{m} mask invalid for {count} noisy slots"
        )));
    }
    LayerMask::new((0..m).collect(), net)
}

/// The `m` deepest noisy slots; bottom-1 is the final affine layer.
pub fn layer_mask_bottom(net: &Network, m: usize) -> Result<LayerMask> {
    let count = net.noisy_slot_count();
    if m == 0 || m > count {
        return Err(AnpError::config(format!(
            "bottom-{m} mask invalid for {count} noisy slots"
        )));
    }
    LayerMask::new((count - m..count).collect(), net)
}

/// Noise on slot `m` only.
pub fn layer_mask_single(net: &Network, m: usize) -> Result<LayerMask> {
    LayerMask::new(vec![m], net)
}

/// Noise on `{base, base + interval}`; interval 0 collapses to a single.
pub fn layer_mask_pair(net: &Network, base: usize, interval: usize) -> Result<LayerMask> {
    LayerMask::new(vec![base, base + interval], net)
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone)]
pub struct AnpConfig {
    /// Register decay per update, in `[0, 1)`.
    pub eta: f64,
    /// Total noise magnitude per mini-batch. By default in units of each
    /// slot's pre-activation RMS at initialization; absolute when
    /// `eps_absolute` is set.
    pub eps: f64,
    /// Progressive steps per mini-batch.
    pub k: usize,
    pub p: NormOrder,
    pub layer_mask: MaskSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eps_absolute: bool,
    /// Accumulate parameter gradients over the k iterations and apply one
    /// summed update at the end of the mini-batch instead of k updates.
    pub accumulate_updates: bool,
}

impl Default for AnpConfig {
    fn default() -> Self {
        AnpConfig {
            eta: 0.1,
            eps: 1.0,
            k: 3,
            p: NormOrder::L2,
            layer_mask: MaskSpec::Top(4),
            lr: 0.05,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            eps_absolute: false,
            accumulate_updates: false,
        }
    }
}

impl AnpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(AnpError::config(format!("eta {} not in [0, 1)", self.eta)));
        }
        if self.eps < 0.0 {
            return Err(AnpError::config("eps must be >= 0"));
        }
        if self.k < 1 {
            return Err(AnpError::config("k must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(AnpError::config("lr must be > 0"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(AnpError::config("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file ('#' starts a comment). Keys
    /// match the field names; CLI-style overrides can be layered on top by
    /// calling [`AnpConfig::set`] afterwards.
    pub fn from_file(path: &Path) -> Result<AnpConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnpError::format(format!("{}: {e}", path.display())))?;
        let mut cfg = AnpConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AnpError::config(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| AnpError::config(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fnum = || {
            value
                .parse::<f64>()
                .map_err(|_| AnpError::config(format!("{key}={value:?} is not a number")))
        };
        let unum = || {
            value
                .parse::<usize>()
                .map_err(|_| AnpError::config(format!("{key}={value:?} is not an integer")))
        };
        let bnum = || match value {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(AnpError::config(format!("{key}={value:?} is not a bool"))),
        };
        match key {
            "eta" => self.eta = fnum()?,
            "eps" => self.eps = fnum()?,
            "k" => self.k = unum()?,
            "p" => self.p = NormOrder::parse(value)?,
            "layer_mask" => self.layer_mask = MaskSpec::parse(value)?,
            "lr" => self.lr = fnum()?,
            "epochs" => self.epochs = unum()?,
            "batch_size" => self.batch_size = unum()?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| AnpError::config(format!("seed={value:?} is not an integer")))?
            }
            "eps_absolute" => self.eps_absolute = bnum()?,
            "accumulate_updates" => self.accumulate_updates = bnum()?,
            other => return Err(AnpError::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Per-epoch statistics of a run.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_clock_secs: f64,
    /// Where the trained model was persisted, when the caller saved one.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_accuracy,test_loss,test_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                e.epoch,
                e.train_loss,
                e.train_accuracy,
                e.test_loss.map_or(String::new(), |v| format!("{v:.6}")),
                e.test_accuracy.map_or(String::new(), |v| format!("{v:.6}")),
            ));
        }
        s
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

/// One noise-register update:
/// `(1 - eta) * r + (eps / k) * g / ||g||_p`, with a zero gradient leaving
/// only the decayed register.
pub fn noise_update(r: &Tensor, g: &Tensor, eta: f64, eps: f64, k: usize, p: NormOrder) -> Result<Tensor> {
    if r.shape() != g.shape() {
        return Err(AnpError::domain(format!(
            "noise_update shapes differ: {:?} vs {:?}",
            r.shape(),
            g.shape()
        )));
    }
    let mut out = r.scale(1.0 - eta);
    let mut dir = g.data().to_vec();
    normalize_lp_slice(&mut dir, p);
    let step = eps / k as f64;
    for (o, d) in out.data_mut().iter_mut().zip(&dir) {
        *o += step * d;
    }
    Ok(out)
}

fn noise_update_slice(r: &mut [f64], g: &[f64], eta: f64, step: f64, p: NormOrder) {
    let mut dir = g.to_vec();
    normalize_lp_slice(&mut dir, p);
    for (rv, dv) in r.iter_mut().zip(&dir) {
        *rv = (1.0 - eta) * *rv + step * dv;
    }
}

/// Apply `theta <- theta - lr * grad` for every parameter.
pub fn sgd_apply(net: &mut Network, grads: &BackwardTrace, lr: f64) {
    for (layer, layer_grads) in net.layers_mut().iter_mut().zip(&grads.param_grads) {
        for (param, grad) in layer.params_mut().into_iter().zip(layer_grads) {
            for (pv, gv) in param.data_mut().iter_mut().zip(grad.data()) {
                *pv -= lr * gv;
            }
        }
    }
}

fn add_scaled_grads(acc: &mut Vec<Vec<Tensor>>, grads: &BackwardTrace) {
    if acc.is_empty() {
        *acc = grads.param_grads.clone();
        return;
    }
    for (a, g) in acc.iter_mut().zip(&grads.param_grads) {
        for (at, gt) in a.iter_mut().zip(g) {
            at.add_assign(gt).expect("accumulated grads share shapes");
        }
    }
}

/// Per-slot absolute noise budgets for a config: either the configured eps
/// verbatim, or eps scaled by each slot's pre-activation RMS measured on a
/// calibration batch at the current (initial) parameters with zero noise.
pub fn resolve_eps_per_slot(net: &Network, cfg: &AnpConfig, calibration: (&Tensor, &[usize])) -> Result<Vec<f64>> {
    let slots = net.noisy_slot_count();
    if cfg.eps_absolute {
        return Ok(vec![cfg.eps; slots]);
    }
    let trace = forward(net, calibration.0, None)?;
    let mut out = Vec::with_capacity(slots);
    for s in 0..slots {
        let values = match net.slot_layer_index(s) {
            None => trace.input.data(),
            Some(idx) => trace.outputs[idx].data(),
        };
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
        out.push(cfg.eps * rms);
    }
    Ok(out)
}

/// Run the `k` progressive backward-forward iterations of one mini-batch.
/// Registers must be zeroed by the caller beforehand. Returns the loss of
/// each iteration's forward pass.
pub fn anp_minibatch_step(
    net: &mut Network,
    registers: &mut NoiseRegisters,
    x: &Tensor,
    y: &[usize],
    cfg: &AnpConfig,
    mask: &LayerMask,
    eps_per_slot: &[f64],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if eps_per_slot.len() != net.noisy_slot_count() {
        return Err(AnpError::config("eps_per_slot length != noisy slot count"));
    }
    let batch = x.batch();
    let mut losses = Vec::with_capacity(cfg.k);
    let mut accumulated: Vec<Vec<Tensor>> = Vec::new();

    for _t in 0..cfg.k {
        // iteration 0 sees the zeroed registers, i.e. a clean forward
        let trace = forward(net, x, Some(registers))?;
        let bt = backward(net, &trace, y)?;
        losses.push(bt.loss);

        if cfg.accumulate_updates {
            add_scaled_grads(&mut accumulated, &bt);
        } else {
            sgd_apply(net, &bt, cfg.lr);
        }

        for &slot in mask.indices() {
            let step = eps_per_slot[slot] / cfg.k as f64;
            if step == 0.0 && cfg.eta == 0.0 {
                continue;
            }
            let g = bt.noise_grad(net, slot).clone();
            let r = registers.slot_mut(slot);
            for i in 0..batch {
                let range = r.example_range(i);
                noise_update_slice(&mut r.data_mut()[range.clone()], &g.data()[range], cfg.eta, step, cfg.p);
            }
        }
    }

    if cfg.accumulate_updates && !accumulated.is_empty() {
        for (layer, layer_grads) in net.layers_mut().iter_mut().zip(&accumulated) {
            for (param, grad) in layer.params_mut().into_iter().zip(layer_grads) {
                for (pv, gv) in param.data_mut().iter_mut().zip(grad.data()) {
                    *pv -= cfg.lr * gv;
                }
            }
        }
    }

    Ok(losses)
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn epoch_eval(net: &Network, train: &Dataset, test: Option<&Dataset>, epoch: usize, mean_loss: f64) -> Result<EpochStats> {
    // train accuracy on a capped subsample keeps epochs cheap
    let probe = train.take(2000.min(train.len()));
    let train_accuracy = accuracy(net, &probe.images, &probe.labels)?;
    let (test_loss, test_accuracy) = match test {
        Some(t) => {
            let trace = forward(net, &t.images, None)?;
            (
                Some(cross_entropy_loss(trace.logits(), &t.labels)?),
                Some(accuracy(net, &t.images, &t.labels)?),
            )
        }
        None => (None, None),
    };
    Ok(EpochStats {
        epoch,
        train_loss: mean_loss,
        train_accuracy,
        test_loss,
        test_accuracy,
    })
}

/// Train with layer-wise noise propagation. Deterministic given
/// `(dataset, cfg)`; the RMS noise scales are calibrated once on the first
/// examples at the initial parameters.
pub fn train_anp(net: &mut Network, train: &Dataset, test: Option<&Dataset>, cfg: &AnpConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(AnpError::domain("training dataset is empty"));
    }
    let started = Instant::now();
    let mask = cfg.layer_mask.resolve(net)?;

    let calib = train.take(256.min(train.len()));
    let eps_per_slot = resolve_eps_per_slot(net, cfg, (&calib.images, &calib.labels))?;

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_secs: 0.0,
        checkpoint: None,
    };

    let mut registers: Option<NoiseRegisters> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, 1000 + epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch_idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = train.gather(&batch_idx);
            let regs = match &mut registers {
                Some(r) if r.slot(0).batch() == batch_idx.len() => {
                    r.reset(); // every mini-batch starts from zero noise
                    r
                }
                _ => {
                    registers = Some(NoiseRegisters::zeros(net, batch_idx.len())?);
                    registers.as_mut().unwrap()
                }
            };
            let losses = anp_minibatch_step(net, regs, &x, &y, cfg, &mask, &eps_per_slot)?;
            loss_sum += losses[0];
            loss_n += 1;
        }
        report.epochs.push(epoch_eval(net, train, test, epoch, loss_sum / loss_n.max(1) as f64)?);
    }

    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Plain SGD baseline: one forward/backward/update per mini-batch, no
/// registers anywhere near the pipeline.
pub fn train_vanilla(net: &mut Network, train: &Dataset, test: Option<&Dataset>, cfg: &AnpConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(AnpError::domain("training dataset is empty"));
    }
    let started = Instant::now();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_secs: 0.0,
        checkpoint: None,
    };

    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, 1000 + epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch_idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = train.gather(&batch_idx);
            let trace = forward(net, &x, None)?;
            let bt = backward(net, &trace, &y)?;
            sgd_apply(net, &bt, cfg.lr);
            loss_sum += bt.loss;
            loss_n += 1;
        }
        report.epochs.push(epoch_eval(net, train, test, epoch, loss_sum / loss_n.max(1) as f64)?);
    }

    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Adversarial-training baseline: every mini-batch is replaced by examples
/// crafted against the current parameters (FGSM or PGD) before the SGD step.
pub fn train_adversarial(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &AnpConfig,
    inner_attack: &AttackSpec,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !matches!(inner_attack.method, AttackMethod::Fgsm | AttackMethod::Pgd) {
        return Err(AnpError::config(format!(
            "adversarial training supports fgsm or pgd inner attacks, got {}",
            inner_attack.method.name()
        )));
    }
    if train.is_empty() {
        return Err(AnpError::domain("training dataset is empty"));
    }
    let started = Instant::now();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_secs: 0.0,
        checkpoint: None,
    };

    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, 1000 + epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch_idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = train.gather(&batch_idx);
            let crafted = craft(net, &x, &y, inner_attack)?;
            debug_assert!(crafted
                .x_adv
                .data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| (a - b).abs() <= inner_attack.eps + 1e-12));
            let trace = forward(net, &crafted.x_adv, None)?;
            let bt = backward(net, &trace, &y)?;
            sgd_apply(net, &bt, cfg.lr);
            loss_sum += bt.loss;
            loss_n += 1;
        }
        report.epochs.push(epoch_eval(net, train, test, epoch, loss_sum / loss_n.max(1) as f64)?);
    }

    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
