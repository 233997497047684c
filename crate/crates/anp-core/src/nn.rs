//! Layered feed-forward networks with explicit forward/backward passes.
//!
//! The backward pass exposes the gradient of the loss with respect to every
//! layer's (post-injection) output. Because injected noise enters additively
//! after the affine/conv transformation, that gradient is exactly the
//! gradient with respect to the noise itself, which is what the noise update
//! consumes. The input carries noise slot 0, so input-gradient attacks and
//! input-noise training fall out of the same machinery.

use crate::error::{AnpError, Result};
use crate::tensor::{conv2d, dims4, maxpool2x2, Rng, Tensor};

/// One layer of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Affine {
        /// `[out, in]`
        weight: Tensor,
        /// `[out]`
        bias: Tensor,
    },
    Conv2D {
        /// `[out_channels, in_channels, k, k]`
        kernels: Tensor,
        /// `[out_channels]`
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    MaxPool2x2,
    Relu,
    Flatten,
}

impl LayerKind {
    /// Affine and conv layers carry a noise register slot; pooling, flatten
    /// and activation layers never do.
    pub fn is_noisy(&self) -> bool {
        matches!(self, LayerKind::Affine { .. } | LayerKind::Conv2D { .. })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            LayerKind::Affine { weight, bias } => vec![weight, bias],
            LayerKind::Conv2D { kernels, bias, .. } => vec![kernels, bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerKind::Affine { weight, bias } => vec![weight, bias],
            LayerKind::Conv2D { kernels, bias, .. } => vec![kernels, bias],
            _ => vec![],
        }
    }

    /// Output shape (batch dimension excluded) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Affine { weight, .. } => {
                let d_in: usize = input.iter().product();
                if input.len() != 1 {
                    return Err(AnpError::domain(format!(
                        "affine layer expects a flat input, got {input:?}"
                    )));
                }
                if weight.shape()[1] != d_in {
                    return Err(AnpError::domain(format!(
                        "affine weight {:?} incompatible with input width {d_in}",
                        weight.shape()
                    )));
                }
                Ok(vec![weight.shape()[0]])
            }
            LayerKind::Conv2D {
                kernels,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 {
                    return Err(AnpError::domain(format!(
                        "conv layer expects CHW input, got {input:?}"
                    )));
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                let k = kernels.shape()[2];
                if kernels.shape()[1] != c {
                    return Err(AnpError::domain(format!(
                        "conv kernels expect {} channels, input has {c}",
                        kernels.shape()[1]
                    )));
                }
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(AnpError::domain("kernel larger than padded input"));
                }
                Ok(vec![
                    kernels.shape()[0],
                    (h + 2 * padding - k) / stride + 1,
                    (w + 2 * padding - k) / stride + 1,
                ])
            }
            LayerKind::MaxPool2x2 => {
                if input.len() != 3 {
                    return Err(AnpError::domain("maxpool expects CHW input"));
                }
                if input[1] < 2 || input[2] < 2 {
                    return Err(AnpError::domain("maxpool input smaller than 2x2"));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Ordered sequence of layers plus the input/output contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerKind>,
    input_shape: Vec<usize>,
    class_count: usize,
}

impl Network {
    pub fn new(layers: Vec<LayerKind>, input_shape: Vec<usize>, class_count: usize) -> Result<Network> {
        let net = Network {
            layers,
            input_shape,
            class_count,
        };
        let shapes = net.layer_output_shapes()?;
        let final_shape = shapes
            .last()
            .ok_or_else(|| AnpError::domain("network needs at least one layer"))?;
        if final_shape.as_slice() != [net.class_count] {
            return Err(AnpError::domain(format!(
                "final layer produces {final_shape:?}, expected [{}]",
                net.class_count
            )));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerKind] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-layer output shapes (batch dimension excluded), validating the
    /// layer chain along the way.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| AnpError::domain(format!("layer {i}: {e}")))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Number of noise slots: the input plus every affine/conv layer.
    pub fn noisy_slot_count(&self) -> usize {
        1 + self.layers.iter().filter(|l| l.is_noisy()).count()
    }

    /// Layer index backing noise slot `s` (`None` for the input slot 0).
    pub fn slot_layer_index(&self, slot: usize) -> Option<usize> {
        if slot == 0 {
            return None;
        }
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_noisy())
            .nth(slot - 1)
            .map(|(i, _)| i)
    }

    /// Shape (batch excluded) of the tensor noise slot `s` is added to.
    pub fn slot_shape(&self, slot: usize) -> Result<Vec<usize>> {
        if slot == 0 {
            return Ok(self.input_shape.clone());
        }
        let idx = self
            .slot_layer_index(slot)
            .ok_or_else(|| AnpError::config(format!("noise slot {slot} out of range")))?;
        Ok(self.layer_output_shapes()?[idx].clone())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    /// Flat copy of every parameter in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for p in l.params() {
                out.extend_from_slice(p.data());
            }
        }
        out
    }
}

/// Per-layer adversarial noise, one slice per example in the mini-batch.
/// Slot 0 shadows the input; slot `s >= 1` shadows the `s`-th affine/conv
/// layer's pre-activation output.
#[derive(Debug, Clone)]
pub struct NoiseRegisters {
    slots: Vec<Tensor>,
}

impl NoiseRegisters {
    /// All-zero registers for a batch of the given size.
    pub fn zeros(net: &Network, batch: usize) -> Result<NoiseRegisters> {
        let mut slots = Vec::with_capacity(net.noisy_slot_count());
        for s in 0..net.noisy_slot_count() {
            let mut shape = vec![batch];
            shape.extend(net.slot_shape(s)?);
            slots.push(Tensor::zeros(shape));
        }
        Ok(NoiseRegisters { slots })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, s: usize) -> &Tensor {
        &self.slots[s]
    }

    pub fn slot_mut(&mut self, s: usize) -> &mut Tensor {
        &mut self.slots[s]
    }

    /// Zero every register (mini-batch start state).
    pub fn reset(&mut self) {
        for t in &mut self.slots {
            t.fill(0.0);
        }
    }
}

/// Everything the forward pass recorded: the (noise-shifted) input actually
/// consumed, each layer's output after noise injection, and pooling argmax
/// memos for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub pool_argmax: Vec<Option<Vec<usize>>>,
    pub loss: Option<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("trace of a validated network")
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardTrace {
    /// dL/d(input), which is also the gradient of input noise slot 0.
    pub input_grad: Tensor,
    /// Per layer: dL/d(layer output after noise injection). For affine/conv
    /// layers this equals the gradient of that layer's noise register.
    pub output_grads: Vec<Tensor>,
    /// Per layer, aligned with [`LayerKind::params`] order; empty for layers
    /// without parameters.
    pub param_grads: Vec<Vec<Tensor>>,
    pub loss: f64,
}

impl BackwardTrace {
    /// Gradient of noise slot `s` (slot 0 = input).
    pub fn noise_grad<'a>(&'a self, net: &Network, slot: usize) -> &'a Tensor {
        match net.slot_layer_index(slot) {
            None => &self.input_grad,
            Some(idx) => &self.output_grads[idx],
        }
    }
}

fn validate_batch_input(net: &Network, x: &Tensor) -> Result<usize> {
    if x.shape().len() != net.input_shape().len() + 1 || x.shape()[1..] != *net.input_shape() {
        return Err(AnpError::domain(format!(
            "input shape {:?} does not match network input {:?} (with batch dim)",
            x.shape(),
            net.input_shape()
        )));
    }
    Ok(x.shape()[0])
}

/// Add a register to a tensor unless the register is identically zero, in
/// which case the tensor is passed through untouched so that an all-zero
/// register is bit-identical to no register at all.
fn inject(value: Tensor, register: Option<&Tensor>) -> Result<Tensor> {
    match register {
        None => Ok(value),
        Some(r) => {
            if r.shape() != value.shape() {
                return Err(AnpError::domain(format!(
                    "noise register shape {:?} does not match pre-activation {:?}",
                    r.shape(),
                    value.shape()
                )));
            }
            if r.is_all_zero() {
                Ok(value)
            } else {
                value.add(r)
            }
        }
    }
}

/// Run the network on a batch, optionally injecting per-layer noise.
pub fn forward(net: &Network, x: &Tensor, registers: Option<&NoiseRegisters>) -> Result<ForwardTrace> {
    validate_batch_input(net, x)?;
    if let Some(regs) = registers {
        if regs.slot_count() != net.noisy_slot_count() {
            return Err(AnpError::domain(format!(
                "register set has {} slots, network has {}",
                regs.slot_count(),
                net.noisy_slot_count()
            )));
        }
    }

    let input = inject(x.clone(), registers.map(|r| r.slot(0)))?;
    let mut outputs = Vec::with_capacity(net.layers().len());
    let mut pool_argmax: Vec<Option<Vec<usize>>> = Vec::with_capacity(net.layers().len());
    let mut slot = 0usize;

    for layer in net.layers() {
        let cur = outputs.last().unwrap_or(&input);
        let mut memo = None;
        let out = match layer {
            LayerKind::Affine { weight, bias } => {
                let z = affine_forward(cur, weight, bias)?;
                slot += 1;
                inject(z, registers.map(|r| r.slot(slot)))?
            }
            LayerKind::Conv2D {
                kernels,
                bias,
                stride,
                padding,
            } => {
                let z = conv2d(cur, kernels, bias, *stride, *padding)?;
                slot += 1;
                inject(z, registers.map(|r| r.slot(slot)))?
            }
            LayerKind::MaxPool2x2 => {
                let (z, arg) = maxpool2x2(cur)?;
                memo = Some(arg);
                z
            }
            LayerKind::Relu => cur.relu(),
            LayerKind::Flatten => {
                let n = cur.batch();
                let w = cur.example_len();
                cur.clone().reshaped(vec![n, w])?
            }
        };
        outputs.push(out);
        pool_argmax.push(memo);
    }

    Ok(ForwardTrace {
        input,
        outputs,
        pool_argmax,
        loss: None,
    })
}

/// Mean softmax cross-entropy of `[batch, classes]` logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(AnpError::domain("logits must be [batch, classes]"));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(AnpError::domain(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AnpError::domain(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / n as f64)
}

/// Backward pass under softmax cross-entropy against `labels`.
pub fn backward(net: &Network, trace: &ForwardTrace, labels: &[usize]) -> Result<BackwardTrace> {
    let logits = trace.logits();
    let loss = cross_entropy_loss(logits, labels)?;
    let n = logits.shape()[0];
    let probs = logits.softmax_rows()?;
    let onehot = Tensor::one_hot(labels, net.class_count())?;
    let dlogits = probs.sub(&onehot)?.scale(1.0 / n as f64);
    let mut bt = backward_from(net, trace, &dlogits)?;
    bt.loss = loss;
    Ok(bt)
}

/// Backward pass from an arbitrary gradient at the logits. Used directly by
/// attacks whose objective is not cross-entropy (e.g. margin losses).
pub fn backward_from(net: &Network, trace: &ForwardTrace, dlogits: &Tensor) -> Result<BackwardTrace> {
    if trace.outputs.len() != net.layers().len() {
        return Err(AnpError::domain("trace does not match network"));
    }
    if dlogits.shape() != trace.logits().shape() {
        return Err(AnpError::domain("dlogits shape mismatch"));
    }

    let layer_count = net.layers().len();
    let mut output_grads: Vec<Option<Tensor>> = vec![None; layer_count];
    let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); layer_count];
    let mut g = dlogits.clone();

    for i in (0..layer_count).rev() {
        output_grads[i] = Some(g.clone());
        let layer_input = if i == 0 {
            &trace.input
        } else {
            &trace.outputs[i - 1]
        };
        g = match &net.layers()[i] {
            LayerKind::Affine { weight, .. } => {
                let (dx, dw, db) = affine_backward(layer_input, weight, &g)?;
                param_grads[i] = vec![dw, db];
                dx
            }
            LayerKind::Conv2D {
                kernels,
                stride,
                padding,
                ..
            } => {
                let (dx, dk, db) = conv2d_backward(layer_input, kernels, *stride, *padding, &g)?;
                param_grads[i] = vec![dk, db];
                dx
            }
            LayerKind::MaxPool2x2 => {
                let arg = trace.pool_argmax[i]
                    .as_ref()
                    .ok_or_else(|| AnpError::domain("missing pool memo in trace"))?;
                let mut dx = Tensor::zeros(layer_input.shape().to_vec());
                for (o, &src) in arg.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                dx
            }
            LayerKind::Relu => {
                // derivative taken as 0 at exactly 0
                let out = &trace.outputs[i];
                g.zip_with(out, |gv, ov| if ov > 0.0 { gv } else { 0.0 })?
            }
            LayerKind::Flatten => g.clone().reshaped(layer_input.shape().to_vec())?,
        };
    }

    Ok(BackwardTrace {
        input_grad: g,
        output_grads: output_grads.into_iter().map(|o| o.unwrap()).collect(),
        param_grads,
        loss: f64::NAN,
    })
}

fn affine_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(AnpError::domain("affine input must be [batch, features]"));
    }
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let (d_out, wk) = (weight.shape()[0], weight.shape()[1]);
    if wk != d_in {
        return Err(AnpError::domain(format!(
            "affine weight {:?} vs input width {d_in}",
            weight.shape()
        )));
    }
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let x_row = &x.data()[i * d_in..(i + 1) * d_in];
        let o_row = &mut out[i * d_out..(i + 1) * d_out];
        for o in 0..d_out {
            let w_row = &weight.data()[o * d_in..(o + 1) * d_in];
            let mut acc = bias.data()[o];
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            o_row[o] = acc;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

fn affine_backward(x: &Tensor, weight: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = weight.shape()[0];
    let mut dx = vec![0.0; n * d_in];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    for i in 0..n {
        let g_row = &g.data()[i * d_out..(i + 1) * d_out];
        let x_row = &x.data()[i * d_in..(i + 1) * d_in];
        let dx_row = &mut dx[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let gv = g_row[o];
            if gv == 0.0 {
                continue;
            }
            db[o] += gv;
            let w_row = &weight.data()[o * d_in..(o + 1) * d_in];
            let dw_row = &mut dw[o * d_in..(o + 1) * d_in];
            for k in 0..d_in {
                dx_row[k] += gv * w_row[k];
                dw_row[k] += gv * x_row[k];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, d_in], dx)?,
        Tensor::new(vec![d_out, d_in], dw)?,
        Tensor::new(vec![d_out], db)?,
    ))
}

fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, ic, h, w] = dims4(input, "conv backward input")?;
    let [oc, _, kh, kw] = dims4(kernels, "conv backward kernels")?;
    let [gn, goc, oh, ow] = dims4(g, "conv backward grad")?;
    if gn != n || goc != oc {
        return Err(AnpError::domain("conv grad shape mismatch"));
    }

    let mut dinput = vec![0.0; n * ic * h * w];
    let mut dkernels = vec![0.0; oc * ic * kh * kw];
    let mut dbias = vec![0.0; oc];

    for b in 0..n {
        for o in 0..oc {
            let g_base = (b * oc + o) * oh * ow;
            for v in &g.data()[g_base..g_base + oh * ow] {
                dbias[o] += v;
            }
            for c in 0..ic {
                let in_base = (b * ic + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let k_idx = ((o * ic + c) * kh + ky) * kw + kx;
                        let wgt = kernels.data()[k_idx];
                        let mut k_acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let g_row = g_base + oy * ow;
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = ow.min(w + padding - kx);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - padding;
                                let span = ox_hi - ox_lo;
                                let g_span = &g.data()[g_row + ox_lo..g_row + ox_hi];
                                let in_span = &input.data()[in_row + ix_lo..in_row + ix_lo + span];
                                let din_span = &mut dinput[in_row + ix_lo..in_row + ix_lo + span];
                                for ((gv, iv), dv) in g_span.iter().zip(in_span).zip(din_span) {
                                    k_acc += gv * iv;
                                    *dv += gv * wgt;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let gv = g.data()[g_row + ox];
                                    k_acc += gv * input.data()[in_row + ix as usize];
                                    dinput[in_row + ix as usize] += gv * wgt;
                                }
                            }
                        }
                        dkernels[k_idx] += k_acc;
                    }
                }
            }
        }
    }

    Ok((
        Tensor::new(vec![n, ic, h, w], dinput)?,
        Tensor::new(vec![oc, ic, kh, kw], dkernels)?,
        Tensor::new(vec![oc], dbias)?,
    ))
}

/// Argmax class per example of `[batch, classes]` logits.
pub fn predict_from_logits(logits: &Tensor) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

/// Predicted classes for a batch, no noise.
pub fn predict(net: &Network, x: &Tensor) -> Result<Vec<usize>> {
    Ok(predict_from_logits(forward(net, x, None)?.logits()))
}

/// Fraction of correctly classified examples.
pub fn accuracy(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = predict(net, x)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn he_affine(d_in: usize, d_out: usize, rng: &mut Rng) -> LayerKind {
    let std = (2.0 / d_in as f64).sqrt();
    LayerKind::Affine {
        weight: Tensor::randn(vec![d_out, d_in], std, rng),
        bias: Tensor::zeros(vec![d_out]),
    }
}

fn he_conv(ic: usize, oc: usize, k: usize, rng: &mut Rng) -> LayerKind {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    LayerKind::Conv2D {
        kernels: Tensor::randn(vec![oc, ic, k, k], std, rng),
        bias: Tensor::zeros(vec![oc]),
        stride: 1,
        padding: 0,
    }
}

/// Small LeNet-style convolutional classifier for 1x28x28 inputs:
/// Conv(8@5x5) -> Relu -> Pool -> Conv(16@5x5) -> Relu -> Pool -> Flatten
/// -> Affine(64) -> Relu -> Affine(10).
pub fn build_lenet_small(rng: &mut Rng) -> Network {
    let layers = vec![
        he_conv(1, 8, 5, rng),
        LayerKind::Relu,
        LayerKind::MaxPool2x2,
        he_conv(8, 16, 5, rng),
        LayerKind::Relu,
        LayerKind::MaxPool2x2,
        LayerKind::Flatten,
        he_affine(16 * 4 * 4, 64, rng),
        LayerKind::Relu,
        he_affine(64, 10, rng),
    ];
    Network::new(layers, vec![1, 28, 28], 10).expect("lenet-small architecture is consistent")
}

/// Fully-connected ReLU stack; `dims` are layer widths from input to output.
pub fn build_mlp(dims: &[usize], rng: &mut Rng) -> Result<Network> {
    if dims.len() < 2 {
        return Err(AnpError::config("mlp needs at least input and output dims"));
    }
    let mut layers = vec![LayerKind::Flatten];
    for i in 0..dims.len() - 1 {
        layers.push(he_affine(dims[i], dims[i + 1], rng));
        if i + 2 < dims.len() {
            layers.push(LayerKind::Relu);
        }
    }
    Network::new(layers, vec![1, 1, dims[0]], *dims.last().unwrap())
}

// ---- checkpoint codec ----
//
// Versioned binary layout: magic "ANPM", u32 format version, architecture
// descriptor (input shape, class count, layer list with shapes), then every
// parameter tensor in declaration order as little-endian f64. Noise
// registers are transient training state and are never serialized.

const CHECKPOINT_MAGIC: &[u8; 4] = b"ANPM";
const CHECKPOINT_VERSION: u32 = 1;

const TAG_AFFINE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.input_shape().len() as u32).to_le_bytes());
    for &d in net.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.class_count() as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            LayerKind::Affine { weight, .. } => {
                out.push(TAG_AFFINE);
                out.extend_from_slice(&(weight.shape()[1] as u32).to_le_bytes());
                out.extend_from_slice(&(weight.shape()[0] as u32).to_le_bytes());
            }
            LayerKind::Conv2D {
                kernels,
                stride,
                padding,
                ..
            } => {
                out.push(TAG_CONV);
                out.extend_from_slice(&(kernels.shape()[1] as u32).to_le_bytes());
                out.extend_from_slice(&(kernels.shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(kernels.shape()[2] as u32).to_le_bytes());
                out.extend_from_slice(&(*stride as u32).to_le_bytes());
                out.extend_from_slice(&(*padding as u32).to_le_bytes());
            }
            LayerKind::MaxPool2x2 => out.push(TAG_MAXPOOL),
            LayerKind::Relu => out.push(TAG_RELU),
            LayerKind::Flatten => out.push(TAG_FLATTEN),
        }
    }
    for layer in net.layers() {
        for p in layer.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AnpError::format(format!(
                "checkpoint truncated reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(AnpError::format("bad checkpoint magic (expected ANPM)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(AnpError::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let rank = r.u32("input rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(AnpError::format(format!("implausible input rank {rank}")));
    }
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32("input dim")? as usize);
    }
    let class_count = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;

    enum Desc {
        Affine { d_in: usize, d_out: usize },
        Conv { ic: usize, oc: usize, k: usize, stride: usize, padding: usize },
        MaxPool,
        Relu,
        Flatten,
    }

    let mut descs = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        descs.push(match tag {
            TAG_AFFINE => Desc::Affine {
                d_in: r.u32("affine in")? as usize,
                d_out: r.u32("affine out")? as usize,
            },
            TAG_CONV => Desc::Conv {
                ic: r.u32("conv in channels")? as usize,
                oc: r.u32("conv out channels")? as usize,
                k: r.u32("conv kernel")? as usize,
                stride: r.u32("conv stride")? as usize,
                padding: r.u32("conv padding")? as usize,
            },
            TAG_MAXPOOL => Desc::MaxPool,
            TAG_RELU => Desc::Relu,
            TAG_FLATTEN => Desc::Flatten,
            other => {
                return Err(AnpError::format(format!(
                    "unknown layer tag {other} at layer {i}"
                )))
            }
        });
    }

    let mut layers = Vec::with_capacity(layer_count);
    for desc in &descs {
        layers.push(match *desc {
            Desc::Affine { d_in, d_out } => LayerKind::Affine {
                weight: Tensor::new(vec![d_out, d_in], r.f64s(d_out * d_in, "affine weight")?)?,
                bias: Tensor::new(vec![d_out], r.f64s(d_out, "affine bias")?)?,
            },
            Desc::Conv {
                ic,
                oc,
                k,
                stride,
                padding,
            } => LayerKind::Conv2D {
                kernels: Tensor::new(vec![oc, ic, k, k], r.f64s(oc * ic * k * k, "conv kernels")?)?,
                bias: Tensor::new(vec![oc], r.f64s(oc, "conv bias")?)?,
                stride,
                padding,
            },
            Desc::MaxPool => LayerKind::MaxPool2x2,
            Desc::Relu => LayerKind::Relu,
            Desc::Flatten => LayerKind::Flatten,
        });
    }

    if r.pos != bytes.len() {
        return Err(AnpError::format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    Network::new(layers, input_shape, class_count)
        .map_err(|e| AnpError::format(format!("checkpoint describes an inconsistent network: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NormOrder;

    // central finite difference of the loss w.r.t. a perturbation added at
    // noise slot `slot`, coordinate `idx`
    fn fd_noise_grad(
        net: &Network,
        x: &Tensor,
        y: &[usize],
        slot: usize,
        idx: usize,
        h: f64,
    ) -> f64 {
        let batch = x.shape()[0];
        let mut plus = NoiseRegisters::zeros(net, batch).unwrap();
        plus.slot_mut(slot).data_mut()[idx] = h;
        let lp = {
            let t = forward(net, x, Some(&plus)).unwrap();
            cross_entropy_loss(t.logits(), y).unwrap()
        };
        let mut minus = NoiseRegisters::zeros(net, batch).unwrap();
        minus.slot_mut(slot).data_mut()[idx] = -h;
        let lm = {
            let t = forward(net, x, Some(&minus)).unwrap();
            cross_entropy_loss(t.logits(), y).unwrap()
        };
        (lp - lm) / (2.0 * h)
    }

    fn random_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| rng.below(classes)).collect()
    }

    #[test]
    fn zero_registers_are_bit_identical_to_none() {
        let mut rng = Rng::seed_from(1);
        let net = build_mlp(&[6, 12, 8, 3], &mut rng).unwrap();
        let x = Tensor::rand_uniform(vec![4, 1, 1, 6], 0.0, 1.0, &mut rng);
        let plain = forward(&net, &x, None).unwrap();
        let regs = NoiseRegisters::zeros(&net, 4).unwrap();
        let noisy = forward(&net, &x, Some(&regs)).unwrap();
        assert_eq!(plain.logits(), noisy.logits());
        for (a, b) in plain.outputs.iter().zip(&noisy.outputs) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn additive_injection_on_one_affine_layer() {
        // identity weights, zero bias, r = [0.5, -0.5], x = [1, 1]
        let net = Network::new(
            vec![
                LayerKind::Flatten,
                LayerKind::Affine {
                    weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
            vec![1, 1, 2],
            2,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let mut regs = NoiseRegisters::zeros(&net, 1).unwrap();
        regs.slot_mut(1).data_mut().copy_from_slice(&[0.5, -0.5]);
        let trace = forward(&net, &x, Some(&regs)).unwrap();
        assert_eq!(trace.logits().data(), &[1.5, 0.5]);
    }

    #[test]
    fn forward_rejects_wrong_register_shape() {
        let mut rng = Rng::seed_from(2);
        let net = build_mlp(&[3, 4, 2], &mut rng).unwrap();
        let x = Tensor::zeros(vec![2, 1, 1, 3]);
        // registers sized for a different batch
        let regs = NoiseRegisters::zeros(&net, 3).unwrap();
        assert!(forward(&net, &x, Some(&regs)).is_err());
    }

    #[test]
    fn forward_matches_hand_spliced_recomposition() {
        // independent oracle: rebuild the forward pass from raw tensor ops,
        // splicing the noise in by hand
        let mut rng = Rng::seed_from(3);
        let net = build_mlp(&[5, 7, 6, 4], &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 1, 1, 5], 1.0, &mut rng);
        let mut regs = NoiseRegisters::zeros(&net, 3).unwrap();
        for s in 0..regs.slot_count() {
            let t = Tensor::randn(regs.slot(s).shape().to_vec(), 0.3, &mut rng);
            *regs.slot_mut(s) = t;
        }
        let trace = forward(&net, &x, Some(&regs)).unwrap();

        // hand recomposition
        let mut cur = x
            .clone()
            .reshaped(vec![3, 5])
            .unwrap()
            .add(&regs.slot(0).clone().reshaped(vec![3, 5]).unwrap())
            .unwrap();
        let mut slot = 1;
        for layer in net.layers() {
            match layer {
                LayerKind::Affine { weight, bias } => {
                    let mut z = Tensor::zeros(vec![3, weight.shape()[0]]);
                    for i in 0..3 {
                        for o in 0..weight.shape()[0] {
                            let mut acc = bias.data()[o];
                            for k in 0..weight.shape()[1] {
                                acc += cur.data()[i * weight.shape()[1] + k]
                                    * weight.data()[o * weight.shape()[1] + k];
                            }
                            z.data_mut()[i * weight.shape()[0] + o] = acc;
                        }
                    }
                    cur = z.add(regs.slot(slot)).unwrap();
                    slot += 1;
                }
                LayerKind::Relu => cur = cur.relu(),
                LayerKind::Flatten => {}
                _ => unreachable!(),
            }
        }
        for (a, b) in trace.logits().data().iter().zip(cur.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![1, 4], vec![0.7, 0.7, 0.7, 0.7]).unwrap();
        let l = cross_entropy_loss(&uniform, &[2]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        let sharp = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let l = cross_entropy_loss(&sharp, &[0]).unwrap();
        let direct = -((10.0f64).exp() / ((10.0f64).exp() + (-10.0f64).exp())).ln();
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 2.06e-9).abs() < 1e-10);

        // permuting classes and labels together leaves the loss unchanged
        let logits = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let l1 = cross_entropy_loss(&logits, &[2, 0]).unwrap();
        let perm = Tensor::new(vec![2, 3], vec![2.0, 0.3, -1.0, 0.3, 0.1, 0.2]).unwrap();
        let l2 = cross_entropy_loss(&perm, &[0, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);

        assert!(cross_entropy_loss(&logits, &[3, 0]).is_err());
    }

    #[test]
    fn single_affine_closed_form_gradient() {
        // dL/dW = (softmax(z) - onehot(y)) x^T for a single example
        let mut rng = Rng::seed_from(4);
        let w = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let net = Network::new(
            vec![
                LayerKind::Flatten,
                LayerKind::Affine {
                    weight: w.clone(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
            vec![1, 1, 3],
            2,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 3], vec![0.2, -0.4, 1.1]).unwrap();
        let y = [1usize];
        let trace = forward(&net, &x, None).unwrap();
        let bt = backward(&net, &trace, &y).unwrap();

        let probs = trace.logits().softmax_rows().unwrap();
        let delta = [probs.data()[0], probs.data()[1] - 1.0];
        for o in 0..2 {
            for k in 0..3 {
                let expect = delta[o] * x.data()[k];
                let got = bt.param_grads[1][0].data()[o * 3 + k];
                assert!((expect - got).abs() < 1e-10, "{expect} vs {got}");
            }
            assert!((bt.param_grads[1][1].data()[o] - delta[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_give_vanishing_param_grads() {
        let net = Network::new(
            vec![
                LayerKind::Flatten,
                LayerKind::Affine {
                    weight: Tensor::new(vec![2, 1], vec![60.0, -60.0]).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
            vec![1, 1, 1],
            2,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let trace = forward(&net, &x, None).unwrap();
        let bt = backward(&net, &trace, &[0]).unwrap();
        assert!(bt.loss < 1e-12);
        for g in bt.param_grads[1][0].data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn noise_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(5);
        for trial in 0..6 {
            let dims: Vec<usize> = match trial % 3 {
                0 => vec![4, 9, 3],
                1 => vec![5, 8, 8, 4],
                _ => vec![3, 16, 11, 6, 2],
            };
            let net = build_mlp(&dims, &mut rng).unwrap();
            let batch = 2;
            let x = Tensor::randn(vec![batch, 1, 1, dims[0]], 1.0, &mut rng);
            let y = random_labels(batch, *dims.last().unwrap(), &mut rng);
            let trace = forward(&net, &x, None).unwrap();
            let bt = backward(&net, &trace, &y).unwrap();

            for slot in 0..net.noisy_slot_count() {
                let g = bt.noise_grad(&net, slot);
                for probe in 0..4.min(g.len()) {
                    let idx = (probe * 37) % g.len();
                    let fd = fd_noise_grad(&net, &x, &y, slot, idx, 1e-5);
                    let an = g.data()[idx];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (an - fd).abs() / denom < 1e-4,
                        "trial {trial} slot {slot} idx {idx}: analytic {an} fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(6);
        let net = Network::new(
            vec![
                he_conv(1, 3, 3, &mut rng),
                LayerKind::Relu,
                LayerKind::MaxPool2x2,
                LayerKind::Flatten,
                he_affine(3 * 3 * 3, 4, &mut rng),
            ],
            vec![1, 8, 8],
            4,
        )
        .unwrap();
        let x = Tensor::rand_uniform(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = vec![1usize, 3];
        let trace = forward(&net, &x, None).unwrap();
        let bt = backward(&net, &trace, &y).unwrap();

        for slot in 0..net.noisy_slot_count() {
            let g = bt.noise_grad(&net, slot);
            for probe in 0..6 {
                let idx = (probe * 17) % g.len();
                let fd = fd_noise_grad(&net, &x, &y, slot, idx, 1e-5);
                let an = g.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "slot {slot} idx {idx}: analytic {an} fd {fd}"
                );
            }
        }

        // parameter gradients against finite differences, a few coordinates
        // per parameter tensor
        for (li, layer) in net.layers().iter().enumerate() {
            for (pi, p) in layer.params().iter().enumerate() {
                for probe in 0..3.min(p.len()) {
                    let idx = (probe * 29) % p.len();
                    let h = 1e-5;
                    let eval = |delta: f64| {
                        let mut pert = net.clone();
                        pert.layers_mut()[li].params_mut()[pi].data_mut()[idx] += delta;
                        let t = forward(&pert, &x, None).unwrap();
                        cross_entropy_loss(t.logits(), &y).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = bt.param_grads[li][pi].data()[idx];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (an - fd).abs() / denom < 1e-4,
                        "layer {li} param {pi} idx {idx}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn relu_is_1_lipschitz() {
        let mut rng = Rng::seed_from(7);
        for _ in 0..100 {
            let u = Tensor::randn(vec![24], 2.0, &mut rng);
            let v = Tensor::randn(vec![24], 2.0, &mut rng);
            let du = u.relu().sub(&v.relu()).unwrap().lp_norm(NormOrder::L2).unwrap();
            let dv = u.sub(&v).unwrap().lp_norm(NormOrder::L2).unwrap();
            assert!(du <= dv + 1e-12);
        }
    }

    #[test]
    fn lenet_small_contracts() {
        let net = build_lenet_small(&mut Rng::seed_from(11));
        let x = Tensor::zeros(vec![1, 1, 28, 28]);
        let trace = forward(&net, &x, None).unwrap();
        assert_eq!(trace.logits().shape(), &[1, 10]);

        let again = build_lenet_small(&mut Rng::seed_from(11));
        assert_eq!(net.flat_params(), again.flat_params());

        // untrained accuracy on balanced data is near chance
        let mut rng = Rng::seed_from(12);
        let n = 500;
        let xs = Tensor::rand_uniform(vec![n, 1, 28, 28], 0.0, 1.0, &mut rng);
        let ys: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let acc = accuracy(&net, &xs, &ys).unwrap();
        assert!((0.05..=0.15).contains(&acc), "untrained accuracy {acc}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = Rng::seed_from(13);
        let net = build_lenet_small(&mut rng);
        let bytes = encode_network(&net);
        let back = decode_network(&bytes).unwrap();
        assert_eq!(net, back);
        assert_eq!(encode_network(&back), bytes);

        // logits on a fixed batch are identical
        let x = Tensor::rand_uniform(vec![2, 1, 28, 28], 0.0, 1.0, &mut rng);
        let a = forward(&net, &x, None).unwrap();
        let b = forward(&back, &x, None).unwrap();
        assert_eq!(a.logits().data(), b.logits().data());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = build_mlp(&[3, 5, 2], &mut Rng::seed_from(14)).unwrap();
        let bytes = encode_network(&net);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_network(&bad_magic), Err(AnpError::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_network(&bad_version), Err(AnpError::Format(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_network(truncated), Err(AnpError::Format(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode_network(&trailing), Err(AnpError::Format(_))));
    }

    #[test]
    fn slot_indexing_covers_input_and_affine_conv_layers() {
        let net = build_lenet_small(&mut Rng::seed_from(15));
        // input + conv1 + conv2 + affine1 + affine2
        assert_eq!(net.noisy_slot_count(), 5);
        assert_eq!(net.slot_layer_index(0), None);
        assert_eq!(net.slot_layer_index(1), Some(0));
        assert_eq!(net.slot_layer_index(2), Some(3));
        assert_eq!(net.slot_layer_index(3), Some(7));
        assert_eq!(net.slot_layer_index(4), Some(9));
        assert_eq!(net.slot_shape(0).unwrap(), vec![1, 28, 28]);
        assert_eq!(net.slot_shape(1).unwrap(), vec![8, 24, 24]);
        assert_eq!(net.slot_shape(4).unwrap(), vec![10]);
    }
}
