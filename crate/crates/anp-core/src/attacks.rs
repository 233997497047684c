//! White-box adversarial example crafting against a frozen network, plus
//! the black-box transfer harness with worst-case accounting.
//!
//! All l-inf methods guarantee `||x_adv - x||_inf <= eps` and outputs in
//! `[0, 1]`. Crafting never mutates the model.

use crate::error::{AnpError, Result};
use crate::nn::{accuracy, backward, backward_from, forward, predict_from_logits, Network};
use crate::tensor::{lp_norm_slice, NormOrder, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    StepLl,
    MiFgsm,
    CwL2,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::StepLl => "stepll",
            AttackMethod::MiFgsm => "mifgsm",
            AttackMethod::CwL2 => "cw",
        }
    }
}

/// Declarative description of a crafting procedure.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub method: AttackMethod,
    /// l-inf budget; for CW-l2 an l2 acceptance cap (infinite = uncapped).
    pub eps: f64,
    pub steps: usize,
    /// Per-step size for iterative l-inf methods.
    pub alpha: f64,
    /// Momentum decay (MI-FGSM only).
    pub mu: f64,
    /// Margin confidence (CW only).
    pub confidence: f64,
    /// Binary-search steps on the CW trade-off constant.
    pub search_steps: usize,
    /// Seed for the PGD random start.
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(eps: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Fgsm,
            eps,
            steps: 1,
            alpha: eps,
            mu: 0.0,
            confidence: 0.0,
            search_steps: 0,
            seed: 0,
        }
    }

    pub fn bim(eps: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Bim,
            steps: 10,
            alpha: eps / 10.0,
            ..AttackSpec::fgsm(eps)
        }
    }

    pub fn pgd(eps: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Pgd,
            steps: 10,
            alpha: eps / 4.0,
            ..AttackSpec::fgsm(eps)
        }
    }

    pub fn step_ll(eps: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::StepLl,
            ..AttackSpec::fgsm(eps)
        }
    }

    pub fn mi_fgsm(eps: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::MiFgsm,
            steps: 10,
            alpha: eps / 10.0,
            mu: 1.0,
            ..AttackSpec::fgsm(eps)
        }
    }

    pub fn cw_l2() -> AttackSpec {
        AttackSpec {
            method: AttackMethod::CwL2,
            eps: f64::INFINITY,
            steps: 100,
            alpha: 0.05,
            mu: 0.0,
            confidence: 0.0,
            search_steps: 5,
            seed: 0,
        }
    }

    /// Parse `method:key=value,...` strings, e.g.
    /// `pgd:eps=0.0313,steps=10,alpha=0.0078`.
    pub fn parse(s: &str) -> Result<AttackSpec> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), r.trim()),
            None => (s.trim(), ""),
        };
        let mut spec = match name {
            "fgsm" => AttackSpec::fgsm(0.1),
            "bim" => AttackSpec::bim(0.1),
            "pgd" => AttackSpec::pgd(0.1),
            "stepll" | "step-ll" => AttackSpec::step_ll(0.1),
            "mifgsm" | "mi-fgsm" => AttackSpec::mi_fgsm(0.1),
            "cw" | "cwl2" | "cw-l2" => AttackSpec::cw_l2(),
            other => return Err(AnpError::config(format!("unknown attack method {other:?}"))),
        };
        let mut alpha_given = false;
        for pair in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                AnpError::config(format!("attack spec item {pair:?} is not key=value"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let parse_f = || {
                v.parse::<f64>()
                    .map_err(|_| AnpError::config(format!("attack spec {k}={v:?} is not a number")))
            };
            let parse_u = || {
                v.parse::<usize>()
                    .map_err(|_| AnpError::config(format!("attack spec {k}={v:?} is not an integer")))
            };
            match k {
                "eps" => spec.eps = parse_f()?,
                "steps" => spec.steps = parse_u()?,
                "alpha" => {
                    spec.alpha = parse_f()?;
                    alpha_given = true;
                }
                "mu" => spec.mu = parse_f()?,
                "confidence" => spec.confidence = parse_f()?,
                "search_steps" => spec.search_steps = parse_u()?,
                "seed" => {
                    spec.seed = v.parse::<u64>().map_err(|_| {
                        AnpError::config(format!("attack spec seed={v:?} is not an integer"))
                    })?
                }
                other => {
                    return Err(AnpError::config(format!("unknown attack spec key {other:?}")))
                }
            }
        }
        // re-derive the step size when only eps/steps were overridden
        if !alpha_given {
            spec.alpha = match spec.method {
                AttackMethod::Fgsm | AttackMethod::StepLl => spec.eps,
                AttackMethod::Pgd => spec.eps / 4.0,
                AttackMethod::Bim => spec.eps / 10.0,
                AttackMethod::MiFgsm => spec.eps / spec.steps.max(1) as f64,
                AttackMethod::CwL2 => spec.alpha,
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(AnpError::config("attack eps must be >= 0"));
        }
        if self.steps < 1 {
            return Err(AnpError::config("attack steps must be >= 1"));
        }
        if self.method == AttackMethod::Pgd
            && self.eps > 0.0
            && (self.alpha * self.steps as f64) < self.eps
        {
            return Err(AnpError::config(
                "pgd needs alpha * steps >= eps to cover the ball",
            ));
        }
        Ok(())
    }
}

impl std::fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:eps={},steps={},alpha={}",
            self.method.name(),
            self.eps,
            self.steps,
            self.alpha
        )
    }
}

/// Crafted batch with per-example outcome accounting.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    /// True where the model's prediction differs from the label.
    pub success_mask: Vec<bool>,
    /// Per-example distortion: l-inf for l-inf methods, l2 for CW.
    pub distortion: Vec<f64>,
}

impl AdversarialBatch {
    pub fn success_rate(&self) -> f64 {
        let s = self.success_mask.iter().filter(|&&b| b).count();
        s as f64 / self.success_mask.len().max(1) as f64
    }
}

fn input_gradient(net: &Network, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let trace = forward(net, x, None)?;
    let bt = backward(net, &trace, y)?;
    if !bt.input_grad.all_finite() {
        return Err(AnpError::Numeric("non-finite input gradient".into()));
    }
    Ok(bt.input_grad)
}

fn sign(t: &Tensor) -> Tensor {
    t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn finish(net: &Network, x: &Tensor, x_adv: Tensor, y: &[usize], p: NormOrder) -> Result<AdversarialBatch> {
    let preds = predict_from_logits(forward(net, &x_adv, None)?.logits());
    let success_mask: Vec<bool> = preds.iter().zip(y).map(|(p, y)| p != y).collect();
    let n = x.batch();
    let distortion = (0..n)
        .map(|i| {
            let d: Vec<f64> = x_adv
                .example(i)
                .iter()
                .zip(x.example(i))
                .map(|(a, b)| a - b)
                .collect();
            lp_norm_slice(&d, p)
        })
        .collect();
    Ok(AdversarialBatch {
        x_adv,
        success_mask,
        distortion,
    })
}

/// Craft adversarial examples for a batch `x` (in `[0,1]`) with labels `y`.
pub fn craft(net: &Network, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdversarialBatch> {
    spec.validate()?;
    if y.len() != x.batch() {
        return Err(AnpError::domain("label count != batch size"));
    }
    if spec.eps == 0.0 {
        // every method degenerates to the identity at zero budget
        return finish(net, x, x.clone(), y, NormOrder::LInf);
    }
    match spec.method {
        AttackMethod::Fgsm => {
            let g = input_gradient(net, x, y)?;
            let x_adv = x
                .add(&sign(&g).scale(spec.eps))?
                .clip_to_linf_ball(x, spec.eps, 0.0, 1.0)?;
            finish(net, x, x_adv, y, NormOrder::LInf)
        }
        AttackMethod::StepLl => {
            let logits = forward(net, x, None)?.logits().clone();
            let (n, c) = (logits.shape()[0], logits.shape()[1]);
            let least_likely: Vec<usize> = (0..n)
                .map(|i| {
                    let row = &logits.data()[i * c..(i + 1) * c];
                    row.iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap()
                })
                .collect();
            // descend the loss toward the least-likely class
            let g = input_gradient(net, x, &least_likely)?;
            let x_adv = x
                .sub(&sign(&g).scale(spec.eps))?
                .clip_to_linf_ball(x, spec.eps, 0.0, 1.0)?;
            finish(net, x, x_adv, y, NormOrder::LInf)
        }
        AttackMethod::Bim | AttackMethod::Pgd => {
            let mut cur = if spec.method == AttackMethod::Pgd {
                let mut rng = Rng::derive(spec.seed, 0x7064);
                let noise = Tensor::rand_uniform(x.shape().to_vec(), -spec.eps, spec.eps, &mut rng);
                x.add(&noise)?.clip_to_linf_ball(x, spec.eps, 0.0, 1.0)?
            } else {
                x.clone()
            };
            for _ in 0..spec.steps {
                let g = input_gradient(net, &cur, y)?;
                cur = cur
                    .add(&sign(&g).scale(spec.alpha))?
                    .clip_to_linf_ball(x, spec.eps, 0.0, 1.0)?;
            }
            finish(net, x, cur, y, NormOrder::LInf)
        }
        AttackMethod::MiFgsm => {
            let mut cur = x.clone();
            let mut velocity = Tensor::zeros(x.shape().to_vec());
            let n = x.batch();
            for _ in 0..spec.steps {
                let g = input_gradient(net, &cur, y)?;
                // per-example l1 normalization of the gradient
                let mut gn = g.clone();
                for i in 0..n {
                    let range = gn.example_range(i);
                    let norm = lp_norm_slice(&gn.data()[range.clone()], NormOrder::L1);
                    if norm > crate::tensor::TAU_ZERO {
                        for v in &mut gn.data_mut()[range] {
                            *v /= norm;
                        }
                    }
                }
                velocity = velocity.scale(spec.mu).add(&gn)?;
                cur = cur
                    .add(&sign(&velocity).scale(spec.alpha))?
                    .clip_to_linf_ball(x, spec.eps, 0.0, 1.0)?;
            }
            finish(net, x, cur, y, NormOrder::LInf)
        }
        AttackMethod::CwL2 => {
            let n = x.batch();
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let xi = x.example_tensor(i);
                let (adv, _audit) = cw_attack_single(net, &xi, y[i], spec)?;
                parts.push(adv);
            }
            let x_adv = Tensor::stack_examples(&parts)?;
            finish(net, x, x_adv, y, NormOrder::L2)
        }
    }
}

/// CW-l2 on a single example. Returns the crafted input and the audit trail
/// of accepted candidate distortions across the binary search; the returned
/// example always realizes the minimum of that trail.
fn cw_attack_single(net: &Network, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<(Tensor, Vec<f64>)> {
    let dim = x.len();
    let classes = net.class_count();
    let to_w = |v: f64| {
        let t = (2.0 * v - 1.0).clamp(-0.999_999, 0.999_999);
        0.5 * ((1.0 + t) / (1.0 - t)).ln() // atanh
    };
    let w0: Vec<f64> = x.data().iter().map(|&v| to_w(v)).collect();

    let mut c = 1e-2;
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut best: Option<(f64, Tensor)> = None;
    let mut audit = Vec::new();

    for _ in 0..spec.search_steps.max(1) {
        let mut w = w0.clone();
        let mut round_succeeded = false;
        for _ in 0..spec.steps {
            let x_adv_data: Vec<f64> = w.iter().map(|&wi| 0.5 * (wi.tanh() + 1.0)).collect();
            let x_adv = Tensor::new(x.shape().to_vec(), x_adv_data)?;
            let trace = forward(net, &x_adv, None)?;
            let row = trace.logits().data();
            let mut best_other = usize::MAX;
            let mut best_other_v = f64::NEG_INFINITY;
            for j in 0..classes {
                if j != y && row[j] > best_other_v {
                    best_other_v = row[j];
                    best_other = j;
                }
            }
            let margin = row[y] - best_other_v;

            let delta: Vec<f64> = x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
            let l2 = lp_norm_slice(&delta, NormOrder::L2);
            if margin < -spec.confidence && l2 <= spec.eps {
                round_succeeded = true;
                audit.push(l2);
                if best.as_ref().map_or(true, |(b, _)| l2 < *b) {
                    best = Some((l2, x_adv.clone()));
                }
            }

            // d(||delta||^2 + c * f)/dw through the tanh parameterization
            let mut dlogits = Tensor::zeros(vec![1, classes]);
            if margin > -spec.confidence {
                dlogits.data_mut()[y] = c;
                dlogits.data_mut()[best_other] = -c;
            }
            let bt = backward_from(net, &trace, &dlogits)?;
            if !bt.input_grad.all_finite() {
                return Err(AnpError::Numeric("non-finite CW gradient".into()));
            }
            for i in 0..dim {
                let dxdw = 0.5 * (1.0 - w[i].tanh().powi(2));
                let grad = (2.0 * delta[i] + bt.input_grad.data()[i]) * dxdw;
                w[i] -= spec.alpha * grad;
            }
        }

        if round_succeeded {
            hi = hi.min(c);
            c = 0.5 * (lo + hi);
        } else {
            lo = c;
            c = if hi.is_finite() { 0.5 * (lo + hi) } else { c * 10.0 };
        }
    }

    match best {
        Some((_, adv)) => Ok((adv, audit)),
        None => Ok((x.clone(), audit)), // best effort: failure shows in success_mask
    }
}

/// Black-box worst case: craft on each hold-out model, evaluate the target
/// on each crafted set, return the minimum accuracy.
pub fn worst_case_accuracy(
    target: &Network,
    holdouts: &[&Network],
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<f64> {
    if holdouts.is_empty() {
        return Err(AnpError::config("worst-case evaluation needs >= 1 holdout"));
    }
    let mut worst = f64::INFINITY;
    for h in holdouts {
        let batch = craft(h, x, y, spec)?;
        let acc = accuracy(target, &batch.x_adv, y)?;
        worst = worst.min(acc);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, LayerKind};
    use crate::tensor::Rng;

    fn linear_pm_model() -> Network {
        // logits = [w.x, -w.x] with w = [1, -1]
        Network::new(
            vec![
                LayerKind::Flatten,
                LayerKind::Affine {
                    weight: Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
            vec![1, 1, 2],
            2,
        )
        .unwrap()
    }

    fn param_hash(net: &Network) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in net.flat_params() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    #[test]
    fn eps_zero_returns_input_bit_exact() {
        let mut rng = Rng::seed_from(1);
        let net = build_mlp(&[4, 8, 3], &mut rng).unwrap();
        let x = Tensor::rand_uniform(vec![3, 1, 1, 4], 0.0, 1.0, &mut rng);
        let y = vec![0, 1, 2];
        for spec in [
            AttackSpec::fgsm(0.0),
            AttackSpec::bim(0.0),
            AttackSpec::pgd(0.0),
            AttackSpec::step_ll(0.0),
            AttackSpec::mi_fgsm(0.0),
            AttackSpec {
                eps: 0.0,
                ..AttackSpec::cw_l2()
            },
        ] {
            let out = craft(&net, &x, &y, &spec).unwrap();
            assert_eq!(out.x_adv.data(), x.data(), "{:?}", spec.method);
        }
    }

    #[test]
    fn fgsm_closed_form_on_linear_model() {
        let net = linear_pm_model();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let out = craft(&net, &x, &[0], &AttackSpec::fgsm(0.1)).unwrap();
        assert!((out.x_adv.data()[0] - 0.4).abs() < 1e-12);
        assert!((out.x_adv.data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn linf_ball_containment_and_range() {
        let mut rng = Rng::seed_from(2);
        let net = build_mlp(&[6, 10, 4], &mut rng).unwrap();
        let x = Tensor::rand_uniform(vec![8, 1, 1, 6], 0.0, 1.0, &mut rng);
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let eps = 0.23;
        for spec in [
            AttackSpec::fgsm(eps),
            AttackSpec::bim(eps),
            AttackSpec::pgd(eps),
            AttackSpec::step_ll(eps),
            AttackSpec::mi_fgsm(eps),
        ] {
            let out = craft(&net, &x, &y, &spec).unwrap();
            for (a, b) in out.x_adv.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= eps + 1e-12, "{:?}", spec.method);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn fgsm_success_monotone_in_eps_on_linear_model() {
        let mut rng = Rng::seed_from(3);
        let lin = linear_pm_model();
        let xs = Tensor::rand_uniform(vec![60, 1, 1, 2], 0.0, 1.0, &mut rng);
        let ys = crate::nn::predict(&lin, &xs).unwrap();
        let mut prev = -1.0;
        for eps in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let rate = craft(&lin, &xs, &ys, &AttackSpec::fgsm(eps))
                .unwrap()
                .success_rate();
            assert!(rate >= prev - 1e-12, "eps {eps}: {rate} < {prev}");
            prev = rate;
        }
    }

    #[test]
    fn crafting_leaves_model_untouched() {
        let mut rng = Rng::seed_from(4);
        let net = build_mlp(&[3, 9, 3], &mut rng).unwrap();
        let before = param_hash(&net);
        let x = Tensor::rand_uniform(vec![5, 1, 1, 3], 0.0, 1.0, &mut rng);
        let y = vec![0, 1, 2, 0, 1];
        for spec in [AttackSpec::pgd(0.2), AttackSpec::cw_l2()] {
            let _ = craft(&net, &x, &y, &spec).unwrap();
        }
        assert_eq!(param_hash(&net), before);
    }

    #[test]
    fn worst_case_properties() {
        let mut rng = Rng::seed_from(5);
        let net = build_mlp(&[4, 10, 3], &mut rng).unwrap();
        let h1 = build_mlp(&[4, 8, 3], &mut rng).unwrap();
        let h2 = build_mlp(&[4, 12, 3], &mut rng).unwrap();
        let x = Tensor::rand_uniform(vec![30, 1, 1, 4], 0.0, 1.0, &mut rng);
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let spec = AttackSpec::fgsm(0.15);

        // degenerate black-box: single holdout == target equals white-box
        let wb = {
            let b = craft(&net, &x, &y, &spec).unwrap();
            accuracy(&net, &b.x_adv, &y).unwrap()
        };
        let wc = worst_case_accuracy(&net, &[&net], &x, &y, &spec).unwrap();
        assert!((wb - wc).abs() < 1e-12);

        // eps = 0 equals clean accuracy
        let clean = accuracy(&net, &x, &y).unwrap();
        let wc0 = worst_case_accuracy(&net, &[&h1], &x, &y, &AttackSpec::fgsm(0.0)).unwrap();
        assert!((clean - wc0).abs() < 1e-12);

        // min property over two holdouts
        let a1 = worst_case_accuracy(&net, &[&h1], &x, &y, &spec).unwrap();
        let a2 = worst_case_accuracy(&net, &[&h2], &x, &y, &spec).unwrap();
        let both = worst_case_accuracy(&net, &[&h1, &h2], &x, &y, &spec).unwrap();
        assert!(both <= a1 + 1e-12 && both <= a2 + 1e-12);

        assert!(worst_case_accuracy(&net, &[], &x, &y, &spec).is_err());
    }

    #[test]
    fn spec_parsing() {
        let s = AttackSpec::parse("pgd:eps=0.0313,steps=10,alpha=0.0078").unwrap();
        assert_eq!(s.method, AttackMethod::Pgd);
        assert!((s.eps - 0.0313).abs() < 1e-12);
        assert_eq!(s.steps, 10);
        assert!((s.alpha - 0.0078).abs() < 1e-12);

        let s = AttackSpec::parse("fgsm:eps=0.2").unwrap();
        assert!((s.alpha - 0.2).abs() < 1e-12);

        assert!(AttackSpec::parse("warp:eps=1").is_err());
        assert!(AttackSpec::parse("pgd:eps=nope").is_err());
        assert!(AttackSpec::parse("pgd:eps=0.3,steps=2,alpha=0.01").is_err());
    }

    #[test]
    fn cw_finds_small_perturbations_near_the_boundary() {
        let net = linear_pm_model();
        // point near the decision boundary w.x = 0
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.52, 0.48]).unwrap();
        let y = crate::nn::predict(&net, &x).unwrap();
        let out = craft(&net, &x, &y, &AttackSpec::cw_l2()).unwrap();
        assert!(out.success_mask[0], "CW should cross a nearby boundary");
        // analytic distance to the boundary is |x0-x1|/sqrt(2) ~ 0.028
        assert!(out.distortion[0] < 0.2, "distortion {}", out.distortion[0]);
        for v in out.x_adv.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn cw_audit_trail_returns_minimum() {
        let net = linear_pm_model();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.6, 0.4]).unwrap();
        let y = crate::nn::predict(&net, &x).unwrap()[0];
        let (adv, audit) = cw_attack_single(&net, &x, y, &AttackSpec::cw_l2()).unwrap();
        assert!(!audit.is_empty());
        let min_audit = audit.iter().cloned().fold(f64::INFINITY, f64::min);
        let delta: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let l2 = lp_norm_slice(&delta, NormOrder::L2);
        assert!((l2 - min_audit).abs() < 1e-12);
    }
}
