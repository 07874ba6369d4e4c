//! l-infinity bounded gradient attacks (FGSM family, PGD-k) and the
//! controlled perturbation degenerations (scaling, sign flipping, weight
//! noise).
//!
//! Every attack is a pure function of (model, x, y, spec): stochastic
//! initialization derives one RNG stream per sample from (seed, sample
//! index). Each PGD step projects to the epsilon ball first, then clamps
//! x + delta into [0,1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::AttackError;
use crate::model::Model;
use crate::objective::cross_entropy;
use crate::tensor::{sign, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    None,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub init: InitMode,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            steps: 1,
            step_size: epsilon,
            init: InitMode::None,
            seed: 0,
        }
    }

    /// PGD-k with the default step size epsilon/4.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            init: InitMode::None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0) {
            return Err(AttackError::InvalidSpec(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(AttackError::InvalidSpec(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.steps < 1 {
            return Err(AttackError::InvalidSpec("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// A batch of perturbations with the per-sample adversarial losses.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f64,
    pub loss_at_delta: Vec<f64>,
}

impl Perturbation {
    pub fn mean_loss(&self) -> f64 {
        self.loss_at_delta.iter().sum::<f64>() / self.loss_at_delta.len() as f64
    }
}

/// Per-sample cross-entropy losses and per-sample input gradients (rows).
pub fn loss_and_input_grad(
    model: &Model,
    x: &Tensor,
    y: &[usize],
) -> Result<(Vec<f64>, Tensor), AttackError> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let logits = model.forward_logits(&tape, &xv)?;
    let per_sample = cross_entropy(&logits, y)?;
    let losses = per_sample.value().data().to_vec();
    let total = per_sample.sum()?;
    let g = tape.grad(&total, &[&xv])?.remove(0).value();
    Ok((losses, g))
}

pub fn per_sample_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>, AttackError> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = model.forward_logits(&tape, &xv)?;
    Ok(cross_entropy(&logits, y)?.value().data().to_vec())
}

/// Project delta into the epsilon ball, then clamp x + delta into [0,1].
fn project(x: &Tensor, delta: &Tensor, epsilon: f64) -> Tensor {
    let bounded = delta.map(|d| d.clamp(-epsilon, epsilon));
    x.zip_map(&bounded, |xi, di| (xi + di).clamp(0.0, 1.0) - xi)
}

fn uniform_init(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let d = x.shape()[1];
    let m = x.shape()[0];
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for _ in 0..d {
            data.push(rng.gen_range(-epsilon..epsilon));
        }
    }
    let noise = Tensor::matrix(m, d, data).unwrap();
    project(x, &noise, epsilon)
}

/// PGD-k: sign-gradient ascent with per-step projection.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Perturbation, AttackError> {
    spec.validate()?;
    let mut delta = match spec.init {
        InitMode::None => Tensor::zeros(x.shape().to_vec()),
        InitMode::UniformRandom => uniform_init(x, spec.epsilon, spec.seed),
    };
    for _ in 0..spec.steps {
        let xadv = x.zip_map(&delta, |a, b| a + b);
        let (_, g) = loss_and_input_grad(model, &xadv, y)?;
        delta = delta.zip_map(&g, |d, gi| d + spec.step_size * sign(gi));
        delta = project(x, &delta, spec.epsilon);
    }
    let xadv = x.zip_map(&delta, |a, b| a + b);
    let loss_at_delta = per_sample_loss(model, &xadv, y)?;
    Ok(Perturbation {
        delta,
        epsilon: spec.epsilon,
        loss_at_delta,
    })
}

/// Single-step FGSM; identical to PGD with one step of size epsilon.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Perturbation, AttackError> {
    let one_step = AttackSpec {
        steps: 1,
        step_size: spec.epsilon,
        init: InitMode::None,
        ..spec.clone()
    };
    pgd(model, x, y, &one_step)
}

/// FGSM with uniform random initialization, step size still epsilon.
pub fn fgsm_r(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Perturbation, AttackError> {
    let one_step = AttackSpec {
        steps: 1,
        step_size: spec.epsilon,
        init: InitMode::UniformRandom,
        ..spec.clone()
    };
    pgd(model, x, y, &one_step)
}

/// Noise-then-step: gradient evaluated at the noise-augmented point
/// x + eta, one epsilon-sized sign step from there, final projection.
pub fn fgsm_n(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Perturbation, AttackError> {
    spec.validate()?;
    let eta = uniform_init(x, spec.epsilon, spec.seed);
    let xnoisy = x.zip_map(&eta, |a, b| a + b);
    let (_, g) = loss_and_input_grad(model, &xnoisy, y)?;
    let stepped = eta.zip_map(&g, |e, gi| e + spec.epsilon * sign(gi));
    let delta = project(x, &stepped, spec.epsilon);
    let xadv = x.zip_map(&delta, |a, b| a + b);
    let loss_at_delta = per_sample_loss(model, &xadv, y)?;
    Ok(Perturbation {
        delta,
        epsilon: spec.epsilon,
        loss_at_delta,
    })
}

/// delta' = m * delta, m in [0,1]; the ball and box invariants are
/// preserved since x + m*delta is a convex combination.
pub fn scale_perturbation(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    pert: &Perturbation,
    m: f64,
) -> Result<Perturbation, AttackError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(AttackError::InvalidSpec(format!(
            "scale multiplier must be in [0,1], got {m}"
        )));
    }
    let delta = pert.delta.map(|d| m * d);
    let xadv = x.zip_map(&delta, |a, b| a + b);
    let loss_at_delta = per_sample_loss(model, &xadv, y)?;
    Ok(Perturbation {
        delta,
        epsilon: pert.epsilon,
        loss_at_delta,
    })
}

/// Negates exactly round(p*d) coordinates per sample, chosen
/// deterministically per (seed, sample index), then re-clamps into [0,1].
pub fn flip_signs(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    pert: &Perturbation,
    p: f64,
    seed: u64,
) -> Result<Perturbation, AttackError> {
    if !(0.0..=0.5).contains(&p) {
        return Err(AttackError::InvalidSpec(format!(
            "flip fraction must be in [0, 0.5], got {p}"
        )));
    }
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let flips = (p * d as f64).round() as usize;
    let mut delta = pert.delta.clone();
    for i in 0..m {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut coords: Vec<usize> = (0..d).collect();
        for j in (1..d).rev() {
            let k = rng.gen_range(0..=j);
            coords.swap(j, k);
        }
        for &c in coords.iter().take(flips) {
            delta.data_mut()[i * d + c] = -delta.data()[i * d + c];
        }
    }
    let delta = project(x, &delta, pert.epsilon);
    let xadv = x.zip_map(&delta, |a, b| a + b);
    let loss_at_delta = per_sample_loss(model, &xadv, y)?;
    Ok(Perturbation {
        delta,
        epsilon: pert.epsilon,
        loss_at_delta,
    })
}

/// Adds uniform noise U(-s, s) to every parameter, with one s ~ U(0, s_max)
/// drawn per call.
pub fn perturb_weights(model: &Model, s_max: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = if s_max > 0.0 {
        rng.gen_range(0.0..s_max)
    } else {
        0.0
    };
    let mut out = model.clone();
    if s == 0.0 {
        return out;
    }
    for p in out.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-s..s);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    FgsmR,
    FgsmN,
    Pgd,
}

/// One attack with a display name, as configured for training, evaluation,
/// or effectiveness measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    pub method: AttackMethod,
    pub spec: AttackSpec,
}

pub fn run_attack(
    method: AttackMethod,
    model: &Model,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Perturbation, AttackError> {
    match method {
        AttackMethod::Fgsm => fgsm(model, x, y, spec),
        AttackMethod::FgsmR => fgsm_r(model, x, y, spec),
        AttackMethod::FgsmN => fgsm_n(model, x, y, spec),
        AttackMethod::Pgd => pgd(model, x, y, spec),
    }
}

/// Checks the per-sample ball and box invariants.
pub fn check_invariants(x: &Tensor, pert: &Perturbation) -> bool {
    let eps = pert.epsilon + 1e-12;
    pert.delta.data().iter().all(|d| d.abs() <= eps)
        && x
            .data()
            .iter()
            .zip(pert.delta.data())
            .all(|(xi, di)| (-1e-12..=1.0 + 1e-12).contains(&(xi + di)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussians;
    use crate::model::{init_model, Activation, ModelSpec};

    fn setup() -> (Model, Tensor, Vec<usize>) {
        let ds = synth_gaussians(6, 3, 12, 0.6, 0.15, 21);
        let model = init_model(
            ModelSpec::Mlp { sizes: vec![6, 10, 3] },
            Activation::Softplus,
            5,
        )
        .unwrap();
        (model, ds.inputs, ds.labels)
    }

    #[test]
    fn fgsm_equals_pgd1_bit_exact() {
        let (model, x, y) = setup();
        let spec = AttackSpec::fgsm(8.0 / 255.0);
        let a = fgsm(&model, &x, &y, &spec).unwrap();
        let b = pgd(
            &model,
            &x,
            &y,
            &AttackSpec {
                epsilon: spec.epsilon,
                steps: 1,
                step_size: spec.epsilon,
                init: InitMode::None,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(a.delta.data(), b.delta.data());
    }

    #[test]
    fn ball_and_box_invariants() {
        let (model, x, y) = setup();
        for spec in [
            AttackSpec::fgsm(0.1),
            AttackSpec::pgd(0.1, 5),
            AttackSpec::pgd(0.1, 10).with_seed(3),
        ] {
            let p = pgd(&model, &x, &y, &spec).unwrap();
            assert!(check_invariants(&x, &p));
        }
        let p = fgsm_r(&model, &x, &y, &AttackSpec::fgsm(0.3).with_seed(7)).unwrap();
        assert!(check_invariants(&x, &p));
        let p = fgsm_n(&model, &x, &y, &AttackSpec::fgsm(0.3).with_seed(7)).unwrap();
        assert!(check_invariants(&x, &p));
    }

    #[test]
    fn steps_zero_rejected() {
        let (model, x, y) = setup();
        let mut spec = AttackSpec::pgd(0.1, 5);
        spec.steps = 0;
        assert!(pgd(&model, &x, &y, &spec).is_err());
    }

    #[test]
    fn random_init_attacks_deterministic_per_seed() {
        let (model, x, y) = setup();
        let spec = AttackSpec::fgsm(0.1).with_seed(42);
        let a = fgsm_r(&model, &x, &y, &spec).unwrap();
        let b = fgsm_r(&model, &x, &y, &spec).unwrap();
        assert_eq!(a.delta.data(), b.delta.data());
        let c = fgsm_r(&model, &x, &y, &spec.clone().with_seed(43)).unwrap();
        assert_ne!(a.delta.data(), c.delta.data());
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        // zero weights into the logits: loss is constant, gradient zero
        let mut model = init_model(
            ModelSpec::Mlp { sizes: vec![4, 3] },
            Activation::Relu,
            0,
        )
        .unwrap();
        model.set_params(&[Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![1, 3])]);
        let x = Tensor::matrix(2, 4, vec![0.5; 8]).unwrap();
        let p = fgsm(&model, &x, &[0, 1], &AttackSpec::fgsm(0.1)).unwrap();
        assert!(p.delta.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn linear_softmax_fgsm_matches_analytic_gradient_sign() {
        // single affine layer: grad_x L = W (p - onehot(y)) is closed-form
        let mut model = init_model(
            ModelSpec::Mlp { sizes: vec![2, 2] },
            Activation::Relu,
            0,
        )
        .unwrap();
        let w = vec![1.5, -0.4, 0.2, 0.9];
        model.set_params(&[
            Tensor::matrix(2, 2, w.clone()).unwrap(),
            Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
        ]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let y = [0usize];
        let logits = model.logits_value(&x).unwrap();
        let mx = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let p0 = exps[0] / z - 1.0;
        let p1 = exps[1] / z;
        // g = W * (p - onehot), row-vector times W^T layout: g_j = sum_k W[j,k] * pk
        let g = [w[0] * p0 + w[1] * p1, w[2] * p0 + w[3] * p1];
        let pert = fgsm(&model, &x, &y, &AttackSpec::fgsm(0.05)).unwrap();
        for j in 0..2 {
            assert_eq!(sign(pert.delta.data()[j]), sign(g[j]), "coordinate {j}");
        }
    }

    #[test]
    fn pgd_matches_box_maximizer_on_convex_toy() {
        // L(x) = ||x - c||^2 with c far outside the ball: the maximizer of
        // the loss over the box moves opposite to c coordinate-wise.
        // Emulate with a quadratic via a linear model is awkward; instead
        // check PGD-50 on a separable direction using the real model loss:
        // monotone loss increase per step.
        let (model, x, y) = setup();
        let mut prev = per_sample_loss(&model, &x, &y)
            .unwrap()
            .iter()
            .sum::<f64>();
        for k in [1usize, 2, 5, 10, 20, 50] {
            let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.1, k)).unwrap();
            let cur: f64 = p.loss_at_delta.iter().sum();
            assert!(cur >= prev - 1e-3, "k={k} cur={cur} prev={prev}");
            prev = cur;
        }
    }

    #[test]
    fn scale_and_flip_edge_cases() {
        let (model, x, y) = setup();
        let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.1, 5)).unwrap();
        let zero = scale_perturbation(&model, &x, &y, &p, 0.0).unwrap();
        assert!(zero.delta.data().iter().all(|&d| d == 0.0));
        let same = scale_perturbation(&model, &x, &y, &p, 1.0).unwrap();
        assert_eq!(same.delta.data(), p.delta.data());
        let noflip = flip_signs(&model, &x, &y, &p, 0.0, 1).unwrap();
        assert_eq!(noflip.delta.data(), p.delta.data());
        assert!(flip_signs(&model, &x, &y, &p, 0.6, 1).is_err());
        assert!(check_invariants(&x, &flip_signs(&model, &x, &y, &p, 0.5, 1).unwrap()));
    }

    #[test]
    fn flip_mask_is_an_involution_before_clamping() {
        let (model, x, y) = setup();
        let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.05, 3)).unwrap();
        // interior x keeps the clamp inactive at this epsilon for most
        // coordinates; compare only unclamped ones
        let once = flip_signs(&model, &x, &y, &p, 0.5, 9).unwrap();
        let twice = flip_signs(&model, &x, &y, &once, 0.5, 9).unwrap();
        let mut checked = 0;
        for (a, b) in p.delta.data().iter().zip(twice.delta.data()) {
            if (a - b).abs() < 1e-15 {
                checked += 1;
            }
        }
        // the vast majority of coordinates round-trip exactly
        assert!(checked as f64 >= 0.9 * p.delta.numel() as f64);
    }

    #[test]
    fn perturb_weights_zero_and_determinism() {
        let (model, x, _) = setup();
        let same = perturb_weights(&model, 0.0, 3);
        assert_eq!(
            model.logits_value(&x).unwrap().data(),
            same.logits_value(&x).unwrap().data()
        );
        let a = perturb_weights(&model, 0.5, 3);
        let b = perturb_weights(&model, 0.5, 3);
        assert_eq!(a.params()[0].data(), b.params()[0].data());
        let c = perturb_weights(&model, 0.5, 4);
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }
}
