//! Input-loss-landscape diagnostics: input gradient norm, adversarial
//! variance and its second-order bound, attack effectiveness, Hessian
//! spectrum via deflated power iteration, gradient alignment, Taylor
//! residuals, and the small-d brute-force oracles for the bound theory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{loss_and_input_grad, per_sample_loss, run_attack, NamedAttack, Perturbation};
use crate::data::Split;
use crate::error::MetricError;
use crate::model::Model;
use crate::objective::cross_entropy;
use crate::tensor::{sign, HvpMode, Tape, Tensor, Var};

/// Dense Hessians are only assembled for inputs this small.
pub const DENSE_HESSIAN_LIMIT: usize = 64;

/// Mean landscape metrics over one sample subset.
#[derive(Clone, Debug)]
pub struct LandscapeReport {
    pub ig: f64,
    pub hs: f64,
    pub av: f64,
    pub effectiveness: Vec<(String, f64)>,
    pub grad_align: f64,
    pub sample_count: usize,
    pub split: Split,
}

/// Per-sample l1 norm of the input gradient of the loss.
pub fn input_grad_norm(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>, MetricError> {
    let (_, g) = loss_and_input_grad(model, x, y).map_err(attack_to_metric)?;
    let d = x.shape()[1];
    Ok((0..x.shape()[0])
        .map(|i| g.data()[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum())
        .collect())
}

/// L(x + delta) - L(x) per sample.
pub fn adversarial_variance(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
) -> Result<Vec<f64>, MetricError> {
    let clean = per_sample_loss(model, x, y).map_err(attack_to_metric)?;
    let xadv = x.zip_map(delta, |a, b| a + b);
    let adv = per_sample_loss(model, &xadv, y).map_err(attack_to_metric)?;
    Ok(adv.iter().zip(&clean).map(|(a, c)| a - c).collect())
}

fn attack_to_metric(e: crate::error::AttackError) -> MetricError {
    match e {
        crate::error::AttackError::Tensor(t) => MetricError::Tensor(t),
        crate::error::AttackError::InvalidSpec(s) => {
            MetricError::Tensor(crate::error::TensorError::ShapeMismatch {
                op: s,
                lhs: vec![],
                rhs: vec![],
            })
        }
    }
}

/// Per-sample loss graph for one input row; x is a tracked [1, d] leaf.
fn sample_loss_graph(
    model: &Model,
    x_row: &Tensor,
    y: usize,
) -> Result<(Tape, Var, Var), MetricError> {
    let tape = Tape::new();
    let d = x_row.numel();
    let xv = tape.leaf(x_row.reshaped(vec![1, d])?);
    let logits = model.forward_logits(&tape, &xv)?;
    let loss = cross_entropy(&logits, &[y])?.sum()?;
    Ok((tape, xv, loss))
}

/// Dense input Hessian of the per-sample loss, assembled column-wise via
/// Hessian-vector products on basis vectors.
pub fn dense_input_hessian(
    model: &Model,
    x_row: &Tensor,
    y: usize,
    mode: HvpMode,
) -> Result<Tensor, MetricError> {
    let d = x_row.numel();
    if d > DENSE_HESSIAN_LIMIT {
        return Err(MetricError::DimensionTooLarge {
            d,
            limit: DENSE_HESSIAN_LIMIT,
        });
    }
    let (tape, xv, loss) = sample_loss_graph(model, x_row, y)?;
    let base = tape.len();
    let mut h = Tensor::zeros(vec![d, d]);
    for j in 0..d {
        let mut e = Tensor::zeros(vec![1, d]);
        e.data_mut()[j] = 1.0;
        let col = tape.hvp(&loss, &xv, &e, mode)?;
        for i in 0..d {
            h.data_mut()[i * d + j] = col.data()[i];
        }
        tape.truncate(base);
    }
    // enforce exact symmetry against round-off
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (h.data()[i * d + j] + h.data()[j * d + i]);
            h.data_mut()[i * d + j] = avg;
            h.data_mut()[j * d + i] = avg;
        }
    }
    Ok(h)
}

/// Second-order bound from explicit gradient and Hessian:
/// eps * sum|g| + eps^2/2 * sum|H|.
pub fn av_upper_bound_from(g: &[f64], h: &Tensor, epsilon: f64) -> f64 {
    epsilon * g.iter().map(|v| v.abs()).sum::<f64>()
        + 0.5 * epsilon * epsilon * h.data().iter().map(|v| v.abs()).sum::<f64>()
}

/// Per-sample second-order upper bound on adversarial variance.
pub fn av_upper_bound_2nd(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    mode: HvpMode,
) -> Result<Vec<f64>, MetricError> {
    let d = x.shape()[1];
    if d > DENSE_HESSIAN_LIMIT {
        return Err(MetricError::DimensionTooLarge {
            d,
            limit: DENSE_HESSIAN_LIMIT,
        });
    }
    let (_, g) = loss_and_input_grad(model, x, y).map_err(attack_to_metric)?;
    let mut out = Vec::with_capacity(x.shape()[0]);
    for i in 0..x.shape()[0] {
        let h = dense_input_hessian(model, &x.row(i), y[i], mode)?;
        out.push(av_upper_bound_from(&g.data()[i * d..(i + 1) * d], &h, epsilon));
    }
    Ok(out)
}

/// Effectiveness of an assessed perturbation against a reference
/// perturbation (Some per sample; None where the reference gain is below
/// tolerance).
pub fn effectiveness(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    assessed: &Perturbation,
    reference: &Perturbation,
) -> Result<Vec<Option<f64>>, MetricError> {
    let clean = per_sample_loss(model, x, y).map_err(attack_to_metric)?;
    let mut out = Vec::with_capacity(clean.len());
    let mut excluded = 0usize;
    for i in 0..clean.len() {
        let denom = reference.loss_at_delta[i] - clean[i];
        if denom < 1e-6 {
            excluded += 1;
            out.push(None);
        } else {
            out.push(Some((assessed.loss_at_delta[i] - clean[i]) / denom));
        }
    }
    if excluded == clean.len() {
        return Err(MetricError::AllSamplesExcluded);
    }
    Ok(out)
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// AV divided by the second-order theoretical bound; None where the bound
/// is zero. Small-d smooth models only.
pub fn theoretical_effectiveness(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    epsilon: f64,
    mode: HvpMode,
) -> Result<Vec<Option<f64>>, MetricError> {
    let av = adversarial_variance(model, x, y, delta)?;
    let bound = av_upper_bound_2nd(model, x, y, epsilon, mode)?;
    Ok(av
        .iter()
        .zip(&bound)
        .map(|(a, b)| if *b < 1e-12 { None } else { Some(a / b) })
        .collect())
}

/// Signed eigenvalue estimates from deflated power iteration.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Non-increasing |lambda| order.
    pub eigenvalues: Vec<f64>,
    pub converged: Vec<bool>,
    /// l1 norm of the eigenvalue list.
    pub hs: f64,
}

/// Top-k input-Hessian eigenvalues of the per-sample loss via power
/// iteration with explicit rank-one deflation. Non-converged entries are
/// still emitted, flagged in `converged`.
pub fn hessian_spectrum(
    model: &Model,
    x_row: &Tensor,
    y: usize,
    k: usize,
    iters: usize,
    tol: f64,
    mode: HvpMode,
    seed: u64,
) -> Result<Spectrum, MetricError> {
    let d = x_row.numel();
    let k = k.min(d);
    let (tape, xv, loss) = sample_loss_graph(model, x_row, y)?;
    let base = tape.len();
    let hv = |v: &Tensor| -> Result<Tensor, MetricError> {
        let out = tape.hvp(&loss, &xv, v, mode)?;
        tape.truncate(base);
        Ok(out)
    };

    let mut pairs: Vec<(f64, Tensor)> = Vec::new();
    let mut eigenvalues = Vec::with_capacity(k);
    let mut converged = Vec::with_capacity(k);
    for ki in 0..k {
        // deterministic unit start vector per (seed, eigen index)
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ki as u64 + 1) * 0x9E37_79B9));
        let mut v = Tensor::matrix(1, d, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let n = v.l2_norm();
        v = v.map(|x| x / n);

        let mut lam = 0.0f64;
        let mut ok = false;
        for _ in 0..iters {
            let mut w = hv(&v)?;
            for (l, u) in &pairs {
                let c = l * u.dot(&v);
                w = w.zip_map(u, |wi, ui| wi - c * ui);
            }
            let new_lam = v.dot(&w);
            let norm = w.l2_norm();
            if norm < 1e-14 {
                lam = 0.0;
                ok = true;
                v = Tensor::zeros(vec![1, d]);
                break;
            }
            v = w.map(|x| x / norm);
            if (new_lam.abs() - lam.abs()).abs() < tol * lam.abs().max(1.0) && new_lam.abs() > 0.0 {
                lam = new_lam;
                ok = true;
                break;
            }
            lam = new_lam;
        }
        // final Rayleigh quotient for the signed estimate
        if v.l2_norm() > 0.0 {
            let mut w = hv(&v)?;
            for (l, u) in &pairs {
                let c = l * u.dot(&v);
                w = w.zip_map(u, |wi, ui| wi - c * ui);
            }
            lam = v.dot(&w);
        }
        eigenvalues.push(lam);
        converged.push(ok);
        pairs.push((lam, v));
    }
    // report in non-increasing |lambda| order
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].abs().partial_cmp(&eigenvalues[a].abs()).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
    let converged: Vec<bool> = order.iter().map(|&i| converged[i]).collect();
    let hs = eigenvalues.iter().map(|v| v.abs()).sum();
    Ok(Spectrum {
        eigenvalues,
        converged,
        hs,
    })
}

/// Cosine similarity between the input gradient at x and at a random
/// in-ball neighbor; None when either gradient vanishes.
pub fn gradient_alignment(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<Option<f64>>, MetricError> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mut noise = Vec::with_capacity(m * d);
    for i in 0..m {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for _ in 0..d {
            noise.push(rng.gen_range(-epsilon..epsilon));
        }
    }
    let neighbor = x.zip_map(&Tensor::matrix(m, d, noise)?, |a, b| a + b);
    let (_, g0) = loss_and_input_grad(model, x, y).map_err(attack_to_metric)?;
    let (_, g1) = loss_and_input_grad(model, &neighbor, y).map_err(attack_to_metric)?;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let a = &g0.data()[i * d..(i + 1) * d];
        let b = &g1.data()[i * d..(i + 1) * d];
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            out.push(None);
        } else {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            out.push(Some((dot / (na * nb)).clamp(-1.0, 1.0)));
        }
    }
    Ok(out)
}

/// |L(x+delta) - L(x) - g.delta - 1/2 delta.H.delta| with a dense Hessian.
pub fn taylor_residual(
    model: &Model,
    x_row: &Tensor,
    y: usize,
    delta_row: &Tensor,
) -> Result<f64, MetricError> {
    let d = x_row.numel();
    let x2 = x_row.reshaped(vec![1, d])?;
    let dl = delta_row.reshaped(vec![1, d])?;
    let clean = per_sample_loss(model, &x2, &[y]).map_err(attack_to_metric)?[0];
    let xadv = x2.zip_map(&dl, |a, b| a + b);
    let adv = per_sample_loss(model, &xadv, &[y]).map_err(attack_to_metric)?[0];
    let (_, g) = loss_and_input_grad(model, &x2, &[y]).map_err(attack_to_metric)?;
    let h = dense_input_hessian(model, &x2, y, HvpMode::Exact)?;
    let lin: f64 = g.data().iter().zip(dl.data()).map(|(a, b)| a * b).sum();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += h.data()[i * d + j] * dl.data()[i] * dl.data()[j];
        }
    }
    Ok((adv - clean - lin - 0.5 * quad).abs())
}

/// Grid maximization of g.delta + 1/2 delta.H.delta over the box
/// [-eps, eps]^d. Exact on the grid; d <= 4.
pub fn max_av_bruteforce(
    g: &[f64],
    h: &Tensor,
    epsilon: f64,
    grid_points: usize,
) -> Result<(f64, Vec<f64>), MetricError> {
    let d = g.len();
    if d > 4 {
        return Err(MetricError::DimensionTooLarge { d, limit: 4 });
    }
    assert!(grid_points >= 3);
    let axis: Vec<f64> = (0..grid_points)
        .map(|i| -epsilon + 2.0 * epsilon * i as f64 / (grid_points - 1) as f64)
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut best_delta = vec![0.0; d];
    let total = grid_points.pow(d as u32);
    let mut delta = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for item in delta.iter_mut() {
            *item = axis[rem % grid_points];
            rem /= grid_points;
        }
        let mut av: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        for i in 0..d {
            for j in 0..d {
                av += 0.5 * h.data()[i * d + j] * delta[i] * delta[j];
            }
        }
        if av > best {
            best = av;
            best_delta.copy_from_slice(&delta);
        }
    }
    Ok((best, best_delta))
}

/// True iff no sign vector aligns with all nonzero first- and second-order
/// gradients simultaneously. Enumerates 2^d sign vectors; d <= 12.
pub fn gradient_conflict_exists(g: &[f64], h: &Tensor) -> Result<bool, MetricError> {
    let d = g.len();
    if d > 12 {
        return Err(MetricError::DimensionTooLarge { d, limit: 12 });
    }
    for bits in 0..(1u32 << d) {
        let s: Vec<f64> = (0..d)
            .map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let mut ok = true;
        for i in 0..d {
            if g[i] != 0.0 && sign(g[i]) != s[i] {
                ok = false;
                break;
            }
        }
        if ok {
            'outer: for i in 0..d {
                for j in 0..d {
                    let hij = h.data()[i * d + j];
                    if hij != 0.0 && sign(hij) != s[i] * s[j] {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        if ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Options for subset metric reports.
#[derive(Clone, Debug)]
pub struct MetricOptions {
    pub subset: usize,
    pub hs_k: usize,
    pub hs_iters: usize,
    pub hs_tol: f64,
    pub hvp_mode: HvpMode,
    pub seed: u64,
    pub epsilon: f64,
    /// Attacks whose PGD50-relative effectiveness is reported.
    pub attacks: Vec<NamedAttack>,
    pub reference: NamedAttack,
    /// Skip the Hessian spectrum (it dominates runtime at large d).
    pub compute_hs: bool,
}

impl MetricOptions {
    pub fn desk_default(epsilon: f64) -> Self {
        use crate::attack::{AttackMethod, AttackSpec};
        MetricOptions {
            subset: 200,
            hs_k: 20,
            hs_iters: 200,
            hs_tol: 1e-4,
            hvp_mode: HvpMode::Exact,
            seed: 0,
            epsilon,
            attacks: vec![
                NamedAttack {
                    name: "fgsm".into(),
                    method: AttackMethod::Fgsm,
                    spec: AttackSpec::fgsm(epsilon),
                },
                NamedAttack {
                    name: "pgd10".into(),
                    method: AttackMethod::Pgd,
                    spec: AttackSpec::pgd(epsilon, 10),
                },
            ],
            reference: NamedAttack {
                name: "pgd50".into(),
                method: AttackMethod::Pgd,
                spec: AttackSpec::pgd(epsilon, 50),
            },
            compute_hs: true,
        }
    }
}

/// Mean IG, HS, AV, per-attack effectiveness, and gradient alignment over
/// the first `subset` samples of a fixed shuffled order. Fixed summation
/// order, deterministic per (model, dataset, seed).
pub fn landscape_report(
    model: &Model,
    data: &crate::data::Dataset,
    opts: &MetricOptions,
) -> Result<LandscapeReport, MetricError> {
    let sub = data.metric_subset(opts.subset, opts.seed);
    let (x, y) = (&sub.inputs, &sub.labels);
    let n = sub.len();

    let ig_vals = input_grad_norm(model, x, y)?;
    let ig = ig_vals.iter().sum::<f64>() / n as f64;

    let reference = run_attack(opts.reference.method, model, x, y, &opts.reference.spec)
        .map_err(attack_to_metric)?;
    let av_vals = adversarial_variance(model, x, y, &reference.delta)?;
    let av = av_vals.iter().sum::<f64>() / n as f64;

    let mut eff = Vec::new();
    for atk in &opts.attacks {
        let pert =
            run_attack(atk.method, model, x, y, &atk.spec).map_err(attack_to_metric)?;
        let e = effectiveness(model, x, y, &pert, &reference)?;
        eff.push((atk.name.clone(), mean_defined(&e).unwrap_or(f64::NAN)));
    }

    let ga_vals = gradient_alignment(model, x, y, opts.epsilon, opts.seed)?;
    let grad_align = mean_defined(&ga_vals).unwrap_or(f64::NAN);

    let hs = if opts.compute_hs {
        let mut acc = 0.0;
        for i in 0..n {
            let s = hessian_spectrum(
                model,
                &x.row(i),
                y[i],
                opts.hs_k,
                opts.hs_iters,
                opts.hs_tol,
                opts.hvp_mode,
                opts.seed.wrapping_add(i as u64),
            )?;
            acc += s.hs;
        }
        acc / n as f64
    } else {
        f64::NAN
    };

    Ok(LandscapeReport {
        ig,
        hs,
        av,
        effectiveness: eff,
        grad_align,
        sample_count: n,
        split: sub.split,
    })
}
