//! Loss functions and composite training objectives: cross-entropy, the
//! logit-consistency regularizer with its weighting schemes, clean-loss
//! subtraction, and the input-gradient penalty.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::model::Model;
use crate::tensor::{Tape, Tensor, Var};

/// Weighting of per-logit gap terms in the consistency regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    /// Unit weight on the N largest gaps across the whole batch, zero
    /// elsewhere. Ties broken by lower flat index.
    TopN { n: usize },
    /// All weights one: the plain l1-norm of the gaps.
    AllOnes,
    /// Weight equal to the gap itself: the squared l2-norm.
    SelfWeighted,
    /// KL(softmax(clean) || softmax(adv)), batch mean.
    Kl,
    /// Jensen-Shannon divergence of the two softmax distributions, batch mean.
    Js,
}

/// Per-sample cross-entropy, shape [M,1], stabilized by max subtraction.
pub fn cross_entropy(logits: &Var, y: &[usize]) -> Result<Var, TensorError> {
    let tape = logits.tape().clone();
    let lv = logits.value();
    let (m, c) = (lv.shape()[0], lv.shape()[1]);
    debug_assert_eq!(m, y.len());
    // row max as a detached constant; gradient is unaffected
    let mut maxes = Vec::with_capacity(m);
    for i in 0..m {
        maxes.push(
            lv.data()[i * c..(i + 1) * c]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    let max_c = tape.constant(Tensor::matrix(m, 1, maxes)?);
    let z = logits.sub(&max_c.broadcast_cols(c)?)?;
    let lse = z.exp()?.row_sum()?.log()?;
    let mut onehot = Tensor::zeros(vec![m, c]);
    for (i, &yi) in y.iter().enumerate() {
        onehot.data_mut()[i * c + yi] = 1.0;
    }
    let picked = z.mul(&tape.constant(onehot))?.row_sum()?;
    lse.sub(&picked)
}

pub fn mean_cross_entropy(logits: &Var, y: &[usize]) -> Result<Var, TensorError> {
    cross_entropy(logits, y)?.mean()
}

fn log_softmax(logits: &Var) -> Result<Var, TensorError> {
    let tape = logits.tape().clone();
    let lv = logits.value();
    let (m, c) = (lv.shape()[0], lv.shape()[1]);
    let mut maxes = Vec::with_capacity(m);
    for i in 0..m {
        maxes.push(
            lv.data()[i * c..(i + 1) * c]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    let max_c = tape.constant(Tensor::matrix(m, 1, maxes)?);
    let z = logits.sub(&max_c.broadcast_cols(c)?)?;
    let lse = z.exp()?.row_sum()?.log()?;
    z.sub(&lse.broadcast_cols(c)?)
}

/// Logit-consistency regularizer. Sum-based schemes (top-N, all-ones,
/// self-weighted) return the raw weighted sum over the batch; kl/js return
/// the batch mean divergence. The top-N mask is treated as a constant for
/// differentiation.
pub fn advlc(clean_logits: &Var, adv_logits: &Var, scheme: &WeightScheme) -> Result<Var, TensorError> {
    let tape = clean_logits.tape().clone();
    let cs = clean_logits.value();
    let as_ = adv_logits.value();
    if cs.shape() != as_.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "advlc".into(),
            lhs: cs.shape().to_vec(),
            rhs: as_.shape().to_vec(),
        });
    }
    let total = cs.numel();
    match scheme {
        WeightScheme::TopN { n } => {
            if *n < 1 || *n > total {
                return Err(TensorError::ShapeMismatch {
                    op: format!("advlc top-N: N={n} out of range 1..={total}"),
                    lhs: vec![*n],
                    rhs: vec![total],
                });
            }
            let o = adv_logits.sub(clean_logits)?.abs()?;
            let ov = o.value();
            let mut idx: Vec<usize> = (0..total).collect();
            idx.sort_by(|&a, &b| {
                ov.data()[b]
                    .partial_cmp(&ov.data()[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut mask = Tensor::zeros(cs.shape().to_vec());
            for &i in idx.iter().take(*n) {
                mask.data_mut()[i] = 1.0;
            }
            o.mul(&tape.constant(mask))?.sum()
        }
        WeightScheme::AllOnes => adv_logits.sub(clean_logits)?.abs()?.sum(),
        WeightScheme::SelfWeighted => {
            let o = adv_logits.sub(clean_logits)?.abs()?;
            o.mul(&o)?.sum()
        }
        WeightScheme::Kl => {
            let logp = log_softmax(clean_logits)?;
            let logq = log_softmax(adv_logits)?;
            let p = logp.exp()?;
            p.mul(&logp.sub(&logq)?)?.row_sum()?.mean()
        }
        WeightScheme::Js => {
            let logp = log_softmax(clean_logits)?;
            let logq = log_softmax(adv_logits)?;
            let p = logp.exp()?;
            let q = logq.exp()?;
            let mid = p.add(&q)?.scale(0.5)?;
            let logm = mid.log()?;
            let kl_pm = p.mul(&logp.sub(&logm)?)?.row_sum()?;
            let kl_qm = q.mul(&logq.sub(&logm)?)?.row_sum()?;
            kl_pm.add(&kl_qm)?.scale(0.5)?.mean()
        }
    }
}

/// A per-batch objective graph: tracked parameter leaves plus a scalar loss.
pub struct ObjectiveGraph {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub loss: Var,
    /// Value of the regularization term for logging (0 when none).
    pub reg_value: f64,
}

fn param_leaves(tape: &Tape, model: &Model) -> Vec<Var> {
    model.params().iter().map(|p| tape.leaf((*p).clone())).collect()
}

/// mean L(x, y) — standard training.
pub fn standard_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<ObjectiveGraph, TensorError> {
    let tape = Tape::new();
    let params = param_leaves(&tape, model);
    let xv = tape.constant(x.clone());
    let logits = model.forward_with(&tape, &xv, &params)?;
    let loss = mean_cross_entropy(&logits, y)?;
    Ok(ObjectiveGraph {
        tape,
        params,
        loss,
        reg_value: 0.0,
    })
}

/// mean L(x + delta, y) — plain adversarial training.
pub fn at_loss(model: &Model, x: &Tensor, y: &[usize], delta: &Tensor) -> Result<ObjectiveGraph, TensorError> {
    let tape = Tape::new();
    let params = param_leaves(&tape, model);
    let xadv = tape.constant(x.zip_map(delta, |a, b| a + b));
    let logits = model.forward_with(&tape, &xadv, &params)?;
    let loss = mean_cross_entropy(&logits, y)?;
    Ok(ObjectiveGraph {
        tape,
        params,
        loss,
        reg_value: 0.0,
    })
}

/// mean[L(x + delta) - alpha * L(x)].
pub fn at_minus_clean_loss(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    alpha: f64,
) -> Result<ObjectiveGraph, TensorError> {
    let tape = Tape::new();
    let params = param_leaves(&tape, model);
    let xadv = tape.constant(x.zip_map(delta, |a, b| a + b));
    let xc = tape.constant(x.clone());
    let adv = cross_entropy(&model.forward_with(&tape, &xadv, &params)?, y)?;
    let clean = cross_entropy(&model.forward_with(&tape, &xc, &params)?, y)?;
    let loss = adv.sub(&clean.scale(alpha)?)?.mean()?;
    Ok(ObjectiveGraph {
        tape,
        params,
        loss,
        reg_value: 0.0,
    })
}

/// mean[L(x) + beta * ||grad_x L(x)||_2^2], penalty differentiable w.r.t.
/// the parameters via the higher-order tape.
pub fn igr_loss(model: &Model, x: &Tensor, y: &[usize], beta: f64) -> Result<ObjectiveGraph, TensorError> {
    let tape = Tape::new();
    let params = param_leaves(&tape, model);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_with(&tape, &xv, &params)?;
    let per_sample = cross_entropy(&logits, y)?;
    let clean_mean = per_sample.mean()?;
    // grad of summed loss w.r.t. x gives per-sample input gradients as rows
    let total = per_sample.sum()?;
    let g = tape.grad(&total, &[&xv])?.remove(0);
    let m = x.shape()[0] as f64;
    let penalty = g.mul(&g)?.sum()?.scale(1.0 / m)?;
    let loss = clean_mean.add(&penalty.scale(beta)?)?;
    let reg_value = penalty.value().item();
    Ok(ObjectiveGraph {
        tape,
        params,
        loss,
        reg_value,
    })
}

/// Eq-16-style objective: mean L(x + delta) + lambda * L_reg, where the
/// regularizer reuses the two forward passes already built for the batch.
/// Sum-based schemes are divided by the batch size, matching the
/// (sum L_i + lambda * L_reg) / M accumulation.
pub fn advlc_objective(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    lambda: f64,
    scheme: &WeightScheme,
) -> Result<ObjectiveGraph, TensorError> {
    let tape = Tape::new();
    let params = param_leaves(&tape, model);
    let xadv = tape.constant(x.zip_map(delta, |a, b| a + b));
    let xc = tape.constant(x.clone());
    let adv_logits = model.forward_with(&tape, &xadv, &params)?;
    let clean_logits = model.forward_with(&tape, &xc, &params)?;
    let adv_loss = mean_cross_entropy(&adv_logits, y)?;
    let reg = advlc(&clean_logits, &adv_logits, scheme)?;
    let reg = match scheme {
        WeightScheme::TopN { .. } | WeightScheme::AllOnes | WeightScheme::SelfWeighted => {
            reg.scale(1.0 / x.shape()[0] as f64)?
        }
        _ => reg,
    };
    let reg_value = reg.value().item();
    let loss = adv_loss.add(&reg.scale(lambda)?)?;
    Ok(ObjectiveGraph {
        tape,
        params,
        loss,
        reg_value,
    })
}
