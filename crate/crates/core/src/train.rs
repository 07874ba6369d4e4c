//! Outer minimization: SGD with momentum and weight decay, a step-decay
//! learning-rate schedule, scheme dispatch, stochastic weight averaging,
//! and per-epoch metric collection.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, NamedAttack, Perturbation};
use crate::data::Dataset;
use crate::error::TrainError;
use crate::landscape::{landscape_report, MetricOptions};
use crate::model::Model;
use crate::objective::{
    advlc_objective, at_loss, at_minus_clean_loss, igr_loss, standard_loss, ObjectiveGraph,
    WeightScheme,
};
use crate::tensor::{HvpMode, Tensor};

/// Training scheme; every variant maps to exactly one objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Standard,
    At {
        attack: NamedAttack,
    },
    AtMinusClean {
        attack: NamedAttack,
        alpha: f64,
    },
    Igr {
        beta: f64,
    },
    Advlc {
        attack: NamedAttack,
        lambda: f64,
        weights: WeightScheme,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Samples averaged per split for landscape metrics.
    pub subset: usize,
    pub hs_k: usize,
    pub hs_iters: usize,
    pub hs_tol: f64,
    pub hvp_mode: HvpMode,
    /// Compute landscape metrics every `every` epochs (rows in between
    /// carry the excluded marker).
    pub every: usize,
    pub compute_hs: bool,
    pub epsilon: f64,
    pub effectiveness_attacks: Vec<NamedAttack>,
    pub reference_attack: NamedAttack,
}

impl MetricsConfig {
    pub fn desk_default(epsilon: f64) -> Self {
        let opts = MetricOptions::desk_default(epsilon);
        MetricsConfig {
            subset: 200,
            hs_k: 20,
            hs_iters: 200,
            hs_tol: 1e-4,
            hvp_mode: HvpMode::Exact,
            every: 1,
            compute_hs: true,
            epsilon,
            effectiveness_attacks: opts.attacks,
            reference_attack: opts.reference,
        }
    }

    pub fn to_options(&self, seed: u64) -> MetricOptions {
        MetricOptions {
            subset: self.subset,
            hs_k: self.hs_k,
            hs_iters: self.hs_iters,
            hs_tol: self.hs_tol,
            hvp_mode: self.hvp_mode,
            seed,
            epsilon: self.epsilon,
            attacks: self.effectiveness_attacks.clone(),
            reference: self.reference_attack.clone(),
            compute_hs: self.compute_hs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub scheme: Scheme,
    pub epochs: usize,
    /// Stage values; lr_stages.len() == decay_epochs.len() + 1.
    pub lr_stages: Vec<f64>,
    /// Strictly increasing, each < epochs. The named epoch already uses
    /// the post-decay value.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// SWA start epoch; None disables averaging.
    pub swa_start: Option<usize>,
    pub shuffle_seed: u64,
    pub metric_seed: u64,
    pub eval_attack: NamedAttack,
    pub metrics: Option<MetricsConfig>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidPlan("epochs must be >= 1".into()));
        }
        if self.lr_stages.len() != self.decay_epochs.len() + 1 {
            return Err(TrainError::InvalidPlan(format!(
                "need {} lr stages for {} decay epochs, got {}",
                self.decay_epochs.len() + 1,
                self.decay_epochs.len(),
                self.lr_stages.len()
            )));
        }
        let mut prev = None;
        for &e in &self.decay_epochs {
            if e >= self.epochs {
                return Err(TrainError::InvalidPlan(format!(
                    "decay epoch {e} >= total epochs {}",
                    self.epochs
                )));
            }
            if let Some(p) = prev {
                if e <= p {
                    return Err(TrainError::InvalidPlan(
                        "decay epochs must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(e);
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidPlan("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant stage learning rate.
pub fn lr_at(epoch: usize, plan: &TrainPlan) -> f64 {
    let stage = plan.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    plan.lr_stages[stage]
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub buffers: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64, lr: f64) -> Self {
        OptimizerState {
            buffers: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// v <- mu*v + (g + wd*theta); theta <- theta - lr*v.
pub fn sgd_step(
    model: &mut Model,
    grads: &[Tensor],
    state: &mut OptimizerState,
    epoch: usize,
    batch: usize,
) -> Result<(), TrainError> {
    for g in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                epoch,
                batch,
                norm: g.l2_norm(),
            });
        }
    }
    let mut params = model.params_mut();
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        for i in 0..g.numel() {
            let step = g.data()[i] + state.weight_decay * p.data()[i];
            buf.data_mut()[i] = state.momentum * buf.data()[i] + step;
            let v = p.data()[i] - state.lr * buf.data()[i];
            p.data_mut()[i] = v;
        }
        if !p.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                epoch,
                batch,
                norm: f64::INFINITY,
            });
        }
    }
    Ok(())
}

/// Running parameter average from a start epoch onward.
#[derive(Clone, Debug)]
pub struct SwaState {
    pub average: Vec<Tensor>,
    pub count: usize,
    pub start_epoch: usize,
}

impl SwaState {
    pub fn new(start_epoch: usize) -> Self {
        SwaState {
            average: Vec::new(),
            count: 0,
            start_epoch,
        }
    }

    /// avg <- avg + (theta - avg) / (n + 1).
    pub fn update(&mut self, model: &Model) {
        if self.count == 0 {
            self.average = model.params().iter().map(|p| (*p).clone()).collect();
            self.count = 1;
            return;
        }
        let n = self.count as f64;
        for (avg, p) in self.average.iter_mut().zip(model.params()) {
            for i in 0..avg.numel() {
                let v = avg.data()[i] + (p.data()[i] - avg.data()[i]) / (n + 1.0);
                avg.data_mut()[i] = v;
            }
        }
        self.count += 1;
    }

    pub fn averaged_model(&self, template: &Model) -> Model {
        let mut m = template.clone();
        m.set_params(&self.average);
        m
    }
}

#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub mean_objective: f64,
    pub mean_reg: f64,
    pub attack_calls: usize,
    pub batches: usize,
}

fn batch_attack_seed(base: u64, epoch: usize, batch: usize) -> u64 {
    base ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn scheme_attack(
    scheme: &Scheme,
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epoch: usize,
    batch: usize,
) -> Result<Option<Perturbation>, TrainError> {
    let run = |atk: &NamedAttack| -> Result<Perturbation, TrainError> {
        let mut spec = atk.spec.clone();
        spec.seed = batch_attack_seed(spec.seed, epoch, batch);
        run_attack(atk.method, model, x, y, &spec)
            .map_err(|e| TrainError::InvalidPlan(e.to_string()))
    };
    Ok(match scheme {
        Scheme::Standard | Scheme::Igr { .. } => None,
        Scheme::At { attack }
        | Scheme::AtMinusClean { attack, .. }
        | Scheme::Advlc { attack, .. } => Some(run(attack)?),
    })
}

fn scheme_objective(
    scheme: &Scheme,
    model: &Model,
    x: &Tensor,
    y: &[usize],
    pert: Option<&Perturbation>,
) -> Result<ObjectiveGraph, TrainError> {
    Ok(match scheme {
        Scheme::Standard => standard_loss(model, x, y)?,
        Scheme::At { .. } => at_loss(model, x, y, &pert.unwrap().delta)?,
        Scheme::AtMinusClean { alpha, .. } => {
            at_minus_clean_loss(model, x, y, &pert.unwrap().delta, *alpha)?
        }
        Scheme::Igr { beta } => igr_loss(model, x, y, *beta)?,
        Scheme::Advlc {
            lambda, weights, ..
        } => advlc_objective(model, x, y, &pert.unwrap().delta, *lambda, weights)?,
    })
}

/// One pass over the dataset: per batch, scheme attack, scheme objective,
/// one backward, one SGD step.
pub fn train_epoch(
    model: &mut Model,
    dataset: &Dataset,
    plan: &TrainPlan,
    epoch: usize,
    state: &mut OptimizerState,
) -> Result<EpochStats, TrainError> {
    state.lr = lr_at(epoch, plan);
    let mut stats = EpochStats::default();
    for (batch_idx, (x, y)) in dataset
        .batches(plan.batch_size, plan.shuffle_seed, epoch)
        .into_iter()
        .enumerate()
    {
        let pert = scheme_attack(&plan.scheme, model, &x, &y, epoch, batch_idx)?;
        if pert.is_some() {
            stats.attack_calls += 1;
        }
        let graph = scheme_objective(&plan.scheme, model, &x, &y, pert.as_ref())?;
        let grads: Vec<Tensor> = graph
            .tape
            .grad(&graph.loss, &graph.params.iter().collect::<Vec<_>>())
            .map_err(TrainError::Tensor)?
            .into_iter()
            .map(|v| v.value())
            .collect();
        sgd_step(model, &grads, state, epoch, batch_idx)?;
        stats.mean_objective += graph.loss.value().item();
        stats.mean_reg += graph.reg_value;
        stats.batches += 1;
    }
    if stats.batches > 0 {
        stats.mean_objective /= stats.batches as f64;
        stats.mean_reg /= stats.batches as f64;
    }
    Ok(stats)
}

#[derive(Clone, Debug, Default)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

/// Clean and attacked accuracy/loss over a dataset. An epsilon of zero is
/// the degenerate budget: robust equals clean exactly.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    eval_attack: &NamedAttack,
) -> Result<EvalResult, TrainError> {
    let mut res = EvalResult::default();
    let n = dataset.len() as f64;
    for (x, y) in dataset.batches(256, 0, 0) {
        let preds = model.predict(&x).map_err(TrainError::Tensor)?;
        let clean_losses =
            crate::attack::per_sample_loss(model, &x, &y).map_err(to_train)?;
        let (adv_preds, adv_losses) = if eval_attack.spec.epsilon == 0.0 {
            (preds.clone(), clean_losses.clone())
        } else {
            let pert =
                run_attack(eval_attack.method, model, &x, &y, &eval_attack.spec).map_err(to_train)?;
            let xadv = x.zip_map(&pert.delta, |a, b| a + b);
            (
                model.predict(&xadv).map_err(TrainError::Tensor)?,
                pert.loss_at_delta,
            )
        };
        for i in 0..y.len() {
            if preds[i] == y[i] {
                res.clean_acc += 1.0;
            }
            if adv_preds[i] == y[i] {
                res.robust_acc += 1.0;
            }
            res.clean_loss += clean_losses[i];
            res.adv_loss += adv_losses[i];
        }
    }
    res.clean_acc /= n;
    res.robust_acc /= n;
    res.clean_loss /= n;
    res.adv_loss /= n;
    Ok(res)
}

fn to_train(e: crate::error::AttackError) -> TrainError {
    TrainError::InvalidPlan(e.to_string())
}

/// One per-epoch record; NaN fields mean "excluded" downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_clean_loss: f64,
    pub test_clean_loss: f64,
    pub train_adv_loss: f64,
    pub test_adv_loss: f64,
    pub train_clean_acc: f64,
    pub test_clean_acc: f64,
    pub train_robust_acc: f64,
    pub test_robust_acc: f64,
    pub ig_train: f64,
    pub ig_test: f64,
    pub hs_train: f64,
    pub hs_test: f64,
    pub av_train: f64,
    pub av_test: f64,
    pub effectiveness: Vec<(String, f64)>,
    pub grad_align: f64,
    pub reg_loss: f64,
    pub swa_test_clean_acc: f64,
    pub swa_test_robust_acc: f64,
    pub swa_test_clean_loss: f64,
    pub swa_test_adv_loss: f64,
}

/// Mutable training state, the unit saved to and restored from checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: OptimizerState,
    pub swa: Option<SwaState>,
    /// Next epoch to run.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model: Model, plan: &TrainPlan) -> Self {
        let opt = OptimizerState::new(&model, plan.momentum, plan.weight_decay, plan.lr_stages[0]);
        let swa = plan.swa_start.map(SwaState::new);
        TrainState {
            model,
            opt,
            swa,
            epoch: 0,
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_robust_acc: f64,
    pub swa_model: Option<Model>,
    pub rows: Vec<MetricsRow>,
}

/// Runs the remaining epochs of a plan, emitting one MetricsRow per epoch
/// through the sink. Deterministic: identical (plan, state, data) produce
/// identical rows.
pub fn run_experiment(
    plan: &TrainPlan,
    mut state: TrainState,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<(), String>,
) -> Result<RunResult, TrainError> {
    plan.validate()?;
    let mut best: Option<(usize, f64, Model)> = None;
    let mut rows = Vec::new();
    while state.epoch < plan.epochs {
        let epoch = state.epoch;
        let stats = train_epoch(&mut state.model, train, plan, epoch, &mut state.opt)?;

        let train_eval = evaluate(&state.model, train, &plan.eval_attack)?;
        let test_eval = evaluate(&state.model, test, &plan.eval_attack)?;

        let mut row = MetricsRow {
            epoch,
            lr: state.opt.lr,
            train_clean_loss: train_eval.clean_loss,
            test_clean_loss: test_eval.clean_loss,
            train_adv_loss: train_eval.adv_loss,
            test_adv_loss: test_eval.adv_loss,
            train_clean_acc: train_eval.clean_acc,
            test_clean_acc: test_eval.clean_acc,
            train_robust_acc: train_eval.robust_acc,
            test_robust_acc: test_eval.robust_acc,
            ig_train: f64::NAN,
            ig_test: f64::NAN,
            hs_train: f64::NAN,
            hs_test: f64::NAN,
            av_train: f64::NAN,
            av_test: f64::NAN,
            effectiveness: Vec::new(),
            grad_align: f64::NAN,
            reg_loss: stats.mean_reg,
            swa_test_clean_acc: f64::NAN,
            swa_test_robust_acc: f64::NAN,
            swa_test_clean_loss: f64::NAN,
            swa_test_adv_loss: f64::NAN,
        };

        if let Some(mc) = &plan.metrics {
            if mc.every > 0 && (epoch + 1) % mc.every == 0 {
                let opts = mc.to_options(plan.metric_seed);
                let tr = landscape_report(&state.model, train, &opts)?;
                let te = landscape_report(&state.model, test, &opts)?;
                row.ig_train = tr.ig;
                row.ig_test = te.ig;
                row.hs_train = tr.hs;
                row.hs_test = te.hs;
                row.av_train = tr.av;
                row.av_test = te.av;
                row.effectiveness = tr.effectiveness;
                row.grad_align = tr.grad_align;
            }
        }

        if let Some(swa) = state.swa.as_mut() {
            if epoch >= swa.start_epoch {
                swa.update(&state.model);
                let swa_model = swa.averaged_model(&state.model);
                let swa_eval = evaluate(&swa_model, test, &plan.eval_attack)?;
                row.swa_test_clean_acc = swa_eval.clean_acc;
                row.swa_test_robust_acc = swa_eval.robust_acc;
                row.swa_test_clean_loss = swa_eval.clean_loss;
                row.swa_test_adv_loss = swa_eval.adv_loss;
            }
        }

        let is_best = best
            .as_ref()
            .map(|(_, acc, _)| test_eval.robust_acc > *acc)
            .unwrap_or(true);
        if is_best {
            best = Some((epoch, test_eval.robust_acc, state.model.clone()));
        }

        sink(&row).map_err(TrainError::Sink)?;
        rows.push(row);
        state.epoch += 1;
    }
    let (best_epoch, best_robust_acc, best_model) =
        best.unwrap_or((0, 0.0, state.model.clone()));
    let swa_model = state
        .swa
        .as_ref()
        .filter(|s| s.count > 0)
        .map(|s| s.averaged_model(&state.model));
    Ok(RunResult {
        state,
        best_model,
        best_epoch,
        best_robust_acc,
        swa_model,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackMethod, AttackSpec};
    use crate::data::synth_gaussians;
    use crate::model::{init_model, Activation, ModelSpec};

    fn eval_attack(epsilon: f64) -> NamedAttack {
        NamedAttack {
            name: "pgd5".into(),
            method: AttackMethod::Pgd,
            spec: AttackSpec::pgd(epsilon, 5),
        }
    }

    fn plan(scheme: Scheme, epochs: usize) -> TrainPlan {
        TrainPlan {
            scheme,
            epochs,
            lr_stages: vec![0.1],
            decay_epochs: vec![],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 10,
            swa_start: None,
            shuffle_seed: 0,
            metric_seed: 0,
            eval_attack: eval_attack(0.05),
            metrics: None,
        }
    }

    #[test]
    fn lr_schedule_three_stage() {
        let mut p = plan(Scheme::Standard, 200);
        p.lr_stages = vec![0.1, 0.01, 0.001];
        p.decay_epochs = vec![100, 150];
        assert_eq!(lr_at(0, &p), 0.1);
        assert_eq!(lr_at(99, &p), 0.1);
        assert_eq!(lr_at(100, &p), 0.01);
        assert_eq!(lr_at(120, &p), 0.01);
        assert_eq!(lr_at(150, &p), 0.001);
        assert_eq!(lr_at(160, &p), 0.001);
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(Scheme::Standard, 10);
        p.lr_stages = vec![0.1, 0.01];
        p.decay_epochs = vec![12];
        assert!(p.validate().is_err());
        p.decay_epochs = vec![5];
        assert!(p.validate().is_ok());
        p.decay_epochs = vec![5, 5];
        p.lr_stages = vec![0.1, 0.01, 0.001];
        assert!(p.validate().is_err());
    }

    #[test]
    fn sgd_plain_step_and_momentum_recursion() {
        let mut m = init_model(
            ModelSpec::Mlp { sizes: vec![2, 2] },
            Activation::Relu,
            0,
        )
        .unwrap();
        m.set_params(&[Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![1, 2])]);
        let g = vec![Tensor::ones(vec![2, 2]), Tensor::zeros(vec![1, 2])];
        // mu=0, wd=0: plain gradient step
        let mut st = OptimizerState::new(&m, 0.0, 0.0, 0.1);
        let mut m1 = m.clone();
        sgd_step(&mut m1, &g, &mut st, 0, 0).unwrap();
        assert!((m1.params()[0].data()[0] + 0.1).abs() < 1e-12);
        // mu=0.9, constant gradient, two steps: displacement lr*g*(1 + 1.9)
        let mut st = OptimizerState::new(&m, 0.9, 0.0, 0.1);
        let mut m2 = m.clone();
        sgd_step(&mut m2, &g, &mut st, 0, 0).unwrap();
        sgd_step(&mut m2, &g, &mut st, 0, 1).unwrap();
        assert!((m2.params()[0].data()[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_params_under_zero_gradient() {
        let mut m = init_model(
            ModelSpec::Mlp { sizes: vec![2, 2] },
            Activation::Relu,
            3,
        )
        .unwrap();
        let norm_before: f64 = m.params().iter().map(|p| p.l2_norm()).sum();
        let g: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let mut st = OptimizerState::new(&m, 0.0, 0.1, 0.1);
        sgd_step(&mut m, &g, &mut st, 0, 0).unwrap();
        let norm_after: f64 = m.params().iter().map(|p| p.l2_norm()).sum();
        assert!(norm_after < norm_before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = init_model(
            ModelSpec::Mlp { sizes: vec![2, 2] },
            Activation::Relu,
            0,
        )
        .unwrap();
        let mut g = vec![Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![1, 2])];
        g[0].data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(&m, 0.9, 0.0, 0.1);
        assert!(matches!(
            sgd_step(&mut m, &g, &mut st, 3, 7),
            Err(TrainError::NonFiniteGradient { epoch: 3, batch: 7, .. })
        ));
    }

    #[test]
    fn swa_identities() {
        let m = init_model(
            ModelSpec::Mlp { sizes: vec![3, 2] },
            Activation::Relu,
            1,
        )
        .unwrap();
        let mut swa = SwaState::new(0);
        swa.update(&m);
        assert_eq!(swa.averaged_model(&m).params()[0].data(), m.params()[0].data());
        swa.update(&m);
        assert_eq!(swa.averaged_model(&m).params()[0].data(), m.params()[0].data());
        // average of theta and -theta is zero
        let mut neg = m.clone();
        {
            let mut ps = neg.params_mut();
            for p in ps.iter_mut() {
                **p = p.map(|v| -v);
            }
        }
        let mut swa2 = SwaState::new(0);
        swa2.update(&m);
        swa2.update(&neg);
        for p in swa2.averaged_model(&m).params() {
            assert!(p.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn standard_scheme_never_attacks_and_loss_decreases() {
        let ds = synth_gaussians(6, 2, 60, 0.8, 0.08, 7);
        let mut model = init_model(
            ModelSpec::Mlp { sizes: vec![6, 12, 2] },
            Activation::Softplus,
            2,
        )
        .unwrap();
        let p = plan(Scheme::Standard, 1);
        let mut st = OptimizerState::new(&model, p.momentum, p.weight_decay, 0.1);
        let first = train_epoch(&mut model, &ds, &p, 0, &mut st).unwrap();
        assert_eq!(first.attack_calls, 0);
        let mut last = first.mean_objective;
        for e in 1..12 {
            last = train_epoch(&mut model, &ds, &p, e, &mut st).unwrap().mean_objective;
        }
        assert!(last < first.mean_objective, "{last} vs {}", first.mean_objective);
    }

    #[test]
    fn untrained_model_near_chance_level() {
        let ds = synth_gaussians(8, 10, 1200, 0.6, 0.15, 5);
        let model = init_model(
            ModelSpec::Mlp { sizes: vec![8, 16, 10] },
            Activation::Relu,
            31,
        )
        .unwrap();
        let ev = evaluate(&model, &ds, &eval_attack(0.0)).unwrap();
        assert!((ev.clean_acc - 0.1).abs() < 0.07, "{}", ev.clean_acc);
    }

    #[test]
    fn zero_epsilon_eval_robust_equals_clean() {
        let ds = synth_gaussians(4, 3, 30, 0.6, 0.1, 2);
        let model = init_model(
            ModelSpec::Mlp { sizes: vec![4, 8, 3] },
            Activation::Relu,
            1,
        )
        .unwrap();
        let ev = evaluate(&model, &ds, &eval_attack(0.0)).unwrap();
        assert_eq!(ev.clean_acc, ev.robust_acc);
        assert_eq!(ev.clean_loss, ev.adv_loss);
    }

    #[test]
    fn robust_acc_not_above_clean_on_trained_model() {
        let ds = synth_gaussians(6, 2, 80, 0.8, 0.08, 9);
        let model = {
            let m = init_model(
                ModelSpec::Mlp { sizes: vec![6, 12, 2] },
                Activation::Softplus,
                4,
            )
            .unwrap();
            let p = plan(Scheme::Standard, 15);
            let state = TrainState::fresh(m, &p);
            run_experiment(&p, state, &ds, &ds, &mut |_| Ok(()))
                .unwrap()
                .state
                .model
        };
        let ev = evaluate(&model, &ds, &eval_attack(0.1)).unwrap();
        assert!(ev.robust_acc <= ev.clean_acc + 1e-12);
    }

    #[test]
    fn identical_runs_produce_identical_rows() {
        let train = synth_gaussians(4, 2, 40, 0.7, 0.1, 11);
        let test = synth_gaussians(4, 2, 20, 0.7, 0.1, 12);
        let p = plan(
            Scheme::At {
                attack: NamedAttack {
                    name: "fgsm_r".into(),
                    method: AttackMethod::FgsmR,
                    spec: AttackSpec::fgsm(0.05),
                },
            },
            3,
        );
        let run = || {
            let m = init_model(
                ModelSpec::Mlp { sizes: vec![4, 8, 2] },
                Activation::Relu,
                6,
            )
            .unwrap();
            run_experiment(&p, TrainState::fresh(m, &p), &train, &test, &mut |_| Ok(()))
                .unwrap()
                .rows
        };
        // Debug formatting so NaN placeholders compare equal too.
        assert_eq!(format!("{:?}", run()), format!("{:?}", run()));
    }
}
