//! The four subcommands. Each one reads a JSON config, validates before
//! any compute, and overwrites its outputs deterministically.

use std::path::{Path, PathBuf};

use advlab_core::attack::{
    flip_signs, per_sample_loss, perturb_weights, run_attack, scale_perturbation, AttackMethod,
    AttackSpec, Perturbation,
};
use advlab_core::data::{Dataset, Split};
use advlab_core::landscape::{effectiveness, hessian_spectrum, landscape_report, MetricOptions};
use advlab_core::train::{run_experiment, TrainState};
use advlab_core::{init_model, HvpMode, Model, NamedAttack};

use crate::checkpoint::{
    digest, load_checkpoint, save_checkpoint, save_model_checkpoint, Seeds,
};
use crate::config::{read_json, AttackConfig, ExperimentConfig, ProbeConfig};
use crate::csv;
use crate::error::{io_err, CliError};
use crate::plot::{emit_plot_data, Figure};

fn resolve_out(flag: Option<&Path>, cfg: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.cloned())
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --out or set out_dir in the config".into())
        })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

pub fn cmd_train(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json(config_path)?;
    if let Some(s) = seed {
        config.override_seed(s);
    }
    config.validate()?;
    let out_dir = resolve_out(out, config.out_dir.as_ref())?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err("cannot create", &out_dir, e))?;

    // The resolved copy pins the effective seeds and output directory so a
    // rerun needs nothing beyond this one file.
    config.out_dir = Some(out_dir.clone());
    let resolved = serde_json::to_string_pretty(&config)
        .map_err(|e| CliError::Io(e.to_string()))?
        + "\n";
    let config_digest = digest(&resolved);
    write_file(&out_dir.join("resolved-config.json"), &resolved)?;

    let (train, test) = config.dataset.load()?;
    if train.dim() != config.model.input_dim() {
        return Err(CliError::Config(format!(
            "model expects {} inputs but dataset has dimension {}",
            config.model.input_dim(),
            train.dim()
        )));
    }

    let seeds = Seeds {
        init_seed: config.init_seed,
        shuffle_seed: config.plan.shuffle_seed,
        metric_seed: config.plan.metric_seed,
    };
    let state = match resume {
        Some(ckpt) => {
            let (state, meta) = load_checkpoint(ckpt, Some(&config_digest))?;
            if &meta.model != &config.model {
                return Err(CliError::Config(
                    "checkpoint model spec does not match config".into(),
                ));
            }
            state
        }
        None => {
            let model = init_model(config.model.clone(), config.activation, config.init_seed)?;
            TrainState::fresh(model, &config.plan)
        }
    };

    let eff_names: Vec<String> = config
        .plan
        .metrics
        .as_ref()
        .map(|m| m.effectiveness_attacks.iter().map(|a| a.name.clone()).collect())
        .unwrap_or_default();
    let mut metrics_text = csv::metrics_header(&eff_names);
    metrics_text.push('\n');

    let result = run_experiment(&config.plan, state, &train, &test, &mut |row| {
        metrics_text.push_str(&csv::metrics_line(row, &eff_names));
        metrics_text.push('\n');
        Ok(())
    })?;

    write_file(&out_dir.join("metrics.csv"), &metrics_text)?;
    save_model_checkpoint(
        &out_dir.join("best.ckpt"),
        &result.best_model,
        result.best_epoch,
        config.activation,
        &config_digest,
        &seeds,
    )?;
    save_checkpoint(
        &out_dir.join("final.ckpt"),
        &result.state,
        config.activation,
        &config_digest,
        &seeds,
        true,
    )?;
    if let Some(swa_model) = &result.swa_model {
        save_model_checkpoint(
            &out_dir.join("swa.ckpt"),
            swa_model,
            result.state.epoch,
            config.activation,
            &config_digest,
            &seeds,
        )?;
    }
    Ok(())
}

fn default_reference(epsilon: f64) -> NamedAttack {
    NamedAttack {
        name: "pgd50".into(),
        method: AttackMethod::Pgd,
        spec: AttackSpec::pgd(epsilon, 50),
    }
}

fn load_probe_data(
    dataset: &crate::config::DatasetConfig,
    split: Split,
) -> Result<Dataset, CliError> {
    let (train, test) = dataset.load()?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

pub fn cmd_attack(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config: AttackConfig = read_json(config_path)?;
    if let Some(s) = seed {
        config.attack.spec.seed = s;
    }
    let out_dir = resolve_out(out, None)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err("cannot create", &out_dir, e))?;

    let (state, _meta) = load_checkpoint(&config.checkpoint, None)?;
    let model = state.model;
    let mut data = load_probe_data(&config.dataset, config.split)?;
    if let Some(n) = config.subset {
        data = data.metric_subset(n, config.subset_seed);
    }
    if data.dim() != model.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint model expects {} inputs but dataset has dimension {}",
            model.input_dim(),
            data.dim()
        )));
    }

    let x = &data.inputs;
    let y = &data.labels;
    let clean_losses = per_sample_loss(&model, x, y)?;
    let clean_preds = model.predict(x)?;
    let eps = config.attack.spec.epsilon;

    let (adv_losses, adv_preds, eff): (Vec<f64>, Vec<usize>, Vec<Option<f64>>) = if eps == 0.0 {
        (
            clean_losses.clone(),
            clean_preds.clone(),
            vec![None; y.len()],
        )
    } else {
        config.attack.spec.validate()?;
        let pert = run_attack(config.attack.method, &model, x, y, &config.attack.spec)?;
        let xadv = x.zip_map(&pert.delta, |a, b| a + b);
        let reference = config
            .reference
            .clone()
            .unwrap_or_else(|| default_reference(eps));
        let ref_pert = run_attack(reference.method, &model, x, y, &reference.spec)?;
        let eff = effectiveness(&model, x, y, &pert, &ref_pert)?;
        (pert.loss_at_delta, model.predict(&xadv)?, eff)
    };

    let mut text = String::from("index,clean_loss,adv_loss,av,effectiveness,fooled\n");
    for i in 0..y.len() {
        let av = adv_losses[i] - clean_losses[i];
        let fooled = (clean_preds[i] == y[i] && adv_preds[i] != y[i]) as u8;
        text.push_str(&format!(
            "{i},{},{},{},{},{fooled}\n",
            csv::fmt(clean_losses[i]),
            csv::fmt(adv_losses[i]),
            csv::fmt(if eps == 0.0 { 0.0 } else { av }),
            csv::fmt(eff[i].unwrap_or(f64::NAN)),
        ));
    }
    write_file(&out_dir.join("attack.csv"), &text)
}

/// Probe sub-modes selected by CLI flags; none selected means the plain
/// landscape report.
#[derive(Clone, Debug, Default)]
pub struct ProbeOptions {
    pub pgd_sweep: Option<Vec<usize>>,
    pub sample_sweep: Option<Vec<usize>>,
    pub softplus_twin: bool,
    /// "scale:M" | "flip:P" | "weight-noise:S"
    pub degenerate: Option<String>,
}

impl ProbeOptions {
    fn any(&self) -> bool {
        self.pgd_sweep.is_some()
            || self.sample_sweep.is_some()
            || self.softplus_twin
            || self.degenerate.is_some()
    }
}

fn metric_options(cfg: &ProbeConfig, seed: u64) -> MetricOptions {
    let mut opts = MetricOptions::desk_default(cfg.epsilon);
    opts.subset = cfg.subset;
    opts.hs_k = cfg.hs_k;
    opts.hs_iters = cfg.hs_iters;
    opts.hs_tol = cfg.hs_tol;
    opts.seed = seed;
    if let Some(hs) = cfg.compute_hs {
        opts.compute_hs = hs;
    }
    opts
}

fn mean_hs(
    model: &Model,
    data: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let s = hessian_spectrum(
            model,
            &data.inputs.row(i),
            data.labels[i],
            cfg.hs_k,
            cfg.hs_iters,
            cfg.hs_tol,
            HvpMode::Exact,
            seed.wrapping_add(i as u64),
        )?;
        out.push(s.hs);
    }
    Ok(out)
}

fn parse_degenerate(spec: &str) -> Result<(&str, f64), CliError> {
    let (mode, value) = spec.split_once(':').ok_or_else(|| {
        CliError::Config(format!(
            "degenerate spec '{spec}' must look like scale:M, flip:P or weight-noise:S"
        ))
    })?;
    let value: f64 = value
        .parse()
        .map_err(|_| CliError::Config(format!("degenerate spec '{spec}': bad number")))?;
    if !matches!(mode, "scale" | "flip" | "weight-noise") {
        return Err(CliError::Config(format!(
            "degenerate mode '{mode}' must be scale, flip or weight-noise"
        )));
    }
    Ok((mode, value))
}

pub fn cmd_probe(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    probe: &ProbeOptions,
) -> Result<(), CliError> {
    let config: ProbeConfig = read_json(config_path)?;
    if config.epsilon < 0.0 || !config.epsilon.is_finite() {
        return Err(CliError::Config("epsilon must be finite and >= 0".into()));
    }
    let seed = seed.unwrap_or(config.subset_seed);
    let out_dir = resolve_out(out, None)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err("cannot create", &out_dir, e))?;

    let (state, _meta) = load_checkpoint(&config.checkpoint, None)?;
    let model = state.model;
    let full = load_probe_data(&config.dataset, config.split)?;
    if full.dim() != model.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint model expects {} inputs but dataset has dimension {}",
            model.input_dim(),
            full.dim()
        )));
    }
    let sub = full.metric_subset(config.subset, seed);

    if !probe.any() {
        let opts = metric_options(&config, seed);
        let report = landscape_report(&model, &full, &opts)?;
        let mut header = String::from("split,sample_count,ig,hs,av,grad_align");
        let mut line = format!(
            "{},{},{},{},{},{}",
            report.split,
            report.sample_count,
            csv::fmt(report.ig),
            csv::fmt(report.hs),
            csv::fmt(report.av),
            csv::fmt(report.grad_align)
        );
        for (name, value) in &report.effectiveness {
            header.push_str(&format!(",eff_{name}"));
            line.push_str(&format!(",{}", csv::fmt(*value)));
        }
        write_file(&out_dir.join("report.csv"), &format!("{header}\n{line}\n"))?;
    }

    if let Some(steps_list) = &probe.pgd_sweep {
        let mut text = String::from("steps,robust_acc,adv_loss\n");
        for &k in steps_list {
            let spec = AttackSpec::pgd(config.epsilon, k).with_seed(seed);
            let pert = run_attack(AttackMethod::Pgd, &model, &sub.inputs, &sub.labels, &spec)?;
            let xadv = sub.inputs.zip_map(&pert.delta, |a, b| a + b);
            let preds = model.predict(&xadv)?;
            let acc = preds
                .iter()
                .zip(&sub.labels)
                .filter(|(p, y)| p == y)
                .count() as f64
                / sub.len() as f64;
            text.push_str(&format!(
                "{k},{},{}\n",
                csv::fmt(acc),
                csv::fmt(pert.mean_loss())
            ));
        }
        write_file(&out_dir.join("pgd_sweep.csv"), &text)?;
    }

    if let Some(sizes) = &probe.sample_sweep {
        let reference = default_reference(config.epsilon);
        let mut text = String::from("n,ig,av,grad_align,hs\n");
        for &n in sizes {
            let mut opts = metric_options(&config, seed);
            opts.subset = n;
            // Sweeps keep HS off unless explicitly requested: it dominates
            // runtime and the sensitivity question is about sample count.
            opts.compute_hs = config.compute_hs.unwrap_or(false);
            opts.reference = reference.clone();
            let report = landscape_report(&model, &full, &opts)?;
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                report.sample_count,
                csv::fmt(report.ig),
                csv::fmt(report.av),
                csv::fmt(report.grad_align),
                csv::fmt(if opts.compute_hs { report.hs } else { f64::NAN })
            ));
        }
        write_file(&out_dir.join("sample_sweep.csv"), &text)?;
    }

    if probe.softplus_twin {
        let twin = model.swap_activation(advlab_core::Activation::Softplus);
        let hs_relu = mean_hs(&model, &sub, &config, seed)?;
        let hs_soft = mean_hs(&twin, &sub, &config, seed)?;
        let mut text = String::from("index,hs_relu,hs_softplus\n");
        for i in 0..sub.len() {
            text.push_str(&format!(
                "{i},{},{}\n",
                csv::fmt(hs_relu[i]),
                csv::fmt(hs_soft[i])
            ));
        }
        write_file(&out_dir.join("softplus_twin.csv"), &text)?;
    }

    if let Some(spec) = &probe.degenerate {
        let (mode, value) = parse_degenerate(spec)?;
        let x = &sub.inputs;
        let y = &sub.labels;
        let pgd20 = AttackSpec::pgd(config.epsilon, 20).with_seed(seed);
        let reference = run_attack(
            AttackMethod::Pgd,
            &model,
            x,
            y,
            &AttackSpec::pgd(config.epsilon, 50).with_seed(seed),
        )?;
        let pert = match mode {
            "scale" => {
                let base = run_attack(AttackMethod::Pgd, &model, x, y, &pgd20)?;
                scale_perturbation(&model, x, y, &base, value)?
            }
            "flip" => {
                let base = run_attack(AttackMethod::Pgd, &model, x, y, &pgd20)?;
                flip_signs(&model, x, y, &base, value, seed)?
            }
            _ => {
                // Attack generated against noisy weights, assessed against
                // the real model.
                let noisy = perturb_weights(&model, value, seed);
                let base = run_attack(AttackMethod::Pgd, &noisy, x, y, &pgd20)?;
                let xadv = x.zip_map(&base.delta, |a, b| a + b);
                Perturbation {
                    loss_at_delta: per_sample_loss(&model, &xadv, y)?,
                    delta: base.delta,
                    epsilon: base.epsilon,
                }
            }
        };
        let clean = per_sample_loss(&model, x, y)?;
        let eff = effectiveness(&model, x, y, &pert, &reference)?;
        let mut text = String::from("index,av,effectiveness\n");
        for i in 0..y.len() {
            text.push_str(&format!(
                "{i},{},{}\n",
                csv::fmt(pert.loss_at_delta[i] - clean[i]),
                csv::fmt(eff[i].unwrap_or(f64::NAN))
            ));
        }
        write_file(&out_dir.join("degenerate.csv"), &text)?;
    }

    Ok(())
}

pub fn cmd_plot(input: &Path, figure: Figure, out: &Path) -> Result<(), CliError> {
    emit_plot_data(input, figure, out)
}
