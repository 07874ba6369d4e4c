//! Tidy long-format plot data (series, x, y) derived from stored CSVs.
//! Smoothing happens only here — the stored metrics stay raw.

use std::path::Path;

use crate::csv;
use crate::error::{io_err, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    A1,
    A2,
    A3,
}

impl std::str::FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig1" => Ok(Figure::Fig1),
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            "fig4" => Ok(Figure::Fig4),
            "a1" => Ok(Figure::A1),
            "a2" => Ok(Figure::A2),
            "a3" => Ok(Figure::A3),
            other => Err(format!(
                "unknown figure '{other}' (expected fig1|fig2|fig3|fig4|a1|a2|a3)"
            )),
        }
    }
}

/// Trailing moving average over up to `window` points; the window shrinks
/// to the available prefix at the start of the series.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn col(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("input is missing column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

fn push_series(out: &mut Vec<(String, f64, f64)>, name: &str, x: &[f64], y: &[f64]) {
    for (xv, yv) in x.iter().zip(y) {
        if yv.is_finite() {
            out.push((name.to_string(), *xv, *yv));
        }
    }
}

fn smoothed_series(
    out: &mut Vec<(String, f64, f64)>,
    name: &str,
    x: &[f64],
    y: &[f64],
    window: usize,
) {
    // Smooth over the defined points only, then report them at their
    // original x positions.
    let defined: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, yv)| yv.is_finite())
        .map(|(a, b)| (*a, *b))
        .collect();
    let ys: Vec<f64> = defined.iter().map(|(_, y)| *y).collect();
    let sm = moving_average(&ys, window);
    for ((xv, _), yv) in defined.iter().zip(sm) {
        out.push((name.to_string(), *xv, yv));
    }
}

/// Builds the (series, x, y) triples for one figure from a stored CSV.
pub fn plot_rows(
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    figure: Figure,
) -> Result<Vec<(String, f64, f64)>, CliError> {
    let t = Table { header, rows };
    let mut out = Vec::new();
    match figure {
        Figure::Fig1 => {
            let x = t.col("epoch")?;
            for name in [
                "ig_train",
                "ig_test",
                "hs_train",
                "hs_test",
                "train_adv_loss",
                "test_adv_loss",
            ] {
                smoothed_series(&mut out, name, &x, &t.col(name)?, 5);
            }
        }
        Figure::Fig2 => {
            let x = t.col("epoch")?;
            let train = t.col("train_adv_loss")?;
            let test = t.col("test_adv_loss")?;
            let gap: Vec<f64> = test.iter().zip(&train).map(|(a, b)| a - b).collect();
            push_series(&mut out, "adv_loss_gap", &x, &gap);
        }
        Figure::Fig3 => {
            let x = t.col("epoch")?;
            for name in ["hs_test", "ig_test"] {
                smoothed_series(&mut out, name, &x, &t.col(name)?, 5);
            }
            for eff in t.header.iter().filter(|h| h.starts_with("eff_")).cloned().collect::<Vec<_>>() {
                smoothed_series(&mut out, &eff, &x, &t.col(&eff)?, 5);
            }
        }
        Figure::Fig4 => {
            let x = t.col("hs_train")?;
            let effs: Vec<String> = t
                .header
                .iter()
                .filter(|h| h.starts_with("eff_"))
                .cloned()
                .collect();
            if effs.is_empty() {
                return Err(CliError::Config(
                    "input is missing column 'eff_*' (no effectiveness columns)".into(),
                ));
            }
            for eff in effs {
                push_series(&mut out, &eff, &x, &t.col(&eff)?);
            }
        }
        Figure::A1 => {
            let x = t.col("steps")?;
            push_series(&mut out, "robust_acc", &x, &t.col("robust_acc")?);
            push_series(&mut out, "adv_loss", &x, &t.col("adv_loss")?);
        }
        Figure::A2 => {
            let x = t.col("index")?;
            push_series(&mut out, "hs_relu", &x, &t.col("hs_relu")?);
            push_series(&mut out, "hs_softplus", &x, &t.col("hs_softplus")?);
        }
        Figure::A3 => {
            let x = t.col("n")?;
            for name in ["ig", "av", "grad_align"] {
                push_series(&mut out, name, &x, &t.col(name)?);
            }
        }
    }
    Ok(out)
}

pub fn emit_plot_data(input: &Path, figure: Figure, out_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", input.display())))?;
    let (header, rows) =
        csv::parse(&text).ok_or_else(|| CliError::Config("input CSV has no header".into()))?;
    let triples = plot_rows(header, rows, figure)?;
    let mut text = String::from("series,x,y\n");
    for (series, x, y) in &triples {
        text.push_str(&format!("{series},{},{}\n", csv::fmt(*x), csv::fmt(*y)));
    }
    std::fs::write(out_path, text).map_err(|e| io_err("cannot write", out_path, e))
}
