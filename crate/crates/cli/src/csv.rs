//! CSV helpers shared by all commands: fixed headers, '.' decimals at full
//! round-trip precision, and "excluded" for undefined values.

use advlab_core::MetricsRow;

pub const EXCLUDED: &str = "excluded";

pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        EXCLUDED.to_string()
    } else {
        format!("{v}")
    }
}

/// Fixed metrics header; effectiveness columns are named per configured
/// attack and appear in config order.
pub fn metrics_header(eff_names: &[String]) -> String {
    let mut cols = vec![
        "epoch",
        "lr",
        "train_clean_loss",
        "test_clean_loss",
        "train_adv_loss",
        "test_adv_loss",
        "train_clean_acc",
        "test_clean_acc",
        "train_robust_acc",
        "test_robust_acc",
        "ig_train",
        "ig_test",
        "hs_train",
        "hs_test",
        "av_train",
        "av_test",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for name in eff_names {
        cols.push(format!("eff_{name}"));
    }
    cols.extend(
        [
            "grad_align",
            "reg_loss",
            "swa_test_clean_loss",
            "swa_test_adv_loss",
            "swa_test_clean_acc",
            "swa_test_robust_acc",
        ]
        .map(String::from),
    );
    cols.join(",")
}

pub fn metrics_line(row: &MetricsRow, eff_names: &[String]) -> String {
    let mut cols = vec![
        row.epoch.to_string(),
        fmt(row.lr),
        fmt(row.train_clean_loss),
        fmt(row.test_clean_loss),
        fmt(row.train_adv_loss),
        fmt(row.test_adv_loss),
        fmt(row.train_clean_acc),
        fmt(row.test_clean_acc),
        fmt(row.train_robust_acc),
        fmt(row.test_robust_acc),
        fmt(row.ig_train),
        fmt(row.ig_test),
        fmt(row.hs_train),
        fmt(row.hs_test),
        fmt(row.av_train),
        fmt(row.av_test),
    ];
    for name in eff_names {
        let v = row
            .effectiveness
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN);
        cols.push(fmt(v));
    }
    cols.push(fmt(row.grad_align));
    cols.push(fmt(row.reg_loss));
    cols.push(fmt(row.swa_test_clean_loss));
    cols.push(fmt(row.swa_test_adv_loss));
    cols.push(fmt(row.swa_test_clean_acc));
    cols.push(fmt(row.swa_test_robust_acc));
    cols.join(",")
}

/// Parses a CSV written by this crate into (header columns, rows); cells
/// reading "excluded" come back as NaN.
pub fn parse(text: &str) -> Option<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next()?.split(',').map(String::from).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                if c == EXCLUDED {
                    f64::NAN
                } else {
                    c.parse().unwrap_or(f64::NAN)
                }
            })
            .collect();
        rows.push(row);
    }
    Some((header, rows))
}
