//! CSV exports for figures: loss curves, test scatter and learned weights.

use super::{CurvePoint, MetricReport, WeightRow};
use crate::data::fmt_sig9;
use crate::models::ModelKind;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

pub const LOSSES_HEADER: &str = "epoch,split,model,mse";
pub const SCATTER_HEADER: &str = "true_w2,pred_w2,model";
pub const WEIGHTS_HEADER: &str = "model,index_or_stage,t_or_name,lambda";
pub const METRICS_HEADER: &str = "model,split,mse,mae,rel_mae,mean_true,pairs";

pub fn metrics_row(kind: ModelKind, split: &str, r: &MetricReport) -> String {
    format!(
        "{},{split},{},{},{},{},{}\n",
        kind.name(),
        fmt_sig9(r.mse),
        fmt_sig9(r.mae),
        fmt_sig9(r.rel_mae),
        fmt_sig9(r.mean_true),
        r.rows.len()
    )
}

/// Rows of `losses.csv` for one model; NaN validation entries are skipped.
pub fn losses_rows(kind: ModelKind, curve: &[CurvePoint]) -> String {
    let mut s = String::new();
    for p in curve {
        let _ = writeln!(
            s,
            "{},train,{},{}",
            p.epoch,
            kind.name(),
            fmt_sig9(p.train_mse)
        );
        if !p.val_mse.is_nan() {
            let _ = writeln!(s, "{},val,{},{}", p.epoch, kind.name(), fmt_sig9(p.val_mse));
        }
    }
    s
}

pub fn scatter_rows(kind: ModelKind, report: &MetricReport) -> String {
    let mut s = String::new();
    for &(t, p) in &report.rows {
        let _ = writeln!(s, "{},{},{}", fmt_sig9(t), fmt_sig9(p), kind.name());
    }
    s
}

pub fn weights_rows(kind: ModelKind, rows: &[WeightRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            kind.name(),
            r.index,
            r.label,
            fmt_sig9(r.lambda)
        );
    }
    s
}

/// Writes `body` under `header`, replacing any earlier rows that match every
/// `(column, value)` in `key`; other rows already in the file are kept.
pub fn upsert_rows(path: &Path, header: &str, key: &[(usize, &str)], body: &str) -> io::Result<()> {
    let kept: Vec<String> = match fs::read_to_string(path) {
        Ok(text) if text.lines().next() == Some(header) => text
            .lines()
            .skip(1)
            .filter(|l| {
                let cells: Vec<&str> = l.split(',').collect();
                !key.iter().all(|&(c, v)| cells.get(c) == Some(&v))
            })
            .map(str::to_string)
            .collect(),
        Ok(_) => Vec::new(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut text = format!("{header}\n");
    for l in kept {
        text.push_str(&l);
        text.push('\n');
    }
    text.push_str(body);
    fs::write(path, text)
}
