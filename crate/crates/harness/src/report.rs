//! Aggregate tables over sample records.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use semadv_core::evalmetrics::{accuracy, asr, asr_relative, SampleRecord, Which};
use semadv_core::{Error, Result};

use crate::manifest::list_files;

/// One (grid cell, target model) line of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub cell: String,
    pub model: String,
    pub n: usize,
    pub errors: usize,
    pub asr: Option<f64>,
    /// `None` when no exemplar was classified correctly.
    pub asr_relative: Option<f64>,
    pub acc_adv: Option<f64>,
    pub acc_exemplar: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub l2_diff: Option<f64>,
    pub iterations: Option<f64>,
    pub denoiser_calls: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// One row per target model seen in `records`; a single surrogate row when
/// there are none.
pub fn aggregate(cell: &str, records: &[SampleRecord], errors: usize) -> Vec<ReportRow> {
    let mut models: BTreeSet<&str> = records.iter().flat_map(|r| r.verdicts.keys().map(String::as_str)).collect();
    if models.is_empty() {
        models.insert(crate::experiment::SURROGATE);
    }
    let shared = |f: fn(&SampleRecord) -> Option<f64>| mean(records.iter().filter_map(f));
    models
        .into_iter()
        .map(|model| ReportRow {
            cell: cell.to_string(),
            model: model.to_string(),
            n: records.len(),
            errors,
            asr: asr(records, model).ok(),
            asr_relative: asr_relative(records, model).ok(),
            acc_adv: accuracy(records, Which::Adv, model).ok(),
            acc_exemplar: accuracy(records, Which::Exemplar, model).ok(),
            ms_ssim: shared(|r| r.ms_ssim),
            l2_diff: shared(|r| r.l2_diff),
            iterations: shared(|r| Some(r.trace.iterations as f64)),
            denoiser_calls: shared(|r| Some(r.trace.denoiser_calls as f64)),
        })
        .collect()
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("# one line per grid cell and target model\n");
    for r in rows {
        let _ = writeln!(
            out,
            "cell={} model={} n={} errors={} asr={} asr_relative={} acc_adv={} acc_exemplar={} ms_ssim={} l2_diff={} iterations={} denoiser_calls={}",
            r.cell,
            r.model,
            r.n,
            r.errors,
            f(r.asr),
            f(r.asr_relative),
            f(r.acc_adv),
            f(r.acc_exemplar),
            f(r.ms_ssim),
            f(r.l2_diff),
            f(r.iterations),
            f(r.denoiser_calls),
        );
    }
    out
}

/// Rows of every `records.txt` below `dir`, labeled by their directory with
/// any `cells` component dropped.
pub fn evaluate_runs(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for rel in list_files(dir)? {
        let Some(parent) = rel.strip_suffix("records.txt") else {
            continue;
        };
        if !(parent.is_empty() || parent.ends_with('/')) {
            continue;
        }
        let records = SampleRecord::parse_all(&std::fs::read_to_string(dir.join(&rel))?)?;
        let errors = std::fs::read_to_string(dir.join(format!("{parent}errors.txt")))
            .map(|t| t.lines().count())
            .unwrap_or(0);
        let label: Vec<&str> = parent.split('/').filter(|c| !c.is_empty() && *c != "cells").collect();
        let label = if label.is_empty() { ".".to_string() } else { label.join("/") };
        rows.extend(aggregate(&label, &records, errors));
    }
    if rows.is_empty() {
        return Err(Error::Setup(format!("no records.txt below {}", dir.display())));
    }
    Ok(rows)
}
