//! `evaluate`: score predictions against ground truth.
//!
//! Pairs are matched by stem across the prediction (`*.sr.wgf1`) and truth
//! (`*.hr.wgf1`) directories; unmatched stems on either side abort with a
//! listing. When matching low-resolution inputs are available, the bicubic
//! interpolation baseline is evaluated side by side in the same report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use downwave_core::grid::bicubic_upsample;
use downwave_core::io::read_wgf1;
use downwave_core::metrics::{evaluate_set, MetricConfig};
use downwave_core::{CoreError, GridField, Result};

use crate::commands::{format_missing, list_with_suffix};
use crate::config::RunConfig;

fn read_all(entries: &BTreeMap<String, PathBuf>) -> Result<Vec<GridField>> {
    entries.values().map(|p| read_wgf1(p)).collect()
}

pub fn run(config: &RunConfig) -> Result<()> {
    let truth_dir = config
        .paths
        .truth_dir
        .clone()
        .unwrap_or_else(|| config.paths.data_dir.join("test"));
    let pred_dir = &config.paths.output_dir;

    let preds: BTreeMap<String, PathBuf> =
        list_with_suffix(pred_dir, ".sr.wgf1")?.into_iter().collect();
    let truths: BTreeMap<String, PathBuf> =
        list_with_suffix(&truth_dir, ".hr.wgf1")?.into_iter().collect();
    if preds.is_empty() || truths.is_empty() {
        return Err(CoreError::Config(format!(
            "nothing to evaluate: {} predictions in {}, {} truths in {}",
            preds.len(),
            pred_dir.display(),
            truths.len(),
            truth_dir.display()
        )));
    }

    let missing_preds: Vec<String> = truths.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let missing_truths: Vec<String> = preds.keys().filter(|k| !truths.contains_key(*k)).cloned().collect();
    if !missing_preds.is_empty() || !missing_truths.is_empty() {
        let mut parts = Vec::new();
        if !missing_preds.is_empty() {
            parts.push(format_missing("predictions", &missing_preds));
        }
        if !missing_truths.is_empty() {
            parts.push(format_missing("truths", &missing_truths));
        }
        return Err(CoreError::Format(format!(
            "unmatched evaluation pairs: {}",
            parts.join("; ")
        )));
    }

    let pred_fields = read_all(&preds)?;
    let truth_fields = read_all(&truths)?;
    let pairs: Vec<(GridField, GridField)> = pred_fields
        .into_iter()
        .zip(truth_fields.iter().cloned())
        .collect();

    let metric_config = MetricConfig::default();
    let report = evaluate_set(&pairs, &metric_config)?;

    // Bicubic baseline whenever every pair has a matching LR input.
    let lr_dir = config
        .paths
        .input_dir
        .clone()
        .unwrap_or_else(|| config.paths.data_dir.join("test"));
    let baseline = baseline_report(&lr_dir, &truths, truth_fields, &metric_config)?;

    let report_path = &config.paths.report;
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::from("# source = model\n");
    text.push_str(&report.to_csv());
    let mut curve = String::from("# source = model\n");
    curve.push_str(&report.csi_curve_csv());
    if let Some(base) = &baseline {
        text.push_str("# source = bicubic\n");
        text.push_str(&base.to_csv());
        curve.push_str("# source = bicubic\n");
        curve.push_str(&base.csi_curve_csv());
    }
    std::fs::write(report_path, &text)?;
    let curve_path = sibling_with_suffix(report_path, "_csi");
    std::fs::write(&curve_path, &curve)?;
    let echo_dir = report_path.parent().unwrap_or(Path::new("."));
    config.echo_into(echo_dir, "evaluate")?;

    println!(
        "evaluate: {} pairs -> {} (model rmse {:.4}, mae {:.4}, ssim {:.4})",
        pairs.len(),
        report_path.display(),
        report.rmse_mean,
        report.mae_mean,
        report.ssim_mean
    );
    if let Some(base) = &baseline {
        println!(
            "evaluate: bicubic baseline rmse {:.4}, mae {:.4}, ssim {:.4}",
            base.rmse_mean, base.mae_mean, base.ssim_mean
        );
    }
    Ok(())
}

/// `report.csv` → `report_csi.csv`.
fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Evaluates bicubic upsampling of the LR inputs when a complete set exists;
/// a missing directory or zero LR files disables the baseline, while a
/// partial set is an error (half a baseline would mislead).
fn baseline_report(
    lr_dir: &Path,
    truths: &BTreeMap<String, PathBuf>,
    truth_fields: Vec<GridField>,
    metric_config: &MetricConfig,
) -> Result<Option<downwave_core::MetricReport>> {
    if !lr_dir.is_dir() {
        return Ok(None);
    }
    let lrs: BTreeMap<String, PathBuf> =
        list_with_suffix(lr_dir, ".lr.wgf1")?.into_iter().collect();
    if lrs.is_empty() {
        return Ok(None);
    }
    let missing: Vec<String> = truths.keys().filter(|k| !lrs.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(CoreError::Format(format!(
            "bicubic baseline requested but LR inputs incomplete: {}",
            format_missing("low-resolution inputs", &missing)
        )));
    }

    let mut pairs = Vec::with_capacity(truths.len());
    for (stem, truth) in truths.keys().zip(truth_fields) {
        let lr = read_wgf1(&lrs[stem])?;
        if lr.height() == 0
            || truth.height() % lr.height() != 0
            || truth.width() % lr.width() != 0
            || truth.height() / lr.height() != truth.width() / lr.width()
        {
            return Err(CoreError::Dimension(format!(
                "{stem}: LR {}x{} does not divide truth {}x{} evenly",
                lr.height(),
                lr.width(),
                truth.height(),
                truth.width()
            )));
        }
        let factor = truth.height() / lr.height();
        let up = bicubic_upsample(&lr, factor)?.clip_physical();
        pairs.push((up, truth));
    }
    Ok(Some(evaluate_set(&pairs, metric_config)?))
}
