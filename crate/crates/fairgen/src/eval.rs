//! Evaluation: per-group accuracy, worst-group and average-group accuracy,
//! per-group distribution distance between real and synthetic pools, and
//! report emission (CSV + markdown) with mean/std aggregation across seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GroupKey, GroupedDataset};
use crate::embed::{frechet_distance, Embedding};
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::train::inputs_and_labels;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: GroupKey,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_group: Vec<GroupMetrics>,
    /// Minimum per-group accuracy.
    pub worst_group: f64,
    /// Unweighted mean of per-group accuracies.
    pub average_group: f64,
    /// Sample-weighted accuracy over the whole split.
    pub overall: f64,
}

/// Fraction of matching prediction/label pairs.
pub fn sample_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Evaluate a model on a (typically test) split. Every group in the dataset's
/// alignment map must be present; a missing group is an error naming it, not
/// a silently dropped term.
pub fn evaluate(model: &Mlp, class_names: &[String], ds: &GroupedDataset) -> Result<EvalReport> {
    let sizes = ds.group_sizes();
    for group in ds.alignment_map().keys() {
        if !sizes.contains_key(group) {
            return Err(Error::Evaluation(format!(
                "group {group} has no samples in the evaluation split"
            )));
        }
    }
    let (inputs, labels, ds_classes) = inputs_and_labels(ds)?;
    if ds_classes != class_names {
        return Err(Error::Evaluation(format!(
            "class sets differ: model {class_names:?} vs data {ds_classes:?}"
        )));
    }
    let predictions = model.predict(&inputs)?;
    let mut per_group = Vec::new();
    let mut worst = f64::INFINITY;
    let mut sum = 0.0;
    for group in sizes.keys() {
        let indices = ds.group_indices(group);
        let correct = indices
            .iter()
            .filter(|&&i| predictions[i] == labels[i])
            .count();
        let accuracy = correct as f64 / indices.len() as f64;
        worst = worst.min(accuracy);
        sum += accuracy;
        per_group.push(GroupMetrics {
            group: group.clone(),
            correct,
            total: indices.len(),
            accuracy,
        });
    }
    let overall = sample_accuracy(&predictions, &labels)?;
    Ok(EvalReport {
        worst_group: worst,
        average_group: sum / per_group.len() as f64,
        overall,
        per_group,
    })
}

/// Per-group distribution distance between real and synthetic embeddings.
pub fn distribution_report(
    real: &GroupedDataset,
    synth: &GroupedDataset,
    embeddings: &BTreeMap<String, Embedding>,
) -> Result<BTreeMap<GroupKey, f64>> {
    let collect = |ds: &GroupedDataset, group: &GroupKey| -> Result<Vec<Embedding>> {
        ds.group_items(group)
            .map(|item| {
                embeddings
                    .get(&item.id)
                    .cloned()
                    .ok_or_else(|| Error::Dependency {
                        stage: "distribution report".into(),
                        detail: format!("missing embedding for {}", item.id),
                    })
            })
            .collect()
    };
    let mut out = BTreeMap::new();
    for group in synth.group_sizes().keys() {
        if !real.group_sizes().contains_key(group) {
            return Err(Error::Evaluation(format!(
                "group {group} has no real samples to compare against"
            )));
        }
        let a = collect(real, group)?;
        let b = collect(synth, group)?;
        out.insert(group.clone(), frechet_distance(&a, &b)?);
    }
    Ok(out)
}

/// One aggregated result line: a method evaluated across several seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub worst_group_mean: f64,
    pub worst_group_std: f64,
    pub average_group_mean: f64,
    pub average_group_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(method: &str, reports: &[EvalReport]) -> Result<MethodSummary> {
    if reports.is_empty() {
        return Err(Error::Evaluation(format!("no runs to summarize for {method}")));
    }
    let wga: Vec<f64> = reports.iter().map(|r| r.worst_group).collect();
    let aga: Vec<f64> = reports.iter().map(|r| r.average_group).collect();
    let (wm, ws) = mean_std(&wga);
    let (am, as_) = mean_std(&aga);
    Ok(MethodSummary {
        method: method.to_string(),
        seeds: reports.len(),
        worst_group_mean: wm,
        worst_group_std: ws,
        average_group_mean: am,
        average_group_std: as_,
    })
}

pub fn write_summary_csv(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "method",
        "seeds",
        "worst_group_mean",
        "worst_group_std",
        "average_group_mean",
        "average_group_std",
    ])?;
    for s in summaries {
        writer.write_record([
            s.method.clone(),
            s.seeds.to_string(),
            format!("{:.6}", s.worst_group_mean),
            format!("{:.6}", s.worst_group_std),
            format!("{:.6}", s.average_group_mean),
            format!("{:.6}", s.average_group_std),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Markdown table with `mean ± std` cells (percent, two decimals).
pub fn write_summary_markdown(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    let mut text = String::from("| method | seeds | worst-group acc | average-group acc |\n");
    text.push_str("|---|---|---|---|\n");
    for s in summaries {
        text.push_str(&format!(
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
            s.method,
            s.seeds,
            100.0 * s.worst_group_mean,
            100.0 * s.worst_group_std,
            100.0 * s.average_group_mean,
            100.0 * s.average_group_std,
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a table produced by [`write_summary_markdown`] back into numbers
/// (used to keep the two output formats consistent).
pub fn parse_summary_markdown(text: &str) -> Result<Vec<MethodSummary>> {
    let mut out = Vec::new();
    for line in text.lines().skip(2) {
        let cells: Vec<&str> = line
            .trim()
            .trim_matches('|')
            .split('|')
            .map(str::trim)
            .collect();
        if cells.len() != 4 {
            return Err(Error::Parse(format!("malformed summary row `{line}`")));
        }
        let parse_pair = |cell: &str| -> Result<(f64, f64)> {
            let (m, s) = cell
                .split_once('±')
                .ok_or_else(|| Error::Parse(format!("malformed cell `{cell}`")))?;
            let m: f64 = m.trim().parse().map_err(|_| Error::Parse(cell.into()))?;
            let s: f64 = s.trim().parse().map_err(|_| Error::Parse(cell.into()))?;
            Ok((m / 100.0, s / 100.0))
        };
        let (wm, ws) = parse_pair(cells[2])?;
        let (am, as_) = parse_pair(cells[3])?;
        out.push(MethodSummary {
            method: cells[0].to_string(),
            seeds: cells[1].parse().map_err(|_| Error::Parse(cells[1].into()))?,
            worst_group_mean: wm,
            worst_group_std: ws,
            average_group_mean: am,
            average_group_std: as_,
        });
    }
    Ok(out)
}
