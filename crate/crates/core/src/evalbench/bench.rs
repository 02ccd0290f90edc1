use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{write_svg, Line};
use super::report::{DatasetResult, ForecastReport, Protocol};
use super::{metrics, persistence, rollout, Fusion};
use crate::data::ingest::parse_cell;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tokenize::check_context_alignment;

/// Columns with these names (case-insensitive) are never treated as series.
pub const NON_SERIES_COLUMNS: [&str; 5] = ["date", "time", "timestamp", "datetime", "id"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub dataset: String,
    pub context_length: usize,
    pub horizon: usize,
    /// Score in the per-series z-scored space (context statistics).
    pub normalize: bool,
}

impl Default for EvalTask {
    fn default() -> Self {
        EvalTask {
            dataset: String::new(),
            context_length: 512,
            horizon: 96,
            normalize: true,
        }
    }
}

impl EvalTask {
    pub fn validate(&self, patch_length: usize) -> Result<()> {
        check_context_alignment(self.context_length, patch_length)?;
        if self.horizon == 0 || self.horizon % patch_length != 0 {
            return Err(Error::AlignmentUnsupported(format!(
                "horizon {} is not a positive multiple of the patch length {patch_length}",
                self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesResult {
    pub name: String,
    pub mse: f64,
    pub mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
    pub context: Vec<f64>,
    pub truth: Vec<f64>,
    pub forecast: Vec<f64>,
}

/// Scores the tail window of one series. `Ok(Err(reason))` means the series
/// was skipped.
pub fn evaluate_series(
    weights: &ModelWeights,
    config: &ModelConfig,
    name: &str,
    series: &[f64],
    task: &EvalTask,
    fusion: Fusion,
) -> Result<std::result::Result<SeriesResult, String>> {
    let (c, h) = (task.context_length, task.horizon);
    if series.len() < c + h {
        return Ok(Err(format!("length {} < {}", series.len(), c + h)));
    }
    let tail = &series[series.len() - c - h..];
    let (context, truth) = tail.split_at(c);
    if truth.iter().any(|v| !v.is_finite()) {
        return Ok(Err("non-finite values in the forecast horizon".into()));
    }
    let Some(last) = context.iter().rev().find(|v| v.is_finite()).copied() else {
        return Ok(Err("context has no finite values".into()));
    };
    let forecast = rollout(weights, config, context, h, fusion)?;
    let naive = persistence(&[last], h)?;
    let stats = forecast.stats;
    let scale = |v: &[f64]| -> Vec<f64> {
        if task.normalize {
            v.iter().map(|&x| stats.normalize(x)).collect()
        } else {
            v.to_vec()
        }
    };
    let truth_s = scale(truth);
    let fc_s = if task.normalize {
        forecast.normalized.clone()
    } else {
        forecast.values.clone()
    };
    let (mse, mae) = metrics(&fc_s, &truth_s)?;
    let (baseline_mse, baseline_mae) = metrics(&scale(&naive), &truth_s)?;
    Ok(Ok(SeriesResult {
        name: name.to_string(),
        mse,
        mae,
        baseline_mse,
        baseline_mae,
        context: context.to_vec(),
        truth: truth.to_vec(),
        forecast: forecast.values,
    }))
}

/// Splits a CSV file into univariate series, one per numeric column.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let err = |row: usize, m: String| Error::Ingest {
        path: path.to_path_buf(),
        row,
        message: m,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    let keep: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !NON_SERIES_COLUMNS.contains(&h.trim().to_ascii_lowercase().as_str()))
        .map(|(i, _)| i)
        .collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); keep.len()];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(row + 1, e.to_string()))?;
        for (col, &i) in columns.iter_mut().zip(&keep) {
            col.push(parse_cell(rec.get(i).unwrap_or("")));
        }
    }
    Ok(keep
        .iter()
        .zip(columns)
        .filter(|(_, v)| v.iter().any(|x| x.is_finite()))
        .map(|(&i, v)| (headers[i].trim().to_string(), v))
        .collect())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Evaluates every CSV file in `dir` (one dataset per file, sorted by name).
/// Datasets with no usable series are left out of the report.
pub fn run_benchmark(
    weights: &ModelWeights,
    config: &ModelConfig,
    dir: &Path,
    task: &EvalTask,
    fusion: Fusion,
    plot_dir: Option<&Path>,
) -> Result<ForecastReport> {
    task.validate(config.patch_length)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoSeries(format!("no .csv datasets in {}", dir.display())));
    }
    if let Some(p) = plot_dir {
        std::fs::create_dir_all(p)?;
    }

    let mut rows = Vec::new();
    for file in files {
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let series = read_dataset_csv(&file)?;
        let task = EvalTask {
            dataset: name.clone(),
            ..task.clone()
        };
        let results: Vec<_> = series
            .par_iter()
            .map(|(col, values)| evaluate_series(weights, config, col, values, &task, fusion))
            .collect::<Result<_>>()?;
        let mut done = Vec::new();
        let mut skipped = 0;
        for (r, (col, _)) in results.into_iter().zip(&series) {
            match r {
                Ok(s) => done.push(s),
                Err(reason) => {
                    log::warn!("{name}/{col}: skipped ({reason})");
                    skipped += 1;
                }
            }
        }
        if done.is_empty() {
            log::warn!("{name}: no series could be evaluated");
            continue;
        }
        if let Some(p) = plot_dir {
            for s in &done {
                let hist = &s.context[s.context.len().saturating_sub(2 * task.horizon)..];
                let start = hist.len();
                write_svg(
                    &p.join(format!("{}_{}.svg", sanitize(&name), sanitize(&s.name))),
                    &format!("{name} / {}", s.name),
                    &[
                        Line { label: "history", color: "#888888", start: 0, values: hist },
                        Line { label: "truth", color: "#000000", start, values: &s.truth },
                        Line { label: "forecast", color: "#d62728", start, values: &s.forecast },
                    ],
                )?;
            }
        }
        let n = done.len() as f64;
        let mean = |f: fn(&SeriesResult) -> f64| done.iter().map(f).sum::<f64>() / n;
        rows.push(DatasetResult {
            name,
            mse: mean(|s| s.mse),
            mae: mean(|s| s.mae),
            n_series: done.len(),
            n_skipped: skipped,
            baseline_mse: mean(|s| s.baseline_mse),
            baseline_mae: mean(|s| s.baseline_mae),
        });
    }
    if rows.is_empty() {
        return Err(Error::NoSeries(format!(
            "no series of length >= {} in {}",
            task.context_length + task.horizon,
            dir.display()
        )));
    }
    let protocol = Protocol {
        context_length: task.context_length,
        horizon: task.horizon,
        normalization: if task.normalize {
            "per-series z-score from context statistics".into()
        } else {
            "raw values".into()
        },
        windows: "one tail window per series".into(),
        fusion,
        baseline: "persistence".into(),
        shared_expert: config.use_shared_expert,
    };
    Ok(ForecastReport::new(protocol, rows, config))
}
