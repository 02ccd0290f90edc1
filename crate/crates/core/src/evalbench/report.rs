use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::Fusion;
use crate::error::Result;
use crate::model::ModelConfig;

pub const REPORT_RECORDS_FILE: &str = "report.jsonl";
pub const REPORT_TABLE_FILE: &str = "report.txt";

/// How the numbers were produced; written into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Protocol {
    pub context_length: usize,
    pub horizon: usize,
    pub normalization: String,
    pub windows: String,
    pub fusion: Fusion,
    pub baseline: String,
    pub shared_expert: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetResult {
    pub name: String,
    pub mse: f64,
    pub mae: f64,
    pub n_series: usize,
    pub n_skipped: usize,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Averages {
    pub mse: f64,
    pub mae: f64,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastReport {
    pub protocol: Protocol,
    pub datasets: Vec<DatasetResult>,
    pub average: Averages,
    pub fingerprint: String,
}

impl ForecastReport {
    /// Averages are plain means over datasets.
    pub fn new(protocol: Protocol, datasets: Vec<DatasetResult>, model: &ModelConfig) -> Self {
        let n = datasets.len().max(1) as f64;
        let mean = |f: fn(&DatasetResult) -> f64| datasets.iter().map(f).sum::<f64>() / n;
        let average = Averages {
            mse: mean(|d| d.mse),
            mae: mean(|d| d.mae),
            baseline_mse: mean(|d| d.baseline_mse),
            baseline_mae: mean(|d| d.baseline_mae),
        };
        let fingerprint = fingerprint(model, &protocol);
        ForecastReport {
            protocol,
            datasets,
            average,
            fingerprint,
        }
    }

    /// One JSON object per line: protocol, each dataset, then the average.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let line = |kind: &str, body: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("kind".into(), kind.into());
            if let serde_json::Value::Object(m) = body {
                obj.extend(m);
            }
            serde_json::Value::Object(obj).to_string()
        };
        let mut proto = serde_json::to_value(&self.protocol).expect("serializes");
        proto["fingerprint"] = self.fingerprint.clone().into();
        let _ = writeln!(out, "{}", line("protocol", proto));
        for d in &self.datasets {
            let _ = writeln!(out, "{}", line("dataset", serde_json::to_value(d).expect("serializes")));
        }
        let _ = writeln!(
            out,
            "{}",
            line("average", serde_json::to_value(self.average).expect("serializes"))
        );
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .datasets
            .iter()
            .map(|d| d.name.len())
            .chain([7])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7}  {:>9}  {:>9}  {:>9}  {:>9}",
            "dataset", "series", "skipped", "mse", "mae", "naive_mse", "naive_mae"
        );
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>7}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
                d.name, d.n_series, d.n_skipped, d.mse, d.mae, d.baseline_mse, d.baseline_mae
            );
        }
        let a = &self.average;
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            "Average", "", "", a.mse, a.mae, a.baseline_mse, a.baseline_mae
        );
        let _ = writeln!(
            out,
            "context {} horizon {}; {}; {}; fusion {:?}; naive = {}",
            self.protocol.context_length,
            self.protocol.horizon,
            self.protocol.normalization,
            self.protocol.windows,
            self.protocol.fusion,
            self.protocol.baseline
        );
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_RECORDS_FILE), self.to_records())?;
        std::fs::write(dir.join(REPORT_TABLE_FILE), self.to_table())?;
        Ok(())
    }
}

/// SHA-256 over the model configuration and evaluation protocol.
pub fn fingerprint(model: &ModelConfig, protocol: &Protocol) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("serializes"));
    h.update(serde_json::to_vec(protocol).expect("serializes"));
    hex::encode(h.finalize())
}
