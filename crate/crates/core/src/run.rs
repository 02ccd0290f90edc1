//! Pipeline entry points behind the command-line tool.
//!
//! A run is described by a TOML file:
//!
//! ```toml
//! profile = "tiny"        # "full" (default) or "tiny": base model settings
//! seed = 7                # optional; overrides model.seed and train.seed
//!
//! [model]                 # any ModelConfig field, applied over the profile
//! top_k_attention = 10
//!
//! [train]                 # any TrainConfig field
//! total_steps = 2000
//! batch_size = 32
//!
//! [eval]
//! context_length = 512
//! horizon = 96
//! normalize = true
//! fusion = "time"         # or "mean"
//!
//! [data]
//! window = 4096
//! [data.ingest]           # column / field mapping
//! value_field = "value"
//! ```
//!
//! The fully resolved configuration is written next to every output as
//! `run_config.toml`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_windows, ingest, read_corpus, write_corpus, CorpusManifest, IngestFormat,
    IngestOptions, PreprocessStats, WINDOW_LENGTH,
};
use crate::error::{Error, Result};
use crate::evalbench::{rollout, run_benchmark, EvalTask, ForecastReport, Fusion};
use crate::model::{count_params, forward, ModelConfig, ParamCount};
use crate::train::{load_checkpoint, prepare_sample, train_loop, TrainConfig, TrainOutcome};
use crate::wavelet::build_filter_bank;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub context_length: usize,
    pub horizon: usize,
    pub normalize: bool,
    pub fusion: Fusion,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            context_length: 512,
            horizon: 96,
            normalize: true,
            fusion: Fusion::Time,
        }
    }
}

impl EvalSettings {
    pub fn task(&self) -> EvalTask {
        EvalTask {
            dataset: String::new(),
            context_length: self.context_length,
            horizon: self.horizon,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub window: usize,
    pub ingest: IngestOptions,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            window: WINDOW_LENGTH,
            ingest: IngestOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile("full").expect("built-in profile")
    }
}

fn profile_model(name: &str) -> Result<ModelConfig> {
    match name {
        "full" => Ok(ModelConfig::full()),
        "tiny" => Ok(ModelConfig::tiny()),
        other => Err(Error::config(format!(
            "unknown profile {other:?} (expected full or tiny)"
        ))),
    }
}

/// Training defaults that fit a profile: the full-scale schedule for full,
/// a desk-scale run for tiny.
fn profile_train(name: &str) -> TrainConfig {
    match name {
        "tiny" => TrainConfig {
            base_lr: 1e-3,
            batch_size: 32,
            total_steps: 2000,
            log_interval: 10,
            checkpoint_interval: 500,
            ..TrainConfig::default()
        },
        _ => TrainConfig::default(),
    }
}

impl RunConfig {
    pub fn for_profile(name: &str) -> Result<Self> {
        let model = profile_model(name)?;
        Ok(RunConfig {
            profile: name.to_string(),
            seed: model.seed,
            model,
            train: profile_train(name),
            eval: EvalSettings::default(),
            data: DataSettings::default(),
        })
    }

    /// Parses a config file body: profile defaults, then the file's tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        let profile = match user.remove("profile") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::config("profile must be a string")),
            None => "full".to_string(),
        };
        let seed = match user.remove("seed") {
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(_) => return Err(Error::config("seed must be a non-negative integer")),
            None => None,
        };
        let explicit = |section: &str| {
            user.get(section)
                .and_then(|t| t.as_table())
                .is_some_and(|t| t.contains_key("seed"))
        };
        let (model_seed, train_seed) = (explicit("model"), explicit("train"));
        let base = RunConfig::for_profile(&profile)?;
        let mut merged = toml::Table::try_from(&base).expect("config serializes");
        for (key, value) in user {
            match (merged.get_mut(&key), value) {
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
                (Some(_), _) => {
                    return Err(Error::config(format!("[{key}] must be a table")));
                }
                (None, _) => return Err(Error::config(format!("unknown config section {key:?}"))),
            }
        }
        let mut config: RunConfig = merged
            .try_into()
            .map_err(|e| Error::config(format!("config file: {e}")))?;
        // The top-level seed fills in wherever a section does not set its own.
        match seed {
            Some(s) => {
                config.seed = s;
                if !model_seed {
                    config.model.seed = s;
                }
                if !train_seed {
                    config.train.seed = s;
                }
            }
            None => config.seed = config.train.seed,
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.task().validate(self.model.patch_length)?;
        if self.data.window < 2 {
            return Err(Error::config("data.window must be at least 2"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), self.to_toml())?;
        Ok(())
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessSummary {
    pub stats: PreprocessStats,
    pub manifest: CorpusManifest,
}

impl PreprocessSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} windows accepted, {} rejected\n",
            self.stats.accepted(),
            self.stats.rejected()
        );
        for (domain, s) in &self.stats.domains {
            let reasons: Vec<String> = s.rejected.iter().map(|(r, n)| format!("{r}={n}")).collect();
            out.push_str(&format!(
                "  {domain}: series {} | accepted {} (full {}, packed {}) | rejected {}{}\n",
                s.series,
                s.accepted(),
                s.full_windows,
                s.packed_windows,
                s.rejected_total(),
                if reasons.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", reasons.join(", "))
                }
            ));
        }
        out
    }
}

/// Ingests every file of `format` (all supported formats when `None`) under
/// `input`, builds windows and writes the corpus.
pub fn preprocess(
    input: &Path,
    format: Option<IngestFormat>,
    out: &Path,
    settings: &DataSettings,
) -> Result<PreprocessSummary> {
    let mut files: Vec<(PathBuf, IngestFormat)> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| IngestFormat::from_path(&p).map(|f| (p, f)))
        .filter(|(_, f)| format.is_none_or(|want| *f == want))
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    if files.is_empty() {
        return Err(Error::NoSeries(format!(
            "{} has no matching input files",
            input.display()
        )));
    }
    let mut streams = Vec::new();
    for (p, f) in &files {
        streams.push(ingest(p, *f, &settings.ingest)?);
    }
    let mut seen = 0usize;
    let series = streams.into_iter().flatten().inspect(|_| seen += 1);
    let (windows, stats) = build_windows(series, settings.window)?;
    if seen == 0 {
        return Err(Error::NoSeries(format!("{} contains no series", input.display())));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let manifest = write_corpus(&windows, out)?;
    Ok(PreprocessSummary { stats, manifest })
}

/// Trains on a corpus file; checkpoints, the loss log and the resolved
/// config go to `out_dir`.
pub fn train(
    corpus: &Path,
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (_, windows) = read_corpus(corpus)?;
    config.save(out_dir)?;
    let state = match resume {
        Some(p) => Some(crate::train::load_checkpoint_for(p, &config.model)?),
        None => None,
    };
    train_loop(&windows, &config.model, &config.train, state, Some(out_dir))
}

pub fn evaluate(
    checkpoint: &Path,
    data_dir: &Path,
    eval: &EvalSettings,
    report_dir: &Path,
    plots: bool,
) -> Result<ForecastReport> {
    let (model, state) = load_checkpoint(checkpoint)?;
    let plot_dir = plots.then(|| report_dir.join("plots"));
    let report = run_benchmark(
        &state.weights,
        &model,
        data_dir,
        &eval.task(),
        eval.fusion,
        plot_dir.as_deref(),
    )?;
    report.write(report_dir)?;
    let mut run = RunConfig::for_profile("full")?;
    run.profile = "checkpoint".into();
    run.model = model;
    run.seed = run.model.seed;
    run.eval = eval.clone();
    run.save(report_dir)?;
    Ok(report)
}

/// Forecast for the last `context_length` values of a single series.
/// `column` selects a CSV column; by default `value`, else the first numeric one.
pub fn forecast(
    checkpoint: &Path,
    series_file: &Path,
    column: Option<&str>,
    eval: &EvalSettings,
    plot: Option<&Path>,
) -> Result<Vec<f64>> {
    let (model, state) = load_checkpoint(checkpoint)?;
    eval.task().validate(model.patch_length)?;
    let columns = crate::evalbench::read_dataset_csv(series_file)?;
    let want = column.unwrap_or("value");
    let (name, values) = columns
        .iter()
        .find(|(n, _)| n == want)
        .or_else(|| if column.is_none() { columns.first() } else { None })
        .ok_or_else(|| Error::NoSeries(format!("no column {want:?} in {}", series_file.display())))?;
    let c = eval.context_length;
    if values.len() < c {
        return Err(Error::InvalidLength(format!(
            "series {name} has {} values, context needs {c}",
            values.len()
        )));
    }
    let context = &values[values.len() - c..];
    let f = rollout(&state.weights, &model, context, eval.horizon, eval.fusion)?;
    if let Some(path) = plot {
        let hist = &context[c.saturating_sub(2 * eval.horizon)..];
        crate::evalbench::plot::write_svg(
            path,
            name,
            &[
                crate::evalbench::plot::Line {
                    label: "history",
                    color: "#888888",
                    start: 0,
                    values: hist,
                },
                crate::evalbench::plot::Line {
                    label: "forecast",
                    color: "#d62728",
                    start: hist.len(),
                    values: &f.values,
                },
            ],
        )?;
    }
    Ok(f.values)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingStats {
    pub windows: usize,
    /// `[layer][expert]` share of routed selections.
    pub frequency: Vec<Vec<f64>>,
    /// Mean entropy (nats) of the selected-expert gates per layer.
    pub gate_entropy: Vec<f64>,
    /// Entropy (nats) of each layer's expert-usage distribution.
    pub usage_entropy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamCount,
    pub stored_params: usize,
    pub routing: Option<RoutingStats>,
}

impl InspectReport {
    /// Counts for a configuration alone, without instantiating weights.
    pub fn from_config(config: ModelConfig) -> Self {
        let params = count_params(&config);
        InspectReport {
            stored_params: params.total,
            step: 0,
            config,
            params,
            routing: None,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("config:\n");
        for (k, v) in self.config.to_kv() {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        out.push_str(&format!("step: {}\n", self.step));
        out.push_str("parameters:\n");
        for (name, n) in &self.params.blocks {
            out.push_str(&format!("  {name:<28} {n:>12}\n"));
        }
        out.push_str(&format!(
            "  {:<28} {:>12}\n  {:<28} {:>12}\n  shared expert: {}\n",
            "total",
            self.params.total,
            "activated per token",
            self.params.activated,
            if self.config.use_shared_expert { "on" } else { "off" }
        ));
        if let Some(r) = &self.routing {
            out.push_str(&format!("routing over {} windows:\n", r.windows));
            for (l, freq) in r.frequency.iter().enumerate() {
                let cells: Vec<String> = freq.iter().map(|f| format!("{f:.3}")).collect();
                out.push_str(&format!(
                    "  layer {l}: [{}] gate entropy {:.4} usage entropy {:.4}\n",
                    cells.join(", "),
                    r.gate_entropy[l],
                    r.usage_entropy[l]
                ));
            }
        }
        out
    }
}

const INSPECT_MAX_WINDOWS: usize = 64;

pub fn inspect(
    checkpoint: &Path,
    corpus: Option<&Path>,
    context_length: usize,
) -> Result<InspectReport> {
    let (config, state) = load_checkpoint(checkpoint)?;
    let params = count_params(&config);
    let routing = match corpus {
        None => None,
        Some(path) => {
            let (_, windows) = read_corpus(path)?;
            let bank = build_filter_bank(&config.wavelet)?;
            let (l, e) = (config.n_layers, config.n_experts);
            let mut counts = vec![vec![0usize; e]; l];
            let mut entropy = vec![0.0; l];
            let mut tokens = 0usize;
            let mut used = 0usize;
            for w in windows.iter().take(INSPECT_MAX_WINDOWS) {
                if w.values.len() < context_length {
                    continue;
                }
                let values = &w.values_f64()[..context_length];
                let (seq, _) = match prepare_sample(values, &w.mask[..context_length], &bank, config.patch_length) {
                    Ok(x) => x,
                    Err(Error::DegenerateWindow) => continue,
                    Err(err) => return Err(err),
                };
                let trace = forward(&seq, &state.weights, &config)?;
                used += 1;
                for (layer, routes) in trace.router_assignments.iter().enumerate() {
                    for r in routes {
                        for (&x, &g) in r.experts.iter().zip(&r.gates) {
                            counts[layer][x] += 1;
                            if g > 0.0 {
                                entropy[layer] -= g * g.ln();
                            }
                        }
                    }
                }
                tokens += trace.router_assignments.first().map_or(0, |r| r.len());
            }
            let frequency: Vec<Vec<f64>> = counts
                .iter()
                .map(|c| {
                    let total = c.iter().sum::<usize>().max(1) as f64;
                    c.iter().map(|&n| n as f64 / total).collect()
                })
                .collect();
            let usage_entropy = frequency
                .iter()
                .map(|f| f.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
                .collect();
            Some(RoutingStats {
                windows: used,
                gate_entropy: entropy.iter().map(|h| h / tokens.max(1) as f64).collect(),
                usage_entropy,
                frequency,
            })
        }
    };
    Ok(InspectReport {
        stored_params: state.weights.num_params(),
        step: state.step,
        config,
        params,
        routing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_and_overrides() {
        let c = RunConfig::from_toml(
            "profile = \"tiny\"\nseed = 9\n[model]\ntop_k_attention = 3\n[train]\ntotal_steps = 5\n",
        )
        .unwrap();
        assert_eq!(c.model.hidden_size, ModelConfig::tiny().hidden_size);
        assert_eq!(c.model.top_k_attention, 3);
        assert_eq!(c.train.total_steps, 5);
        assert_eq!((c.model.seed, c.train.seed), (9, 9));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);

        let c = RunConfig::from_toml("seed = 4\n[model]\nseed = 2\n").unwrap();
        assert_eq!((c.seed, c.model.seed, c.train.seed), (4, 2, 4));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn defaults_are_full() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.model, ModelConfig::full());
        assert_eq!(c.train.batch_size, 128);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(RunConfig::from_toml("[model]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nope]\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("profile = \"huge\"\n"), Err(Error::Config(_))));
    }
}
