//! Forecast rollout, metrics, naive baselines and the benchmark harness.

pub mod bench;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod rollout;

pub use bench::{evaluate_series, read_dataset_csv, run_benchmark, EvalTask, SeriesResult};
pub use metrics::{metrics, naive_baselines, persistence, seasonal_naive, Baselines};
pub use report::{Averages, DatasetResult, ForecastReport, Protocol};
pub use rollout::{rollout, Forecast, Fusion};
