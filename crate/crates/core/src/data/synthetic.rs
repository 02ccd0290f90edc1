//! Mixed-frequency sinusoid generator with additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_series: usize,
    pub length: usize,
    pub max_components: usize,
    pub min_period: f64,
    pub max_period: f64,
    /// Noise std as a fraction of the clean signal's std.
    pub noise: f64,
    pub domain: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_series: 200,
            length: 4096,
            max_components: 3,
            min_period: 8.0,
            max_period: 96.0,
            noise: 0.05,
            domain: "synthetic".into(),
            seed: 0,
        }
    }
}

pub fn mixed_sinusoid<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Vec<f64> {
    let k = rng.random_range(1..=config.max_components.max(1));
    let comps: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let period = rng.random_range(config.min_period..=config.max_period);
            let amp = rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (period, amp, phase)
        })
        .collect();
    let level = rng.random_range(-2.0..2.0);
    let clean: Vec<f64> = (0..config.length)
        .map(|t| {
            level
                + comps
                    .iter()
                    .map(|&(p, a, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                    .sum::<f64>()
        })
        .collect();
    let n = clean.len().max(1) as f64;
    let mean = clean.iter().sum::<f64>() / n;
    let std = (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if config.noise <= 0.0 || std == 0.0 {
        return clean;
    }
    let noise = Normal::new(0.0, config.noise * std).expect("finite positive std");
    clean.into_iter().map(|v| v + noise.sample(rng)).collect()
}

pub fn generate(config: &SyntheticConfig) -> Vec<RawSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_series)
        .map(|i| RawSeries {
            id: format!("{}-{i}", config.domain),
            domain: config.domain.clone(),
            values: mixed_sinusoid(config, &mut rng),
        })
        .collect()
}
