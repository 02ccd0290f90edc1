use serde::Serialize;

use crate::error::{Error, Result};

/// `(mse, mae)` of `forecast` against `truth`.
pub fn metrics(forecast: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if forecast.len() != truth.len() {
        return Err(Error::contract(format!(
            "forecast length {} != truth length {}",
            forecast.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::contract("metrics of an empty forecast"));
    }
    let n = truth.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (f, t) in forecast.iter().zip(truth) {
        let e = f - t;
        se += e * e;
        ae += e.abs();
    }
    Ok((se / n, ae / n))
}

pub fn persistence(context: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *context
        .last()
        .ok_or_else(|| Error::contract("persistence needs a non-empty context"))?;
    Ok(vec![last; horizon])
}

/// Repeats the last `season` context values cyclically.
pub fn seasonal_naive(context: &[f64], horizon: usize, season: usize) -> Result<Vec<f64>> {
    if season == 0 || season > context.len() {
        return Err(Error::contract(format!(
            "season {season} must lie in 1..={}",
            context.len()
        )));
    }
    let tail = &context[context.len() - season..];
    Ok((0..horizon).map(|h| tail[h % season]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baselines {
    pub persistence: Vec<f64>,
    pub seasonal_naive: Vec<f64>,
    pub season: usize,
}

pub fn naive_baselines(context: &[f64], horizon: usize, season: usize) -> Result<Baselines> {
    Ok(Baselines {
        persistence: persistence(context, horizon)?,
        seasonal_naive: seasonal_naive(context, horizon, season)?,
        season,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_cases() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(metrics(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), (1.0, 1.0));
        assert_eq!(metrics(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), (2.5, 1.5));
        assert!(matches!(metrics(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn baselines() {
        let ctx = [1.0, 2.0, 7.0];
        assert_eq!(persistence(&ctx, 96).unwrap(), vec![7.0; 96]);
        let periodic: Vec<f64> = (0..240).map(|t| ((t % 24) as f64).sqrt()).collect();
        let future: Vec<f64> = (240..336).map(|t| ((t % 24) as f64).sqrt()).collect();
        let b = naive_baselines(&periodic, 96, 24).unwrap();
        assert_eq!(metrics(&b.seasonal_naive, &future).unwrap().0, 0.0);
        assert!(matches!(seasonal_naive(&ctx, 4, 5), Err(Error::Contract(_))));
    }
}
