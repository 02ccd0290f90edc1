//! Periodized biorthogonal discrete wavelet transform.
//!
//! Filters are stored with an explicit start index so that the analysis
//! correlation `a[k] = sum_m h[m] * x[(2k + m) mod N]` and its synthesis
//! adjoint line up exactly. With circular boundaries every level halves the
//! length, which is what the patch alignment in [`crate::tokenize`] relies on.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A finite filter supported on `start .. start + taps.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub taps: Vec<f64>,
    pub start: isize,
}

impl Filter {
    fn new(taps: Vec<f64>, start: isize) -> Self {
        Self { taps, start }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    fn coefficient(&self, index: isize) -> f64 {
        let offset = index - self.start;
        if offset < 0 || offset as usize >= self.taps.len() {
            0.0
        } else {
            self.taps[offset as usize]
        }
    }

    /// Quadrature mirror: `out[n] = (-1)^n * self[1 - n]`.
    fn alternating_flip(&self) -> Filter {
        let end = self.start + self.taps.len() as isize - 1;
        let start = 1 - end;
        let taps = (0..self.taps.len() as isize)
            .map(|i| {
                let n = start + i;
                let sign = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                sign * self.coefficient(1 - n)
            })
            .collect();
        Filter::new(taps, start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WaveletFamily {
    Haar,
    Bior22,
}

impl WaveletFamily {
    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Bior22 => "bior2.2",
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(WaveletFamily::Haar),
            "bior2.2" => Ok(WaveletFamily::Bior22),
            other => Err(Error::UnsupportedWavelet(other.to_string())),
        }
    }
}

/// Analysis/synthesis filter quadruple for one wavelet family.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub family: WaveletFamily,
    pub analysis_low: Filter,
    pub analysis_high: Filter,
    pub synthesis_low: Filter,
    pub synthesis_high: Filter,
}

impl FilterBank {
    pub fn new(family: WaveletFamily) -> Self {
        let (analysis_low, synthesis_low) = match family {
            WaveletFamily::Haar => {
                let h = 1.0 / SQRT_2;
                (Filter::new(vec![h, h], 0), Filter::new(vec![h, h], 0))
            }
            // CDF 5/3 spline pair.
            WaveletFamily::Bior22 => (
                Filter::new(
                    [-0.125, 0.25, 0.75, 0.25, -0.125]
                        .iter()
                        .map(|c| c * SQRT_2)
                        .collect(),
                    -2,
                ),
                Filter::new([0.25, 0.5, 0.25].iter().map(|c| c * SQRT_2).collect(), -1),
            ),
        };
        let analysis_high = synthesis_low.alternating_flip();
        let synthesis_high = analysis_low.alternating_flip();
        Self {
            family,
            analysis_low,
            analysis_high,
            synthesis_low,
            synthesis_high,
        }
    }

    /// Longest filter support, used for leakage bounds in alignment checks.
    pub fn max_filter_length(&self) -> usize {
        [
            &self.analysis_low,
            &self.analysis_high,
            &self.synthesis_low,
            &self.synthesis_high,
        ]
        .iter()
        .map(|f| f.len())
        .max()
        .unwrap_or(0)
    }
}

pub fn build_filter_bank(name: &str) -> Result<FilterBank> {
    Ok(FilterBank::new(name.parse()?))
}

/// Multi-level decomposition, coarsest band first: `details = [cD_L, ..., cD_1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPyramid {
    pub levels: usize,
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub original_length: usize,
}

impl CoefficientPyramid {
    pub fn zeros(original_length: usize, levels: usize) -> Result<Self> {
        check_divisible(original_length, levels)?;
        Ok(Self {
            levels,
            approx: vec![0.0; original_length >> levels],
            details: (0..levels)
                .map(|i| vec![0.0; original_length >> (levels - i)])
                .collect(),
            original_length,
        })
    }

    /// Detail band at decomposition level `level` (1 = finest).
    pub fn detail(&self, level: usize) -> &[f64] {
        &self.details[self.levels - level]
    }

    pub fn detail_mut(&mut self, level: usize) -> &mut [f64] {
        let idx = self.levels - level;
        &mut self.details[idx]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedPyramid(msg));
        if self.levels == 0 || self.details.len() != self.levels {
            return bad(format!(
                "{} detail bands for {} levels",
                self.details.len(),
                self.levels
            ));
        }
        if self.original_length % (1 << self.levels) != 0 {
            return bad(format!(
                "original length {} not divisible by 2^{}",
                self.original_length, self.levels
            ));
        }
        let expected = self.original_length >> self.levels;
        if self.approx.len() != expected {
            return bad(format!(
                "approximation has {} coefficients, expected {expected}",
                self.approx.len()
            ));
        }
        for (i, band) in self.details.iter().enumerate() {
            let expected = self.original_length >> (self.levels - i);
            if band.len() != expected {
                return bad(format!(
                    "detail level {} has {} coefficients, expected {expected}",
                    self.levels - i,
                    band.len()
                ));
            }
        }
        Ok(())
    }
}

fn check_divisible(len: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidLength("levels must be at least 1".into()));
    }
    if len == 0 || levels >= usize::BITS as usize || len % (1usize << levels) != 0 {
        return Err(Error::InvalidLength(format!(
            "signal length {len} is not a positive multiple of 2^{levels}"
        )));
    }
    Ok(())
}

/// One analysis level: circular correlation with the analysis filters, then
/// keep even phases.
pub fn dwt_step(signal: &[f64], bank: &FilterBank) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = signal.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidLength(format!(
            "single-level transform needs an even, non-empty signal (got {n})"
        )));
    }
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    let ni = n as isize;
    for k in 0..half {
        let base = 2 * k as isize;
        approx[k] = correlate(signal, &bank.analysis_low, base, ni);
        detail[k] = correlate(signal, &bank.analysis_high, base, ni);
    }
    Ok((approx, detail))
}

fn correlate(signal: &[f64], filter: &Filter, base: isize, n: isize) -> f64 {
    filter
        .taps
        .iter()
        .enumerate()
        .map(|(i, &c)| c * signal[(base + filter.start + i as isize).rem_euclid(n) as usize])
        .sum()
}

/// Inverse of [`dwt_step`].
pub fn idwt_step(approx: &[f64], detail: &[f64], bank: &FilterBank) -> Result<Vec<f64>> {
    if approx.len() != detail.len() || approx.is_empty() {
        return Err(Error::MalformedPyramid(format!(
            "approximation/detail lengths {} and {} do not pair",
            approx.len(),
            detail.len()
        )));
    }
    let n = 2 * approx.len();
    let ni = n as isize;
    let mut out = vec![0.0; n];
    for (k, (&a, &d)) in approx.iter().zip(detail).enumerate() {
        let base = 2 * k as isize;
        scatter(&mut out, &bank.synthesis_low, base, ni, a);
        scatter(&mut out, &bank.synthesis_high, base, ni, d);
    }
    Ok(out)
}

fn scatter(out: &mut [f64], filter: &Filter, base: isize, n: isize, value: f64) {
    for (i, &c) in filter.taps.iter().enumerate() {
        out[(base + filter.start + i as isize).rem_euclid(n) as usize] += c * value;
    }
}

pub fn dwt_multi(signal: &[f64], bank: &FilterBank, levels: usize) -> Result<CoefficientPyramid> {
    check_divisible(signal.len(), levels)?;
    let mut approx = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = dwt_step(&approx, bank)?;
        details.push(d);
        approx = a;
    }
    details.reverse();
    Ok(CoefficientPyramid {
        levels,
        approx,
        details,
        original_length: signal.len(),
    })
}

pub fn idwt_multi(pyramid: &CoefficientPyramid, bank: &FilterBank) -> Result<Vec<f64>> {
    pyramid.validate()?;
    let mut signal = pyramid.approx.clone();
    for detail in &pyramid.details {
        signal = idwt_step(&signal, detail, bank)?;
    }
    Ok(signal)
}
