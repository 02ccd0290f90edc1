use serde::{Deserialize, Serialize};
use std::fmt;

/// Absolute values below this count as zero for every filter stage.
pub const NEAR_ZERO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Missing,
    NearZero,
    LowVariability,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Missing => "missing",
            RejectReason::NearZero => "near_zero",
            RejectReason::LowVariability => "low_variability",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// `count / total > 0.2`, evaluated exactly in integers.
fn exceeds_fifth(count: usize, total: usize) -> bool {
    total > 0 && count * 5 > total
}

fn near_zero(x: f64) -> bool {
    x.abs() < NEAR_ZERO
}

/// Three-stage window filter on raw values, first failure wins:
/// missing share, near-zero share, then near-zero share of first or second
/// differences (only over spans without missing values).
pub fn quality_filter(values: &[f64]) -> Verdict {
    let n = values.len();
    let missing = values.iter().filter(|v| !v.is_finite()).count();
    if exceeds_fifth(missing, n) {
        return Verdict::Reject(RejectReason::Missing);
    }
    let zeros = values.iter().filter(|&&v| near_zero(v)).count();
    if exceeds_fifth(zeros, n) {
        return Verdict::Reject(RejectReason::NearZero);
    }
    let (mut d1_total, mut d1_flat) = (0, 0);
    for w in values.windows(2) {
        if w.iter().all(|v| v.is_finite()) {
            d1_total += 1;
            d1_flat += near_zero(w[1] - w[0]) as usize;
        }
    }
    let (mut d2_total, mut d2_flat) = (0, 0);
    for w in values.windows(3) {
        if w.iter().all(|v| v.is_finite()) {
            d2_total += 1;
            d2_flat += near_zero(w[2] - 2.0 * w[1] + w[0]) as usize;
        }
    }
    if exceeds_fifth(d1_flat, d1_total) || exceeds_fifth(d2_flat, d2_total) {
        return Verdict::Reject(RejectReason::LowVariability);
    }
    Verdict::Accept
}

/// NaN/Inf become 0 with mask 0; exact zeros keep 0 with mask 0.
pub fn impute_and_mask(values: &[f64]) -> (Vec<f64>, Vec<bool>) {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() || v == 0.0 {
                (0.0, false)
            } else {
                (v, true)
            }
        })
        .unzip()
}
