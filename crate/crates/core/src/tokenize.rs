//! Dual-path tokenization: fixed-length time patches plus wavelet patches
//! that share the same patch index.
//!
//! Wavelet patch `j` is the concatenation of the level-2 pyramid bands
//! restricted to the span of time patch `j`:
//!
//! ```text
//! [ cD1[jP/2 .. jP/2 + P/2) | cD2[jP/4 .. jP/4 + P/4) | cA2[jP/4 .. jP/4 + P/4) ]
//! ```
//!
//! so each wavelet token has exactly `P` raw values, like a time token.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::wavelet::{dwt_multi, CoefficientPyramid, FilterBank};

pub const STD_FLOOR: f64 = 1e-8;
pub const WAVELET_LEVELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Z-scores `window` using statistics of the mask-valid positions only.
/// Masked positions come out as 0.
pub fn instance_normalize(window: &[f64], mask: &[bool]) -> Result<(Vec<f64>, NormStats)> {
    if window.len() != mask.len() {
        return Err(Error::contract(format!(
            "window length {} != mask length {}",
            window.len(),
            mask.len()
        )));
    }
    let valid: Vec<f64> = window
        .iter()
        .zip(mask)
        .filter_map(|(&x, &m)| m.then_some(x))
        .collect();
    if valid.is_empty() {
        return Err(Error::DegenerateWindow);
    }
    let count = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / count;
    let var = valid.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
    let stats = NormStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    };
    let normalized = window
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { stats.normalize(x) } else { 0.0 })
        .collect();
    Ok((normalized, stats))
}

pub fn patchify_time(series: &[f64], patch_length: usize) -> Result<Array2<f64>> {
    if patch_length == 0 || series.is_empty() || series.len() % patch_length != 0 {
        return Err(Error::InvalidLength(format!(
            "series length {} is not a positive multiple of patch length {patch_length}",
            series.len()
        )));
    }
    let n = series.len() / patch_length;
    Ok(Array2::from_shape_vec((n, patch_length), series.to_vec()).expect("shape checked"))
}

pub fn patchify_wavelet(pyramid: &CoefficientPyramid, patch_length: usize) -> Result<Array2<f64>> {
    if pyramid.levels != WAVELET_LEVELS {
        return Err(Error::AlignmentUnsupported(format!(
            "wavelet patches need a level-{WAVELET_LEVELS} pyramid, got level {}",
            pyramid.levels
        )));
    }
    if patch_length == 0 || patch_length % 4 != 0 {
        return Err(Error::AlignmentUnsupported(format!(
            "patch length {patch_length} is not a multiple of 4"
        )));
    }
    pyramid.validate()?;
    if pyramid.original_length % patch_length != 0 {
        return Err(Error::AlignmentUnsupported(format!(
            "pyramid over {} values does not split into patches of {patch_length}",
            pyramid.original_length
        )));
    }
    let n = pyramid.original_length / patch_length;
    let (half, quarter) = (patch_length / 2, patch_length / 4);
    let cd1 = pyramid.detail(1);
    let cd2 = pyramid.detail(2);
    let ca2 = &pyramid.approx;
    let mut out = Array2::zeros((n, patch_length));
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("standard layout");
        row[..half].copy_from_slice(&cd1[j * half..(j + 1) * half]);
        row[half..half + quarter].copy_from_slice(&cd2[j * quarter..(j + 1) * quarter]);
        row[half + quarter..].copy_from_slice(&ca2[j * quarter..(j + 1) * quarter]);
    }
    Ok(out)
}

/// Inverse of [`patchify_wavelet`]: scatters patch rows back into a pyramid.
pub fn unpatchify_wavelet(patches: &Array2<f64>) -> Result<CoefficientPyramid> {
    let (n, p) = patches.dim();
    if p == 0 || p % 4 != 0 {
        return Err(Error::AlignmentUnsupported(format!(
            "patch length {p} is not a multiple of 4"
        )));
    }
    let (half, quarter) = (p / 2, p / 4);
    let mut pyramid = CoefficientPyramid::zeros(n * p, WAVELET_LEVELS)?;
    for (j, row) in patches.outer_iter().enumerate() {
        let row: Vec<f64> = row.to_vec();
        pyramid.detail_mut(1)[j * half..(j + 1) * half].copy_from_slice(&row[..half]);
        pyramid.detail_mut(2)[j * quarter..(j + 1) * quarter]
            .copy_from_slice(&row[half..half + quarter]);
        pyramid.approx[j * quarter..(j + 1) * quarter].copy_from_slice(&row[half + quarter..]);
    }
    Ok(pyramid)
}

/// Paired token streams over one context.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTokenSequence {
    pub time_patches: Array2<f64>,
    pub wavelet_patches: Array2<f64>,
    /// `true` where the underlying value was observed.
    pub patch_mask: Array2<bool>,
    pub n_patches: usize,
    pub patch_length: usize,
}

/// Checks the context-length alignment contract `C mod 4P == 0`.
pub fn check_context_alignment(context: usize, patch_length: usize) -> Result<()> {
    if patch_length == 0 || patch_length % 4 != 0 {
        return Err(Error::AlignmentUnsupported(format!(
            "patch length {patch_length} is not a multiple of 4"
        )));
    }
    let block = 4 * patch_length;
    if context == 0 || context % block != 0 {
        return Err(Error::AlignmentUnsupported(format!(
            "context length {context} is not a positive multiple of {block} (4 x patch length)"
        )));
    }
    Ok(())
}

/// Builds both token streams from an already-normalized series.
pub fn tokenize(
    series: &[f64],
    mask: &[bool],
    bank: &FilterBank,
    patch_length: usize,
) -> Result<AlignedTokenSequence> {
    check_context_alignment(series.len(), patch_length)?;
    if mask.len() != series.len() {
        return Err(Error::contract("mask length differs from series length"));
    }
    let time_patches = patchify_time(series, patch_length)?;
    let pyramid = dwt_multi(series, bank, WAVELET_LEVELS)?;
    let wavelet_patches = patchify_wavelet(&pyramid, patch_length)?;
    let n = time_patches.nrows();
    let patch_mask =
        Array2::from_shape_vec((n, patch_length), mask.to_vec()).expect("shape checked");
    Ok(AlignedTokenSequence {
        time_patches,
        wavelet_patches,
        patch_mask,
        n_patches: n,
        patch_length,
    })
}

/// Shift-by-one supervision for both heads.
///
/// The time mask is element-wise. A wavelet target row is supervised only when
/// its time patch has at least one observed value, since coefficients do not
/// map one-to-one onto time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub time: Array2<f64>,
    pub wavelet: Array2<f64>,
    pub time_mask: Array2<bool>,
    pub wavelet_mask: Array2<bool>,
}

pub fn make_training_targets(tokens: &AlignedTokenSequence) -> Result<Targets> {
    let n = tokens.n_patches;
    if n < 2 {
        return Err(Error::InsufficientContext(n));
    }
    let time = tokens.time_patches.slice(s![1.., ..]).to_owned();
    let wavelet = tokens.wavelet_patches.slice(s![1.., ..]).to_owned();
    let time_mask = tokens.patch_mask.slice(s![1.., ..]).to_owned();
    let mut wavelet_mask = Array2::from_elem(time_mask.dim(), false);
    for (src, mut dst) in time_mask.outer_iter().zip(wavelet_mask.outer_iter_mut()) {
        let any = src.iter().any(|&m| m);
        dst.fill(any);
    }
    Ok(Targets {
        time,
        wavelet,
        time_mask,
        wavelet_mask,
    })
}
