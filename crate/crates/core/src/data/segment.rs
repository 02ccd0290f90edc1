//! Window segmentation and first-fit-decreasing sequence packing.

use serde::{Deserialize, Serialize};

pub const WINDOW_LENGTH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub id: String,
    pub domain: String,
    pub values: Vec<f64>,
}

/// A piece of a series too short to fill a window on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub source_id: String,
    pub values: Vec<f64>,
}

/// Raw (pre-imputation) contents of a window candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub values: Vec<f64>,
    /// Offsets where one fragment ends and the next (or zero fill) begins.
    pub fragment_boundaries: Vec<u32>,
    pub source_ids: Vec<String>,
    /// Number of trailing zero-fill positions.
    pub fill: usize,
}

/// Non-overlapping stride-`window` split; the tail becomes a fragment.
pub fn segment_series(series: &RawSeries, window: usize) -> (Vec<RawWindow>, Vec<Fragment>) {
    assert!(window >= 2, "window length must be at least 2");
    let chunks = series.values.chunks_exact(window);
    let tail = chunks.remainder();
    let windows = chunks
        .map(|c| RawWindow {
            values: c.to_vec(),
            fragment_boundaries: Vec::new(),
            source_ids: vec![series.id.clone()],
            fill: 0,
        })
        .collect();
    let fragments = if tail.is_empty() {
        Vec::new()
    } else {
        vec![Fragment {
            source_id: series.id.clone(),
            values: tail.to_vec(),
        }]
    };
    (windows, fragments)
}

/// Packs fragments into windows. Bins that end up less than half full are
/// dropped; other partial bins are zero-filled.
pub fn pack_fragments(pool: Vec<Fragment>, window: usize) -> Vec<RawWindow> {
    let mut pool: Vec<Fragment> = pool
        .into_iter()
        .flat_map(|f| {
            // oversized fragments are cut to window-sized pieces first
            f.values
                .chunks(window)
                .map(|c| Fragment {
                    source_id: f.source_id.clone(),
                    values: c.to_vec(),
                })
                .collect::<Vec<_>>()
        })
        .filter(|f| !f.values.is_empty())
        .collect();
    // stable sort keeps input order among equal lengths
    pool.sort_by(|a, b| b.values.len().cmp(&a.values.len()));

    let mut bins: Vec<Vec<Fragment>> = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for frag in pool {
        let len = frag.values.len();
        match used.iter().position(|&u| u + len <= window) {
            Some(b) => {
                used[b] += len;
                bins[b].push(frag);
            }
            None => {
                used.push(len);
                bins.push(vec![frag]);
            }
        }
    }

    bins.into_iter()
        .zip(used)
        .filter(|&(_, u)| 2 * u >= window)
        .map(|(bin, u)| {
            let mut values = Vec::with_capacity(window);
            let mut boundaries = Vec::new();
            let mut sources = Vec::new();
            for frag in bin {
                if !values.is_empty() {
                    boundaries.push(values.len() as u32);
                }
                values.extend_from_slice(&frag.values);
                if !sources.contains(&frag.source_id) {
                    sources.push(frag.source_id);
                }
            }
            let fill = window - u;
            if fill > 0 {
                boundaries.push(u as u32);
                values.resize(window, 0.0);
            }
            RawWindow {
                values,
                fragment_boundaries: boundaries,
                source_ids: sources,
                fill,
            }
        })
        .collect()
}
