//! Corpus construction: segmentation, packing, filtering, masking, sampling
//! and the on-disk corpus format.

pub mod corpus;
pub mod filter;
pub mod ingest;
pub mod segment;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use corpus::{
    balanced_batch, read_corpus, write_corpus, CorpusManifest, CorpusReader, DomainCount,
    RecordEntry, CORPUS_MAGIC, CORPUS_VERSION,
};
pub use filter::{impute_and_mask, quality_filter, RejectReason, Verdict, NEAR_ZERO};
pub use ingest::{ingest, ingest_dir, IngestFormat, IngestOptions};
pub use segment::{pack_fragments, segment_series, Fragment, RawSeries, RawWindow, WINDOW_LENGTH};

/// A stored training window. Values are kept at f32 precision, which is what
/// the corpus file holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
    pub domain: String,
    pub fragment_boundaries: Vec<u32>,
    pub source_ids: Vec<String>,
}

impl Window {
    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// The stored values with masked positions marked missing, i.e. what the
    /// filter saw minus the information imputation removed.
    pub fn masked_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v as f64 } else { f64::NAN })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DomainStats {
    pub series: u64,
    pub full_windows: u64,
    pub packed_windows: u64,
    pub rejected: BTreeMap<RejectReason, u64>,
}

impl DomainStats {
    pub fn accepted(&self) -> u64 {
        self.full_windows + self.packed_windows
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessStats {
    pub domains: BTreeMap<String, DomainStats>,
}

impl PreprocessStats {
    pub fn accepted(&self) -> u64 {
        self.domains.values().map(DomainStats::accepted).sum()
    }

    pub fn rejected(&self) -> u64 {
        self.domains.values().map(DomainStats::rejected_total).sum()
    }
}

/// Filters a candidate on its raw values, then on its imputed values (so the
/// stored window passes a re-check), and imputes.
fn finalize(raw: RawWindow, domain: &str) -> std::result::Result<Window, RejectReason> {
    if let Verdict::Reject(r) = quality_filter(&raw.values) {
        return Err(r);
    }
    let (values, mut mask) = impute_and_mask(&raw.values);
    let n = values.len();
    for m in &mut mask[n - raw.fill..] {
        *m = false;
    }
    if let Verdict::Reject(r) = quality_filter(&values) {
        return Err(r);
    }
    Ok(Window {
        values: values.iter().map(|&v| v as f32).collect(),
        mask,
        domain: domain.to_string(),
        fragment_boundaries: raw.fragment_boundaries,
        source_ids: raw.source_ids,
    })
}

/// Full pipeline over a series stream. Output order: full windows in input
/// order, then packed windows per domain in sorted domain order.
pub fn build_windows(
    series: impl Iterator<Item = Result<RawSeries>>,
    window: usize,
) -> Result<(Vec<Window>, PreprocessStats)> {
    let mut stats = PreprocessStats::default();
    let mut pools: BTreeMap<String, Vec<Fragment>> = BTreeMap::new();
    let mut out = Vec::new();
    for s in series {
        let s = s?;
        let st = stats.domains.entry(s.domain.clone()).or_default();
        st.series += 1;
        let (full, frags) = segment_series(&s, window);
        for raw in full {
            match finalize(raw, &s.domain) {
                Ok(w) => {
                    st.full_windows += 1;
                    out.push(w);
                }
                Err(r) => *st.rejected.entry(r).or_default() += 1,
            }
        }
        pools.entry(s.domain).or_default().extend(frags);
    }
    for (domain, pool) in pools {
        let st = stats.domains.entry(domain.clone()).or_default();
        for raw in pack_fragments(pool, window) {
            match finalize(raw, &domain) {
                Ok(w) => {
                    st.packed_windows += 1;
                    out.push(w);
                }
                Err(r) => *st.rejected.entry(r).or_default() += 1,
            }
        }
    }
    Ok((out, stats))
}
