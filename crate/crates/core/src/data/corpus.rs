//! Binary corpus file.
//!
//! All integers little-endian.
//!
//! ```text
//! header   "WMCORPUS" | version u32 | window_length u32
//! record*  payload_len u32 | payload | crc32(payload) u32
//!          payload = domain u32
//!                    | n_boundaries u32 | boundaries u32*
//!                    | n_sources u32 | (len u16 | utf8)*
//!                    | values f32 * window_length
//!                    | mask ceil(window_length / 8) bytes, LSB first
//! manifest n_domains u32 | (len u16 | utf8 | count u64)*
//!          | n_records u64 | (offset u64 | domain u32)*
//!          | crc32(manifest) u32
//! footer   manifest_offset u64 | "WMCEND\0\0"
//! ```
//!
//! `offset` points at a record's `payload_len` field.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::Window;
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"WMCORPUS";
pub const CORPUS_VERSION: u32 = 1;
const FOOTER_MAGIC: &[u8; 8] = b"WMCEND\0\0";
const HEADER_LEN: u64 = 16;
const FOOTER_LEN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DomainCount {
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordEntry {
    pub offset: u64,
    pub domain: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub window_length: u32,
    pub domains: Vec<DomainCount>,
    pub records: Vec<RecordEntry>,
}

impl CorpusManifest {
    /// Manifest without file offsets, for in-memory window sets.
    pub fn from_windows(windows: &[Window]) -> Self {
        let mut domains: Vec<DomainCount> = Vec::new();
        let mut records = Vec::with_capacity(windows.len());
        for w in windows {
            let idx = match domains.iter().position(|d| d.name == w.domain) {
                Some(i) => i,
                None => {
                    domains.push(DomainCount {
                        name: w.domain.clone(),
                        count: 0,
                    });
                    domains.len() - 1
                }
            };
            domains[idx].count += 1;
            records.push(RecordEntry {
                offset: 0,
                domain: idx as u32,
            });
        }
        CorpusManifest {
            version: CORPUS_VERSION,
            window_length: windows.first().map_or(0, |w| w.values.len() as u32),
            domains,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by domain, in domain order.
    pub fn domain_index(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.domains.len()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.domain as usize].push(i);
        }
        out
    }
}

/// Uniform over non-empty domains, then uniform within the domain, with
/// replacement. Returns record indices.
pub fn balanced_batch<R: Rng + ?Sized>(
    manifest: &CorpusManifest,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let groups: Vec<Vec<usize>> = manifest
        .domain_index()
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((0..batch_size)
        .map(|_| {
            let g = &groups[rng.random_range(0..groups.len())];
            g[rng.random_range(0..g.len())]
        })
        .collect())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::format(format!("string too long for corpus: {} bytes", s.len())))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_record(w: &Window, domain: u32) -> Result<Vec<u8>> {
    let mut p = Vec::with_capacity(16 + w.values.len() * 4 + w.values.len() / 8 + 1);
    p.extend_from_slice(&domain.to_le_bytes());
    p.extend_from_slice(&(w.fragment_boundaries.len() as u32).to_le_bytes());
    for b in &w.fragment_boundaries {
        p.extend_from_slice(&b.to_le_bytes());
    }
    p.extend_from_slice(&(w.source_ids.len() as u32).to_le_bytes());
    for s in &w.source_ids {
        put_str(&mut p, s)?;
    }
    for v in &w.values {
        p.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = vec![0u8; w.mask.len().div_ceil(8)];
    for (i, &m) in w.mask.iter().enumerate() {
        if m {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    p.extend_from_slice(&bits);
    Ok(p)
}

/// Writes windows (all of one length) and returns the committed manifest.
pub fn write_corpus(windows: &[Window], path: &Path) -> Result<CorpusManifest> {
    let window_length = windows.first().map_or(0, |w| w.values.len());
    for w in windows {
        if w.values.len() != window_length || w.mask.len() != window_length {
            return Err(Error::contract(format!(
                "window lengths differ: expected {window_length}, got {} values / {} mask",
                w.values.len(),
                w.mask.len()
            )));
        }
    }
    let mut manifest = CorpusManifest::from_windows(windows);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CORPUS_MAGIC)?;
    out.write_all(&CORPUS_VERSION.to_le_bytes())?;
    out.write_all(&(window_length as u32).to_le_bytes())?;

    let mut offset = HEADER_LEN;
    for (w, entry) in windows.iter().zip(manifest.records.iter_mut()) {
        let payload = encode_record(w, entry.domain)?;
        entry.offset = offset;
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        out.write_all(&payload)?;
        out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        offset += 8 + payload.len() as u64;
    }

    let mut m = Vec::new();
    m.extend_from_slice(&(manifest.domains.len() as u32).to_le_bytes());
    for d in &manifest.domains {
        put_str(&mut m, &d.name)?;
        m.extend_from_slice(&d.count.to_le_bytes());
    }
    m.extend_from_slice(&(manifest.records.len() as u64).to_le_bytes());
    for r in &manifest.records {
        m.extend_from_slice(&r.offset.to_le_bytes());
        m.extend_from_slice(&r.domain.to_le_bytes());
    }
    out.write_all(&m)?;
    out.write_all(&crc32fast::hash(&m).to_le_bytes())?;
    out.write_all(&offset.to_le_bytes())?;
    out.write_all(FOOTER_MAGIC)?;
    out.flush()?;
    Ok(manifest)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!("{} ends early", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(format!("{}: invalid utf-8", self.what)))
    }
    /// Counts read from the file are bounded by the bytes that remain.
    fn count(&mut self, raw: u64, min_item: usize) -> Result<usize> {
        let left = (self.buf.len() - self.pos) as u64;
        if raw.saturating_mul(min_item as u64) > left {
            return Err(Error::format(format!("{}: count {raw} exceeds data", self.what)));
        }
        Ok(raw as usize)
    }
}

/// Random-access reader over a corpus file.
pub struct CorpusReader {
    file: File,
    manifest: CorpusManifest,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let size = file.metadata()?.len();
        if size < HEADER_LEN {
            return Err(Error::format("corpus file shorter than its header"));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)?;
        if &header[..8] != CORPUS_MAGIC {
            return Err(Error::format("bad corpus magic"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let window_length = u32::from_le_bytes(header[12..16].try_into().unwrap());
        if size < HEADER_LEN + FOOTER_LEN {
            return Err(Error::format("corpus file truncated: no footer"));
        }
        file.seek(SeekFrom::End(-(FOOTER_LEN as i64)))?;
        let mut footer = [0u8; FOOTER_LEN as usize];
        file.read_exact(&mut footer)?;
        if &footer[8..] != FOOTER_MAGIC {
            return Err(Error::format("corpus file truncated: footer missing"));
        }
        let manifest_offset = u64::from_le_bytes(footer[..8].try_into().unwrap());
        let manifest_end = size - FOOTER_LEN;
        if manifest_offset < HEADER_LEN || manifest_offset + 4 > manifest_end {
            return Err(Error::format("manifest offset out of range"));
        }
        file.seek(SeekFrom::Start(manifest_offset))?;
        let mut block = vec![0u8; (manifest_end - manifest_offset) as usize];
        file.read_exact(&mut block)?;
        let (body, crc) = block.split_at(block.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(Error::Checksum("corpus manifest".into()));
        }

        let mut c = Cursor {
            buf: body,
            pos: 0,
            what: "manifest",
        };
        let raw = c.u32()? as u64;
        let n_domains = c.count(raw, 10)?;
        let mut domains = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            let name = c.string()?;
            let count = c.u64()?;
            domains.push(DomainCount { name, count });
        }
        let raw = c.u64()?;
        let n_records = c.count(raw, 12)?;
        let mut records = Vec::with_capacity(n_records);
        let mut seen = vec![0u64; n_domains];
        for _ in 0..n_records {
            let offset = c.u64()?;
            let domain = c.u32()?;
            if domain as usize >= n_domains || offset < HEADER_LEN || offset >= manifest_offset {
                return Err(Error::format("manifest record out of range"));
            }
            seen[domain as usize] += 1;
            records.push(RecordEntry { offset, domain });
        }
        if seen.iter().zip(&domains).any(|(&s, d)| s != d.count) {
            return Err(Error::format("manifest domain counts disagree with records"));
        }
        Ok(CorpusReader {
            file,
            manifest: CorpusManifest {
                version,
                window_length,
                domains,
                records,
            },
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn read_window(&mut self, index: usize) -> Result<Window> {
        let entry = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::contract(format!("record {index} out of range")))?
            .clone();
        self.file.seek(SeekFrom::Start(entry.offset))?;
        let mut len = [0u8; 4];
        self.file.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let wl = self.manifest.window_length as usize;
        if len < 12 + wl * 4 + wl.div_ceil(8) || len > 1 << 30 {
            return Err(Error::format(format!("record {index}: bad length {len}")));
        }
        let mut payload = vec![0u8; len + 4];
        self.file
            .read_exact(&mut payload)
            .map_err(|_| Error::format(format!("record {index} truncated")))?;
        let (payload, crc) = payload.split_at(len);
        if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(Error::Checksum(format!("corpus record {index}")));
        }

        let mut c = Cursor {
            buf: payload,
            pos: 0,
            what: "record",
        };
        let domain = c.u32()?;
        if domain != entry.domain {
            return Err(Error::format(format!("record {index}: domain disagrees with manifest")));
        }
        let raw = c.u32()? as u64;
        let n = c.count(raw, 4)?;
        let mut fragment_boundaries = Vec::with_capacity(n);
        for _ in 0..n {
            fragment_boundaries.push(c.u32()?);
        }
        let raw = c.u32()? as u64;
        let n = c.count(raw, 2)?;
        let mut source_ids = Vec::with_capacity(n);
        for _ in 0..n {
            source_ids.push(c.string()?);
        }
        let values: Vec<f32> = c
            .take(wl * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let bits = c.take(wl.div_ceil(8))?;
        let mask = (0..wl).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        if c.pos != payload.len() {
            return Err(Error::format(format!("record {index}: trailing bytes")));
        }
        Ok(Window {
            values,
            mask,
            domain: self.manifest.domains[domain as usize].name.clone(),
            fragment_boundaries,
            source_ids,
        })
    }

    pub fn windows(&mut self) -> impl Iterator<Item = Result<Window>> + '_ {
        (0..self.manifest.len()).map(move |i| self.read_window(i))
    }
}

/// Manifest plus every window, in file order.
pub fn read_corpus(path: &Path) -> Result<(CorpusManifest, Vec<Window>)> {
    let mut reader = CorpusReader::open(path)?;
    let windows = reader.windows().collect::<Result<Vec<_>>>()?;
    Ok((reader.manifest.clone(), windows))
}
