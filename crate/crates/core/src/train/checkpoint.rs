//! Checkpoint container.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        "WMCKPT\0\0"
//! version      u32
//! config       n u32 | (key_len u16 | key | value_len u32 | value)*   ModelConfig, JSON-encoded values
//! state        same layout                                             step, rng, running losses
//! blocks       n u32 | (name_len u16 | name | rank u32 | dims u64*rank | f32*prod(dims))*
//! crc32        u32 over every preceding byte
//! ```
//!
//! Block names are the canonical tensor names prefixed with `param/`,
//! `adam_m/` or `adam_v/`.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LossBreakdown, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIXES: [&str; 3] = ["param/", "adam_m/", "adam_v/"];

fn put_kv(buf: &mut Vec<u8>, pairs: &[(String, String)]) {
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in pairs {
        buf.extend_from_slice(&(k.len() as u16).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
}

fn hex_f64(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn state_kv(state: &TrainState) -> Vec<(String, String)> {
    let r = &state.running;
    vec![
        ("step".into(), state.step.to_string()),
        ("rng_seed".into(), hex::encode(state.rng.get_seed())),
        ("rng_stream".into(), state.rng.get_stream().to_string()),
        ("rng_word_pos".into(), state.rng.get_word_pos().to_string()),
        ("running_total".into(), hex_f64(r.total)),
        ("running_time".into(), hex_f64(r.time)),
        ("running_wavelet".into(), hex_f64(r.wavelet)),
        ("running_balance".into(), hex_f64(r.balance)),
    ]
}

pub fn encode_checkpoint(config: &ModelConfig, state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_kv(&mut buf, &config.to_kv());
    put_kv(&mut buf, &state_kv(state));
    let sets = [&state.weights, &state.m, &state.v];
    let n_blocks: usize = sets.iter().map(|s| s.tensors().len()).sum();
    buf.extend_from_slice(&(n_blocks as u32).to_le_bytes());
    for (prefix, set) in PREFIXES.iter().zip(sets) {
        for (name, t) in set.tensors() {
            let name = format!("{prefix}{name}");
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for &v in t.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes via a temporary file and rename, so an interrupted write never
/// replaces a good checkpoint.
pub fn save_checkpoint(config: &ModelConfig, state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(config, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::format("checkpoint truncated"));
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
    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint string is not utf-8"))
    }
    fn kv(&mut self) -> Result<Vec<(String, String)>> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(Error::format("checkpoint key/value count out of range"));
        }
        (0..n)
            .map(|_| {
                let kl = self.u16()? as usize;
                let k = self.text(kl)?;
                let vl = self.u32()? as usize;
                Ok((k, self.text(vl)?))
            })
            .collect()
    }
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(format!("checkpoint state lacks {key}")))
}

fn parse<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    lookup(pairs, key)?
        .parse()
        .map_err(|_| Error::format(format!("checkpoint state {key} unparseable")))
}

fn parse_hex_f64(pairs: &[(String, String)], key: &str) -> Result<f64> {
    u64::from_str_radix(lookup(pairs, key)?, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::format(format!("checkpoint state {key} unparseable")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, TrainState)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::format("checkpoint truncated"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 12 };
    let config = ModelConfig::from_kv(&r.kv()?)?;
    config.validate().map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let state_pairs = r.kv()?;

    let mut sets = [
        ModelWeights::zeros(&config),
        ModelWeights::zeros(&config),
        ModelWeights::zeros(&config),
    ];
    let expected: usize = sets.iter().map(|s| s.tensors().len()).sum();
    let n_blocks = r.u32()? as usize;
    if n_blocks != expected {
        return Err(Error::format(format!(
            "checkpoint has {n_blocks} blocks, config implies {expected}"
        )));
    }
    for (prefix, set) in PREFIXES.iter().zip(sets.iter_mut()) {
        for (name, tensor) in set.tensors_mut() {
            let nl = r.u16()? as usize;
            let found = r.text(nl)?;
            if found != format!("{prefix}{name}") {
                return Err(Error::format(format!(
                    "expected block {prefix}{name}, found {found}"
                )));
            }
            let rank = r.u32()?;
            if rank != 2 {
                return Err(Error::format(format!("block {found}: rank {rank}")));
            }
            let dims = (r.u64()? as usize, r.u64()? as usize);
            if dims != tensor.dim() {
                return Err(Error::format(format!(
                    "block {found}: shape {dims:?}, expected {:?}",
                    tensor.dim()
                )));
            }
            let raw = r.take(dims.0 * dims.1 * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            *tensor = Array2::from_shape_vec(dims, data).expect("shape checked");
        }
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes after checkpoint blocks"));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::Checksum("checkpoint".into()));
    }

    let seed: [u8; 32] = hex::decode(lookup(&state_pairs, "rng_seed")?)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::format("checkpoint rng seed malformed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse(&state_pairs, "rng_stream")?);
    rng.set_word_pos(parse(&state_pairs, "rng_word_pos")?);
    let [weights, m, v] = sets;
    let state = TrainState {
        step: parse(&state_pairs, "step")?,
        weights,
        m,
        v,
        rng,
        running: LossBreakdown {
            total: parse_hex_f64(&state_pairs, "running_total")?,
            time: parse_hex_f64(&state_pairs, "running_time")?,
            wavelet: parse_hex_f64(&state_pairs, "running_wavelet")?,
            balance: parse_hex_f64(&state_pairs, "running_balance")?,
        },
    };
    Ok((config, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TrainState)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads and insists the stored architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let (config, state) = load_checkpoint(path)?;
    if &config != expected {
        let diffs: Vec<String> = config
            .to_kv()
            .into_iter()
            .zip(expected.to_kv())
            .filter(|(a, b)| a != b)
            .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, requested {b}"))
            .collect();
        return Err(Error::ConfigMismatch(diffs.join("; ")));
    }
    Ok(state)
}
