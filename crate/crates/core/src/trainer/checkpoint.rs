//! Binary checkpoint (`PACK`) of a [`TrainState`].
//!
//! Layout, little-endian:
//!
//! ```text
//! "PACK" u32 version
//! str config_hash   u64 step   u32 user_dim   u32 embed_dim   str config_json
//! u32 n_blobs, then per blob: str name, u32 rows, u32 cols, rows*cols f64
//! u64 csv_len, frequency CSV bytes
//! u32 rng_len, RNG state bytes
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::discretizer::{Codebook, CodebookSet, LEVELS};
use crate::error::{Error, Result};
use crate::numcore::Tensor2;
use crate::popstats::FrequencyTable;
use crate::rng::{rng_from_state_bytes, rng_state_bytes};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor2) {
    put_str(out, name);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor2)> {
    let mut blobs = Vec::new();
    let mut group = |prefix: &str, tensors: Vec<&Tensor2>| {
        for (i, t) in tensors.into_iter().enumerate() {
            blobs.push((format!("{prefix}.{i}"), t.clone()));
        }
    };
    group("towers", state.towers.tensors());
    group("generator", state.aligner.generator.tensors());
    group("discriminator", state.aligner.discriminator.tensors());
    for (name, opt) in [
        ("opt.towers", &state.tower_opt),
        ("opt.generator", &state.generator_opt),
        ("opt.discriminator", &state.discriminator_opt),
    ] {
        blobs.push((format!("{name}.t"), Tensor2::scalar(opt.t as f64)));
        for (i, m) in opt.m.iter().enumerate() {
            blobs.push((format!("{name}.m.{i}"), m.clone()));
        }
        for (i, v) in opt.v.iter().enumerate() {
            blobs.push((format!("{name}.v.{i}"), v.clone()));
        }
    }
    if let Some(books) = &state.codebooks {
        for (l, b) in books.levels.iter().enumerate() {
            blobs.push((format!("codebooks.{l}.codewords"), b.codewords.clone()));
            blobs.push((format!("codebooks.{l}.ema_counts"), Tensor2::row_vector(&b.ema_counts)));
            blobs.push((format!("codebooks.{l}.ema_sums"), b.ema_sums.clone()));
        }
    }
    for (l, c) in state.frequencies.level_counts().iter().enumerate() {
        blobs.push((format!("freq.level.{l}"), Tensor2::row_vector(c)));
    }
    blobs.push(("freq.total".into(), Tensor2::scalar(state.frequencies.total())));
    if state.config.item_logq {
        for (l, c) in state.item_frequencies.level_counts().iter().enumerate() {
            blobs.push((format!("item_freq.level.{l}"), Tensor2::row_vector(c)));
        }
        blobs.push(("item_freq.total".into(), Tensor2::scalar(state.item_frequencies.total())));
    }
    blobs
}

/// Serializes `state` into `w`.
pub fn write_checkpoint<W: Write>(state: &TrainState, mut w: W) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &state.config_hash);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.user_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(state.embed_dim() as u32).to_le_bytes());
    let json = serde_json::to_string(&state.config).map_err(|e| Error::Format(e.to_string()))?;
    put_str(&mut out, &json);

    let blobs = named_tensors(state);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, t) in &blobs {
        put_blob(&mut out, name, t);
    }
    let mut csv = Vec::new();
    state.frequencies.write_csv(&mut csv)?;
    out.extend_from_slice(&(csv.len() as u64).to_le_bytes());
    out.extend_from_slice(&csv);
    let rng = rng_state_bytes(&state.rng);
    out.extend_from_slice(&(rng.len() as u32).to_le_bytes());
    out.extend_from_slice(&rng);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(state, BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainState> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("not a PACK checkpoint".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a PACK checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = c.string()?;
    let step = c.u64()?;
    let user_dim = c.u32()? as usize;
    let embed_dim = c.u32()? as usize;
    let config: TrainConfig = serde_json::from_str(&c.string()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let n_blobs = c.u32()? as usize;
    let mut blobs: BTreeMap<String, Tensor2> = BTreeMap::new();
    for _ in 0..n_blobs {
        let name = c.string()?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format("blob too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        blobs.insert(name, Tensor2::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let csv_len = c.u64()? as usize;
    let csv = c.take(csv_len)?;
    let rng_len = c.u32()? as usize;
    let rng = rng_from_state_bytes(c.take(rng_len)?).ok_or_else(|| Error::Format("bad RNG state blob".into()))?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos)));
    }

    let mut state = TrainState::new(config, user_dim, embed_dim).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    state.config_hash = config_hash;
    state.step = step;
    state.rng = rng;
    let take = |blobs: &mut BTreeMap<String, Tensor2>, name: &str, shape: (usize, usize)| -> Result<Tensor2> {
        let t = blobs.remove(name).ok_or_else(|| Error::Format(format!("checkpoint lacks blob {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("blob {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    for (prefix, tensors) in [
        ("towers", state.towers.tensors_mut()),
        ("generator", state.aligner.generator.tensors_mut()),
        ("discriminator", state.aligner.discriminator.tensors_mut()),
    ] {
        for (i, t) in tensors.into_iter().enumerate() {
            *t = take(&mut blobs, &format!("{prefix}.{i}"), t.shape())?;
        }
    }
    for (name, opt) in [
        ("opt.towers", &mut state.tower_opt),
        ("opt.generator", &mut state.generator_opt),
        ("opt.discriminator", &mut state.discriminator_opt),
    ] {
        opt.t = take(&mut blobs, &format!("{name}.t"), (1, 1))?.data()[0] as u64;
        for (i, m) in opt.m.iter_mut().enumerate() {
            *m = take(&mut blobs, &format!("{name}.m.{i}"), m.shape())?;
        }
        for (i, v) in opt.v.iter_mut().enumerate() {
            *v = take(&mut blobs, &format!("{name}.v.{i}"), v.shape())?;
        }
    }

    if blobs.contains_key("codebooks.0.codewords") {
        let k = state.config.rq.k;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let codewords = take(&mut blobs, &format!("codebooks.{l}.codewords"), (k, embed_dim))?;
            let ema_counts = take(&mut blobs, &format!("codebooks.{l}.ema_counts"), (1, k))?.into_data();
            let ema_sums = take(&mut blobs, &format!("codebooks.{l}.ema_sums"), (k, embed_dim))?;
            levels.push(Codebook { codewords, ema_counts, ema_sums });
        }
        state.codebooks = Some(CodebookSet {
            levels,
            pinned_zero: state.config.rq.pin_zero,
            fitted: true,
        });
    }
    let sizes = state.frequencies.level_sizes();
    let mut table = FrequencyTable::read_csv(csv, sizes, state.config.freq_decay, state.config.freq_smoothing)?
        .with_estimator(state.config.freq_estimator);
    let marginals = (0..LEVELS)
        .map(|l| take(&mut blobs, &format!("freq.level.{l}"), (1, sizes[l])).map(Tensor2::into_data))
        .collect::<Result<Vec<_>>>()?;
    let total = take(&mut blobs, "freq.total", (1, 1))?.data()[0];
    table.restore_marginals(marginals, total)?;
    state.frequencies = table;
    if let Some(first) = blobs.remove("item_freq.level.0") {
        let rest = (1..LEVELS)
            .map(|l| take(&mut blobs, &format!("item_freq.level.{l}"), (1, 1)).map(Tensor2::into_data))
            .collect::<Result<Vec<_>>>()?;
        let total = take(&mut blobs, "item_freq.total", (1, 1))?.data()[0];
        let levels = std::iter::once(first.into_data()).chain(rest).collect();
        state.item_frequencies = FrequencyTable::from_marginals(levels, total, state.config.freq_decay, 0.0)?;
    }
    if let Some(name) = blobs.keys().next() {
        return Err(Error::Format(format!("unexpected blob {name} in checkpoint")));
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_checkpoint(File::open(path)?)
}
