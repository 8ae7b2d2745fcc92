//! Self-describing checkpoint container.
//!
//! Layout (little-endian throughout):
//! `DEVACKPT` magic, `u32` format version, `u64` header length, JSON header,
//! `u64` tensor count, then per tensor: `u32` name length, name bytes,
//! `u32` rank, `u64` per dimension, `u8` dtype (0 = f64, 1 = f32),
//! `u64` payload length in bytes, payload.
//!
//! Tensors are the model parameters under their own names, the optimizer
//! moments under `adam.m.<name>` / `adam.v.<name>`, and the retained best
//! parameters under `best.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::LabelRange;
use super::train::{AdamW, BestParams, EpochRecord, Session};
use crate::edg::TertileTable;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Deva;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DEVACKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: &str = "<header>";

/// Storage precision of tensor payloads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Shuffle and dropout streams are derived from the seed, the epoch and the
/// step, so these counters are the whole random state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub epoch: usize,
    pub valid_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub tertiles: TertileTable,
    pub label_range: LabelRange,
    pub epoch: usize,
    pub step: u64,
    pub optimizer_updates: u64,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSummary>,
}

fn header_of(s: &Session) -> Header {
    Header {
        format_version: FORMAT_VERSION,
        config: s.config.clone(),
        vocab: s.vocab.tokens().to_vec(),
        tertiles: s.tertiles.clone(),
        label_range: s.label_range,
        epoch: s.epoch,
        step: s.step,
        optimizer_updates: s.optim.t,
        rng: RngState {
            seed: s.config.optim.seed,
            epoch: s.epoch,
            step: s.step,
        },
        history: s.history.clone(),
        best: s.best.as_ref().map(|b| BestSummary {
            epoch: b.epoch,
            valid_mae: b.valid_mae,
        }),
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, precision: Precision) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(precision.code());
    out.extend_from_slice(&((t.numel() * precision.width()) as u64).to_le_bytes());
    for &v in t.data() {
        match precision {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

/// Serializes a training session.
pub fn to_bytes(s: &Session, precision: Precision) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_of(s))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let names: Vec<&str> = s.store.iter().map(|(_, p)| p.name.as_str()).collect();
    let per = if s.best.is_some() { 4 } else { 3 };
    out.extend_from_slice(&((names.len() * per) as u64).to_le_bytes());
    for (_, p) in s.store.iter() {
        push_tensor(&mut out, &p.name, &p.value, precision);
    }
    for (i, name) in names.iter().enumerate() {
        push_tensor(&mut out, &format!("adam.m.{name}"), &s.optim.m[i], precision);
    }
    for (i, name) in names.iter().enumerate() {
        push_tensor(&mut out, &format!("adam.v.{name}"), &s.optim.v[i], precision);
    }
    if let Some(best) = &s.best {
        for (i, name) in names.iter().enumerate() {
            push_tensor(&mut out, &format!("best.{name}"), &best.params[i], precision);
        }
    }
    Ok(out)
}

pub fn save_checkpoint(s: &Session, path: &Path, precision: Precision) -> Result<()> {
    let bytes = to_bytes(s, precision)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, tensor: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                tensor: tensor.to_string(),
                reason: "file is truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, t: &str) -> Result<u8> {
        Ok(self.take(1, t)?[0])
    }

    fn u32(&mut self, t: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, t)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, t: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, t)?.try_into().expect("8 bytes")))
    }
}

fn bad(tensor: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

/// Reads one tensor record; `after` names the previous tensor for errors
/// raised before this record's name is known.
fn read_tensor(r: &mut Reader, after: &str) -> Result<(String, Tensor)> {
    let ctx = format!("record after {after}");
    let name_len = r.u32(&ctx)? as usize;
    let name = std::str::from_utf8(r.take(name_len, &ctx)?)
        .map_err(|_| bad(&ctx, "tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32(&name)? as usize;
    if rank > 8 {
        return Err(bad(&name, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64(&name)? as usize);
    }
    let precision = match r.u8(&name)? {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(bad(&name, format!("unknown dtype {other}"))),
    };
    let len = r.u64(&name)? as usize;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(&name, "shape overflows"))?;
    if Some(len) != numel.checked_mul(precision.width()) {
        return Err(bad(
            &name,
            format!("payload length {len} does not match shape {shape:?} ({numel} elements)"),
        ));
    }
    let payload = r.take(len, &name)?;
    let data: Vec<f64> = match precision {
        Precision::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| bad(&name, e.to_string()))?;
    Ok((name, t))
}

/// Rebuilds a training session, validating every tensor against a model
/// constructed from the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<Session> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, HEADER)? != MAGIC {
        return Err(bad(HEADER, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32(HEADER)?;
    if version != FORMAT_VERSION {
        return Err(bad(HEADER, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = r.u64(HEADER)? as usize;
    let header: Header = serde_json::from_slice(r.take(len, HEADER)?).map_err(|e| bad(HEADER, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(HEADER, "header version disagrees with container version"));
    }
    header.config.validate().map_err(|e| bad(HEADER, e.to_string()))?;

    let mut store = ParamStore::new();
    let model = Deva::new(header.config.model.clone(), &mut store, header.config.optim.seed)?;
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    let shapes: Vec<Vec<usize>> = store.iter().map(|(_, p)| p.value.shape().to_vec()).collect();
    let per = if header.best.is_some() { 4 } else { 3 };

    let count = r.u64(HEADER)? as usize;
    if count != names.len() * per {
        return Err(bad(
            HEADER,
            format!("holds {count} tensors, the config implies {}", names.len() * per),
        ));
    }
    let mut groups: Vec<Vec<Tensor>> = Vec::with_capacity(per);
    let prefixes = ["", "adam.m.", "adam.v.", "best."];
    let mut last = HEADER.to_string();
    for prefix in &prefixes[..per] {
        let mut group = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let expected = format!("{prefix}{name}");
            let (got, t) = read_tensor(&mut r, &last)?;
            if got != expected {
                return Err(bad(&got, format!("unexpected tensor, expected {expected}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(bad(
                    &got,
                    format!("shape {:?} does not match the model's {shape:?}", t.shape()),
                ));
            }
            last = got;
            group.push(t);
        }
        groups.push(group);
    }
    if r.pos != bytes.len() {
        return Err(bad(&last, "trailing bytes after the last tensor"));
    }
    let mut groups = groups.into_iter();
    let params = groups.next().expect("params group");
    let ids: Vec<_> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(params) {
        *store.value_mut(id) = t;
    }
    let optim = AdamW {
        m: groups.next().expect("m group"),
        v: groups.next().expect("v group"),
        t: header.optimizer_updates,
    };
    let best = match (header.best, groups.next()) {
        (Some(b), Some(params)) => Some(BestParams {
            epoch: b.epoch,
            valid_mae: b.valid_mae,
            params,
        }),
        _ => None,
    };
    let vocab = Vocabulary::from_tokens(header.vocab).map_err(|e| bad(HEADER, e.to_string()))?;
    if vocab.len() > header.config.model.vocab_size {
        return Err(bad(HEADER, "vocabulary larger than the embedding table"));
    }
    Ok(Session {
        config: header.config,
        vocab,
        tertiles: header.tertiles,
        label_range: header.label_range,
        model,
        store,
        optim,
        epoch: header.epoch,
        step: header.step,
        history: header.history,
        best,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Session> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
