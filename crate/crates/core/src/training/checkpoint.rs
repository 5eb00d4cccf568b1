//! Binary checkpoint format.
//!
//! ```text
//! "MPGN"              magic
//! u16                 format version
//! u32 + bytes         metadata, UTF-8 JSON
//! u32                 tensor count
//! per tensor:
//!   u32 + bytes       name, UTF-8
//!   u32               rank
//!   u32 × rank        dims
//!   values            little-endian floats, width given by metadata `dtype`
//! ```
//!
//! All integers are little-endian. Optimizer moments are stored as tensors
//! named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::tensor::{Float, Tensor};
use crate::training::adam::AdamState;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"MPGN";
pub const VERSION: u16 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub arch: String,
    pub step: u64,
    pub vocab_sha256: String,
    /// Masking preset used for pre-training, if any.
    pub masking: Option<String>,
    pub dtype: String,
    /// Adam step counter; absent when no optimizer state was saved.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub params: Params<F>,
    pub optimizer: Option<AdamState<F>>,
}

impl<F: Float> Checkpoint<F> {
    /// Refuses a checkpoint built against a different vocabulary.
    pub fn expect_vocab(&self, vocab: &Vocab) -> Result<()> {
        let actual = vocab.sha256();
        if actual != self.meta.vocab_sha256 {
            return Err(Error::VocabMismatch {
                expected: self.meta.vocab_sha256.clone(),
                actual,
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<F: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &x in t.data() {
        x.write_le(out);
    }
    Ok(())
}

pub fn encode_checkpoint<F: Float>(
    meta: &CheckpointMeta,
    params: &Params<F>,
    optimizer: Option<&AdamState<F>>,
) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.dtype = F::DTYPE.to_string();
    meta.arch = meta.model.arch.name().to_string();
    meta.optimizer_step = optimizer.map(|o| o.step);
    let json = serde_json::to_vec(&meta)?;

    let mut out = Vec::with_capacity(16 + json.len() + params.numel() * F::BYTES * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);

    let mut count = params.len();
    if let Some(o) = optimizer {
        count += o.m.len() + o.v.len();
    }
    put_u32(&mut out, count)?;
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    if let Some(o) = optimizer {
        for (name, t) in &o.m {
            put_tensor(&mut out, &format!("{M_PREFIX}{name}"), t)?;
        }
        for (name, t) in &o.v {
            put_tensor(&mut out, &format!("{V_PREFIX}{name}"), t)?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Float>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &Params<F>,
    optimizer: Option<&AdamState<F>>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(meta, params, optimizer)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn read_values<F: Float, S: Float>(bytes: &[u8]) -> Vec<F> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| F::of(S::read_le(c).as_f64()))
        .collect()
}

/// Decodes a checkpoint, converting stored values to `F`.
pub fn decode_checkpoint<F: Float>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let width = match meta.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
    };
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let dims = (0..rank)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * width, &format!("values of {name}"))?;
        let data = if width == 4 {
            read_values::<F, f32>(raw)
        } else {
            read_values::<F, f64>(raw)
        };
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let optimizer = meta.optimizer_step.map(|step| AdamState { step, m, v });
    let params = Params::from_map(params);
    params
        .check(&meta.model)
        .map_err(|e| Error::Format(format!("parameters do not match the stored config: {e}")))?;
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    decode_checkpoint(&std::fs::read(path)?)
}
