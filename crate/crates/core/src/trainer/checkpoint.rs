//! Binary checkpoints.
//!
//! ```text
//! "AVW2" | version u32 | step u64 | config length u32 | config JSON
//! | tensor count u32 | tensors              parameters
//! | adam step u64 | beta1 f64 | beta2 f64 | eps f64 | lr f64
//! | tensor count u32 | tensors              first moments
//! | tensor count u32 | tensors              second moments
//!
//! tensor: name length u32 | name | rank u32 | dims u32 × rank
//!         | values f32 × product(dims) | digest u32
//! ```
//!
//! Integers and reals are little-endian; tensors appear in lexicographic
//! name order. The per-tensor digest is the first four bytes of the SHA-256
//! of the tensor record, so a flipped byte anywhere in a tensor is caught
//! and reported with the record's offset.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainState;
use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::data_synth::write_atomic;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVW2";
pub const VERSION: u32 = 1;

fn digest(bytes: &[u8]) -> u32 {
    let d = Sha256::digest(bytes);
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let start = out.len();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let h = digest(&out[start..]);
    out.extend_from_slice(&h.to_le_bytes());
}

fn put_section<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a String, &'a Tensor<f32>)>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t);
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let params: BTreeMap<&String, &Tensor<f32>> = state.params.iter().collect();
    put_section(&mut out, params.into_iter());
    let a = &state.adam;
    out.extend_from_slice(&a.step.to_le_bytes());
    for v in [a.config.beta1, a.config.beta2, a.config.eps, a.config.lr] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_section(&mut out, a.first.iter());
    put_section(&mut out, a.second.iter());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: at,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let start = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| self.fail(start + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.fail(self.pos - 4, format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n > 0 && n <= (self.bytes.len() - self.pos) / 4)
            .ok_or_else(|| self.fail(start, format!("tensor `{name}` has impossible shape {shape:?}")))?;
        let data: Vec<f32> = self
            .take(4 * n, "tensor values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let expect = digest(&self.bytes[start..self.pos]);
        let found = self.u32("tensor digest")?;
        if expect != found {
            return Err(self.fail(start, format!("tensor `{name}` fails its digest check")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.fail(start, format!("tensor `{name}` holds a non-finite value")));
        }
        let t = Tensor::new(shape, data).map_err(|e| self.fail(start, e.to_string()))?;
        Ok((name, t))
    }

    fn section(&mut self, what: &str) -> Result<BTreeMap<String, Tensor<f32>>> {
        let count = self.u32(what)?;
        let mut out = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let at = self.pos;
            let (name, t) = self.tensor()?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(self.fail(at, format!("tensor `{name}` out of lexicographic order")));
            }
            last = Some(name.clone());
            out.insert(name, t);
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, not an AVW2 checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let step = r.u64("step")?;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let config: serde_json::Value = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| r.fail(cfg_at, format!("config snapshot: {e}")))?;
    let tensors = r.section("parameter count")?;
    let mut params = ParamStore::new();
    for (name, t) in tensors {
        params.insert(name, t);
    }
    let adam_step = r.u64("optimizer step")?;
    let beta1 = r.f64("beta1")?;
    let beta2 = r.f64("beta2")?;
    let eps = r.f64("eps")?;
    let lr = r.f64("lr")?;
    let first = r.section("first-moment count")?;
    let second = r.section("second-moment count")?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TrainState {
        params,
        adam: AdamState {
            config: AdamConfig { lr, beta1, beta2, eps },
            step: adam_step,
            first,
            second,
        },
        step,
        config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
