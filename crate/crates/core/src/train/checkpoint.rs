//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SWHDRCKP" | version u32
//! config: len u32 | key=value text
//! params: count u32 | tensor records
//! state:  step u64 | epoch u64 | lr f64 | seed u64 | count u32 | m records | v records
//! record: name len u32 | name | dtype u8 | rank u8 | dims u64… | payload
//! ```
//!
//! Encoding is a pure function of the contents, so save → load → save
//! reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use super::TrainState;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParameterSet;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SWHDRCKP";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_text();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        let s = &self.state;
        put_u64(&mut out, s.step);
        put_u64(&mut out, s.epoch);
        out.extend_from_slice(&s.lr.to_le_bytes());
        put_u64(&mut out, s.seed);
        put_u32(&mut out, s.m.len() as u32);
        for (name, t) in self.params.names().iter().zip(&s.m) {
            put_record(&mut out, name, t);
        }
        for (name, t) in self.params.names().iter().zip(&s.v) {
            put_record(&mut out, name, t);
        }
        out
    }

    /// Parses a checkpoint and checks its tensors against its own config.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::MalformedHeader("not a checkpoint (bad magic)".into()));
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnknownVersion {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedHeader("config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)?;

        let count = r.u32()? as usize;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            params.insert(&name, t)?;
        }
        params.conforms_to(&config.specs()?)?;

        let step = r.u64()?;
        let epoch = r.u64()?;
        let lr = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let seed = r.u64()?;
        let moments = r.u32()? as usize;
        if moments != params.len() {
            return Err(Error::MalformedHeader(format!(
                "{moments} optimizer moments for {} parameters",
                params.len()
            )));
        }
        let mut m = Vec::with_capacity(moments);
        let mut v = Vec::with_capacity(moments);
        for dst in [&mut m, &mut v] {
            for (name, p) in params.iter() {
                let (got, t) = r.record()?;
                if got != name || t.shape() != p.shape() {
                    return Err(Error::CheckpointShape {
                        name: got,
                        expected: p.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                dst.push(t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            state: TrainState {
                step,
                epoch,
                lr,
                seed,
                m,
                v,
            },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::TruncatedPayload(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::MalformedHeader("tensor name is not UTF-8".into()))?;
        let dtype = self.u8()?;
        if dtype != f32::DTYPE as u8 {
            return Err(Error::Unsupported(format!("tensor `{name}` has dtype tag {dtype}")));
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = self.take(n.checked_mul(f32::BYTES).ok_or_else(|| {
            Error::MalformedHeader(format!("tensor `{name}` shape {shape:?} overflows"))
        })?)?;
        let data = payload.chunks_exact(f32::BYTES).map(f32::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks its parameters against `expected`, naming
/// the first tensor that does not fit.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.params.conforms_to(&expected.specs()?)?;
    Ok(ckpt)
}
