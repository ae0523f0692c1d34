//! Versioned binary checkpoint container. Every number is little-endian.
//!
//! ```text
//! magic      8 bytes   "VQEMBCKP"
//! version    u32
//! encoder    u64 length + UTF-8 JSON (EncoderConfig)
//! train      u64 length + UTF-8 JSON (training config, opaque here)
//! step       u64
//! rng        u64 seed, u64 stream, u128 word position
//! params     u64 count + f64 values
//! optimizer  u64 count + f64 values
//! stats      u64 count + f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VQEMBCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train_config: String,
    pub step: u64,
    pub rng: RngState,
    pub optimizer_state: Vec<f64>,
    pub stats: Vec<f64>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    put_u64(out, vals.len() as u64);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::Checkpoint(format!("section length {n} exceeds remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(
            &mut out,
            &serde_json::to_string(self.params.config()).expect("config serializes"),
        );
        put_str(&mut out, &self.train_config);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_f64s(&mut out, self.params.values());
        put_f64s(&mut out, &self.optimizer_state);
        put_f64s(&mut out, &self.stats);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg: EncoderConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;
        let train_config = r.string()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let values = r.f64s()?;
        let optimizer_state = r.f64s()?;
        let stats = r.f64s()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        let params = ModelParams::from_values(cfg, values)?;
        Ok(Self {
            params,
            train_config,
            step,
            rng,
            optimizer_state,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
