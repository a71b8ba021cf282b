//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "SSCK"
//! version      u32      1
//! config_hash  u64      first 8 bytes of SHA-256(config_json)
//! config_json  u32 length + UTF-8 bytes
//! meta_json    u32 length + UTF-8 bytes
//! params       u32 count, then per tensor:
//!                u32 name length, name bytes, u32 rows, u32 cols, rows·cols f64
//! buffers      same encoding as params (non-trainable tensors)
//! optimizer    u8 flag; when 1:
//!                u64 step, f64 lr, beta1, beta2, eps, weight_decay,
//!                then per param (in param order) first moment, second moment
//!                as rows·cols f64 each
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{AdamConfig, NnError, OptimizerState, ParamStore, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub meta_json: String,
    pub params: ParamStore,
    pub buffers: Vec<(String, Array2<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

pub fn config_hash(config_json: &str) -> u64 {
    let digest = Sha256::digest(config_json.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_json)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array2<f64>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        put_str(&mut out, &self.config_json);
        put_str(&mut out, &self.meta_json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            put_tensor(&mut out, self.params.name(id), self.params.value(id));
        }
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for (name, value) in &self.buffers {
            put_tensor(&mut out, name, value);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                let c = opt.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for (m, v) in opt.first.iter().zip(&opt.second) {
                    put_values(&mut out, m);
                    put_values(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let hash = r.u64()?;
        let config_json = r.string()?;
        let computed = config_hash(&config_json);
        if computed != hash {
            return Err(NnError::HashMismatch {
                stored: hash,
                computed,
            });
        }
        let meta_json = r.string()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, value) = r.tensor()?;
            params.add(name, value);
        }
        let mut buffers = Vec::new();
        for _ in 0..r.u32()? {
            buffers.push(r.tensor()?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let mut first = Vec::new();
                let mut second = Vec::new();
                for id in params.ids() {
                    let dim = params.value(id).dim();
                    first.push(r.values(dim)?);
                    second.push(r.values(dim)?);
                }
                Some(OptimizerState {
                    config,
                    step,
                    first,
                    second,
                })
            }
            f => return Err(NnError::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_json,
            meta_json,
            params,
            buffers,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, value: &Array2<f64>) {
    for v in value.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, value: &Array2<f64>) {
    put_str(out, name);
    out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
    put_values(out, value);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
    }

    fn values(&mut self, dim: (usize, usize)) -> Result<Array2<f64>> {
        let raw = self.take(dim.0 * dim.1 * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec(dim, data).expect("length matches shape"))
    }

    fn tensor(&mut self) -> Result<(String, Array2<f64>)> {
        let name = self.string()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok((name, self.values((rows, cols))?))
    }
}
