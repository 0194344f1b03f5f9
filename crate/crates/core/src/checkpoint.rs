//! Binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "RNATCKPT"  u32 version
//! u32 len, metadata text (`key = value` lines: model config, step, mode)
//! u32 tensor count, then per tensor: u32 name len, name, u32 rank,
//!     u64 dims.., f64 values..
//! u8 optimizer flag; when 1: u64 t, then m and v for every tensor in order
//! ```
//!
//! Writes go through a temporary file and a rename. Read errors carry the
//! byte offset at which decoding failed.

use std::path::Path;

use crate::config::{model_config_from_kv, model_config_to_kv, KeyValues};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::ReorderNatParams;
use crate::numcore::Tensor;
use crate::train::{Adam, GuidingMode};

pub const MAGIC: &[u8; 8] = b"RNATCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ReorderNatParams,
    pub optimizer: Option<Adam>,
    pub step: u64,
    pub mode: GuidingMode,
}

impl Checkpoint {
    pub fn new(model: ReorderNatParams, mode: GuidingMode) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            step: 0,
            mode,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = format!(
            "{}step = {}\nguiding = {}\n",
            model_config_to_kv(&self.model.config),
            self.step,
            self.mode
        );
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        let store = &self.model.store;
        put_u32(&mut out, store.len());
        for (name, t) in store.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.t.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(at, &format!("unsupported version {version}")));
        }
        let at = r.pos;
        let n = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(n)?).map_err(|_| r.err(at, "metadata is not UTF-8"))?;
        let kv = KeyValues::parse(meta).map_err(|e| r.err(at, &e.to_string()))?;
        let config = model_config_from_kv(&kv).map_err(|e| r.err(at, &e.to_string()))?;
        let step = kv
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| r.err(at, "metadata lacks a step"))?;
        let mode = kv
            .get("guiding")
            .ok_or_else(|| r.err(at, "metadata lacks a guiding mode"))?
            .parse()
            .map_err(|e: Error| r.err(at, &e.to_string()))?;

        let mut model = ReorderNatParams::new(config).map_err(|e| r.err(at, &e.to_string()))?;
        let at = r.pos;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(r.err(at, &format!("{count} tensors, the model has {}", model.store.len())));
        }
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(r.err(at, &format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(at, &e.to_string()))?;
            model
                .store
                .set(&name, t.with_grad())
                .map_err(|e| r.err(at, &e.to_string()))?;
        }
        let at = r.pos;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                let sizes: Vec<usize> = model.store.ids().map(|id| model.store.get(id).len()).collect();
                for n in sizes {
                    m.push(r.f64s(n)?);
                    v.push(r.f64s(n)?);
                }
                Some(Adam {
                    beta1: 0.9,
                    beta2: 0.98,
                    eps: 1e-9,
                    t,
                    m,
                    v,
                })
            }
            f => return Err(r.err(at, &format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            step,
            mode,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint(format!("at byte {offset}: {msg}"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, &format!("truncated, wanted {n} more bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err(self.pos, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelConfig, ReorderKind};
    use crate::train::{Trainer, TrainConfig};

    fn model() -> ReorderNatParams {
        ReorderNatParams::new(ModelConfig {
            architecture: Architecture::ReorderNat(ReorderKind::At),
            n_layers: 2,
            model_dim: 8,
            hidden_dim: 12,
            vocab_size: 12,
            max_len: 10,
            max_len_offset: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let t = Trainer::new(model(), TrainConfig::default()).unwrap();
        let mut ck = t.checkpoint();
        ck.step = 17;
        ck.optimizer.as_mut().unwrap().m[0][0] = 0.125;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.step, 17);
        assert_eq!(back.mode, GuidingMode::Dgd);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((na, a), (nb, b)) in back.model.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = Checkpoint::new(model(), GuidingMode::Ndgd).to_bytes();
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(e, Error::Checkpoint(ref m) if m.contains("truncated")), "{e}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("at byte 8"));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(model(), GuidingMode::Dgd);
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.model.census(), ck.model.census());
        assert!(Checkpoint::load(dir.path().join("missing")).is_err());
    }
}
