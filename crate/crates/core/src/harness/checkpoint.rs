//! `BMFL` checkpoint files.
//!
//! Layout, little-endian: magic `BMFL`, version u32, config JSON (u32 length
//! + bytes), parameter count u32, then per parameter: name (u16 length +
//! bytes), trainable flag u8, rank u8, dims u32×rank, f32 payload. An
//! optimizer flag u8 follows; when set: step u64, β1 β2 ε weight decay as
//! f64, slot count u32, then per slot: name, length u32, first and second
//! moments as f32. A CRC32 of all preceding bytes closes the file.

use std::path::Path;

use super::bytes::{unseal, Reader, Writer};
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"BMFL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.len_u32(json.len(), "config length")?;
        w.bytes(&json);
        w.len_u32(self.params.len(), "parameter count")?;
        for (_, name, t) in self.params.iter() {
            w.name(name)?;
            w.u8(t.requires_grad() as u8);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("{name}: rank too large")))?;
            w.u8(rank);
            for &d in t.shape() {
                w.len_u32(d, "dimension")?;
            }
            w.f32s(t.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.step);
                for v in [s.config.beta1, s.config.beta2, s.config.eps, s.config.weight_decay] {
                    w.f64(v);
                }
                w.len_u32(s.names.len(), "optimizer slots")?;
                for ((name, m), v) in s.names.iter().zip(&s.first_moment).zip(&s.second_moment) {
                    w.name(name)?;
                    w.len_u32(m.len(), "moment length")?;
                    w.f32s(m);
                    w.f32s(v);
                }
            }
        }
        Ok(w.seal())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 8 || &data[..4] != MAGIC {
            return Err(Error::Format("not a BMFL checkpoint".into()));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let body = unseal(data, "checkpoint")?;
        let mut r = Reader::new(&body[8..], "checkpoint");
        let n = r.u32()? as usize;
        let config: RunConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| r.err(&format!("config: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.name()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(r.err(&format!("bad trainable flag {b}"))),
            };
            let shape = r.shape()?;
            let len = shape.iter().product();
            let t = Tensor::new(shape, r.f32s(len)?)?;
            let id = params.insert(&name, t).map_err(|e| r.err(&e.to_string()))?;
            params.get_mut(id).set_requires_grad(trainable);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamWConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let slots = r.u32()? as usize;
                let mut s = OptimizerState {
                    config,
                    step,
                    names: Vec::new(),
                    first_moment: Vec::new(),
                    second_moment: Vec::new(),
                };
                for _ in 0..slots {
                    s.names.push(r.name()?);
                    let len = r.u32()? as usize;
                    if len.saturating_mul(8) > r.remaining() {
                        return Err(r.err("implausible moment length"));
                    }
                    s.first_moment.push(r.f32s(len)?);
                    s.second_moment.push(r.f32s(len)?);
                }
                Some(s)
            }
            b => return Err(r.err(&format!("bad optimizer flag {b}"))),
        };
        r.expect_end()?;
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&data)
    }

    /// Bitwise comparison of parameters, optimizer state and config.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        let opt = match (&self.optimizer, &other.optimizer) {
            (None, None) => true,
            (Some(a), Some(b)) => a.bitwise_eq(b),
            _ => false,
        };
        self.config == other.config && self.params.bitwise_eq(&other.params) && opt
    }
}
