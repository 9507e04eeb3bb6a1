//! Checkpoint files.
//!
//! ```text
//! magic "M2TM" | version u8
//! layers u32 | width u32 | mlp_hidden u32 | heads u32 | c u32 | n_mix u32 | w_t u32
//! delta f64 | mode u8 (0 = mt, 1 = m2t)
//! tensor_count u32
//! per tensor: name_len u16 | name (utf-8) | ndim u8 | dims u32[ndim] | f64[prod(dims)]
//! ```
//!
//! All integers and floats little-endian. Tensors appear in layout order.

use std::fs;
use std::path::Path;

use super::{Mode, Model, ModelConfig, ParamLayout};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"M2TM";
pub const CKPT_VERSION: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated("checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(&CKPT_MAGIC);
        out.push(CKPT_VERSION);
        for v in [c.layers, c.width, c.mlp_hidden, c.heads, c.c, c.n_mix, c.w_t] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.delta.to_le_bytes());
        out.push(c.mode.code());
        out.extend_from_slice(&(self.layout.entries.len() as u32).to_le_bytes());
        for e in &self.layout.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.params[e.range.clone()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if found != CKPT_MAGIC {
            return Err(Error::BadMagic { expected: CKPT_MAGIC, found });
        }
        let version = r.u8()?;
        if version != CKPT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [layers, width, mlp_hidden, heads, c, n_mix, w_t] = dims;
        let delta = r.f64()?;
        let mode = Mode::from_code(r.u8()?)?;
        let config = ModelConfig { layers, width, mlp_hidden, heads, c, n_mix, w_t, delta, mode };
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let count = r.u32()? as usize;
        if count != layout.entries.len() {
            return Err(Error::Model(format!("checkpoint has {count} tensors, config needs {}", layout.entries.len())));
        }
        let mut params = vec![0.0; layout.total];
        for e in &layout.entries {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Model("tensor name is not utf-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != e.name || shape != e.shape {
                return Err(Error::Model(format!("expected tensor {} {:?}, found {name} {shape:?}", e.name, e.shape)));
            }
            for p in &mut params[e.range.clone()] {
                *p = r.f64()?;
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Model(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
        }
        Ok(Self { config, layout, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
