//! Binary model files.
//!
//! Layout: magic, version byte, eight little-endian `u32` config values
//! (block_h, block_w, channels, d, heads, T, ffn_hidden, max_seq_len), a `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `u32` dims and little-endian `f64` values.

use std::fs;
use std::path::Path;

use super::{ConsentModel, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CNSNT";
pub const VERSION: u8 = 1;

/// Marker tensor recording that positional encodings are on.
const POSITIONS_FLAG: &str = "flags.sinusoidal_positions";

impl ConsentModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [
            c.block_height,
            c.block_width,
            c.channels,
            c.embed_dim,
            c.num_heads,
            c.num_stacks,
            c.ffn_hidden,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let flag = Tensor::full(&[1], 1.0);
        let mut tensors: Vec<(&str, &Tensor)> = self.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
        if c.sinusoidal_positions {
            tensors.push((POSITIONS_FLAG, &flag));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let prefix = &bytes[..bytes.len().min(MAGIC.len())];
        if prefix != &MAGIC[..prefix.len()] {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 0 };
        r.take(MAGIC.len(), "magic")?;
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32("config")? as usize;
        }
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let mut positions = false;
        for i in 0..count {
            let what = format!("tensor {} of {count}", i + 1);
            let len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::ModelMismatch(format!("{what} has a non-UTF-8 name")))?
                .to_string();
            let rank = r.u8(&what)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&what)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(what.clone()))?, &what)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if name == POSITIONS_FLAG {
                positions = true;
                continue;
            }
            let value = Tensor::new(shape, data).map_err(|e| Error::ModelMismatch(format!("{name}: {e}")))?;
            params.push(Param { name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::ModelMismatch(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        let config = ModelConfig {
            block_height: dims[0],
            block_width: dims[1],
            channels: dims[2],
            embed_dim: dims[3],
            num_heads: dims[4],
            num_stacks: dims[5],
            ffn_hidden: dims[6],
            max_seq_len: dims[7],
            sinusoidal_positions: positions,
        };
        config.validate().map_err(|e| Error::ModelMismatch(e.to_string()))?;
        ConsentModel::from_params(config, params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_model(model: &ConsentModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ConsentModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ConsentModel::from_bytes(&bytes)
}
