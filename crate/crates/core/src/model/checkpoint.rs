//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"RCDN1"`, `u64` config length, canonical JSON config, then one record per
//! parameter and running statistic until end of file:
//! `u32` name length, UTF-8 name, `u32` rank, `rank x u64` extents, `f64` values.

use std::collections::HashSet;
use std::path::Path;

use super::{ModelConfig, RcdnModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RCDN1";

impl RcdnModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(64 + 8 * (self.param_count() + config.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        for named in self.params.iter().chain(&self.buffers) {
            out.extend_from_slice(&(named.name.len() as u32).to_le_bytes());
            out.extend_from_slice(named.name.as_bytes());
            out.extend_from_slice(&(named.tensor.shape().len() as u32).to_le_bytes());
            for &e in named.tensor.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in named.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let len = r.u64("config length")? as usize;
        let at = r.pos;
        let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Parse {
            offset: at,
            message: format!("config: {e}"),
        })?;
        let mut model = RcdnModel::new(config)?;
        let mut seen = HashSet::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.error(start, "name is not UTF-8"))?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let slot = model
                .params
                .iter_mut()
                .chain(model.buffers.iter_mut())
                .find(|p| p.name == name)
                .ok_or_else(|| r.error(start, &format!("unknown tensor `{name}`")))?;
            if slot.tensor.shape() != shape.as_slice() {
                return Err(r.error(
                    start,
                    &format!(
                        "tensor `{name}` has shape {shape:?}, model expects {:?}",
                        slot.tensor.shape()
                    ),
                ));
            }
            for v in slot.tensor.data_mut() {
                *v = f64::from_le_bytes(r.take(8, "value")?.try_into().expect("8 bytes"));
            }
            if !seen.insert(name.clone()) {
                return Err(r.error(start, &format!("duplicate tensor `{name}`")));
            }
        }
        let expected = model.params.len() + model.buffers.len();
        if seen.len() != expected {
            let missing: Vec<&str> = model
                .params
                .iter()
                .chain(&model.buffers)
                .map(|p| p.name.as_str())
                .filter(|n| !seen.contains(*n))
                .collect();
            return Err(r.error(bytes.len(), &format!("missing tensors {missing:?}")));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Parse {
            offset,
            message: message.to_owned(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, &format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(model: &RcdnModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RcdnModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RcdnModel::from_bytes(&bytes)
}
