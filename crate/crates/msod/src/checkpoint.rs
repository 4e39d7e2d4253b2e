//! `MSOD1` parameter files: the magic, then per tensor a `u32` name
//! length, the UTF-8 name, a `u32` rank, `u64` extents and the values as
//! little-endian `f64`. All integers are little-endian. The resolved run
//! config is written next to it as `<file>.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use msod_core::params::ParamSet;
use msod_core::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MSOD1";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "byte {}: file ends inside {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("byte 0: missing MSOD1 magic".into());
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("byte {}: name is not UTF-8", at + 4))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| format!("byte {at}: `{name}` has an impossible shape {shape:?}"))?;
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("byte {at}: {e}"))?;
        params.add(name, t).map_err(|e| format!("byte {at}: {e}"))?;
    }
    Ok(params)
}

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save(path: &Path, params: &ParamSet, cfg: &RunConfig) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let cfg_path = config_path(path);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

/// Parameters and the config they were trained with.
pub fn load(path: &Path) -> Result<(ParamSet, RunConfig)> {
    let params = load_params(path)?;
    let cfg = RunConfig::load(&config_path(path))?;
    Ok((params, cfg))
}
