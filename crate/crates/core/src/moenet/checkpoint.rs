//! Binary checkpoint container. The layout is described in `docs/checkpoint.md`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::MoeConfig;
use super::model::MoeModel;
use crate::diffkernel::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOELIOCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

/// Serializes the model configuration and all parameters.
pub fn to_bytes(model: &MoeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text: String = model
        .config()
        .entries()
        .into_iter()
        .map(|(k, v)| format!("moe.{k} = {v}\n"))
        .collect();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    put_u32(&mut out, params.len());
    for (_, name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("text is not UTF-8".into()))
    }
}

fn parse_config(text: &str) -> Result<MoeConfig> {
    let mut cfg = MoeConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        let key = k.trim().strip_prefix("moe.").unwrap_or(k.trim());
        cfg.set(key, v.trim())
            .map_err(|m| Error::Checkpoint(format!("config key {key}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and verifies a checkpoint, rebuilding the model it describes.
pub fn from_bytes(buf: &[u8]) -> Result<MoeModel> {
    if buf.len() < MAGIC.len() + 4 + DIGEST_LEN || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = parse_config(r.str()?)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?.to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.register(name, Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter arrays".into()));
    }
    let mut model = MoeModel::new(cfg, 0)?;
    model.load_params(&store)?;
    Ok(model)
}

pub fn save(model: &MoeModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MoeModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
