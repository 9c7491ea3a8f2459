//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"KALABTNS"  u32 version
//! u32 n_meta   { u32 len, key bytes, u32 len, value bytes }*
//! u32 n_tensor { u32 len, name bytes, u32 rank, u32 dims[rank], f32 data[prod(dims)] }*
//! u64 FNV-1a of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::fnv1a;

pub const MAGIC: &[u8; 8] = b"KALABTNS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("{} (at byte {})", reason.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut buf, &t.name);
            put_u32(&mut buf, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut buf, d as u32);
            }
            buf.reserve(t.data.len() * 4);
            for &x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    /// Parses a checkpoint; `path` is only used in diagnostics.
    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if buf.len() < MAGIC.len() + 12 || &buf[..8] != MAGIC {
            return Err(fail("bad magic (not a checkpoint file)"));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(fail("checksum mismatch (file is corrupt or truncated)"));
        }
        let mut r = Reader { buf: body, pos: 8, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported format version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(r.fail("trailing bytes after last tensor"));
        }
        Ok(ck)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn model_config(&self, path: &Path) -> Result<ModelConfig> {
        let get = |k: &str| -> Result<usize> {
            self.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("missing or invalid metadata key {k}"),
                })
        };
        Ok(ModelConfig {
            vocab_size: get("vocab_size")?,
            context_len: get("context_len")?,
            d_model: get("d_model")?,
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            d_ffn: get("d_ffn")?,
        })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

pub fn config_meta(cfg: &ModelConfig) -> BTreeMap<String, String> {
    [
        ("vocab_size", cfg.vocab_size),
        ("context_len", cfg.context_len),
        ("d_model", cfg.d_model),
        ("n_layers", cfg.n_layers),
        ("n_heads", cfg.n_heads),
        ("d_ffn", cfg.d_ffn),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Appends every model tensor under its layout name, prefixed.
pub fn push_params(ck: &mut Checkpoint, model: &Model<f32>, prefix: &str, buf: &[f32]) {
    for spec in &model.layout.specs {
        ck.push(format!("{prefix}{}", spec.name), spec.shape.clone(), buf[spec.range.clone()].to_vec());
    }
}

/// Reads a flat buffer laid out like `model` from prefixed tensors.
pub fn read_params(ck: &Checkpoint, model: &Model<f32>, prefix: &str, path: &Path) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; model.layout.total];
    for spec in &model.layout.specs {
        let name = format!("{prefix}{}", spec.name);
        let t = ck.tensor(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if t.dims != spec.shape {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has shape {:?}, expected {:?}", t.dims, spec.shape),
            });
        }
        out[spec.range.clone()].copy_from_slice(&t.data);
    }
    Ok(out)
}

pub fn model_checkpoint(model: &Model<f32>) -> Checkpoint {
    let mut ck = Checkpoint {
        meta: config_meta(&model.config),
        tensors: Vec::new(),
    };
    push_params(&mut ck, model, "", &model.params);
    ck
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn model_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Model<f32>> {
    let cfg = ck.model_config(path)?;
    let shell = Model::from_params(cfg.clone(), vec![0.0; cfg.param_count()])?;
    let params = read_params(ck, &shell, "", path)?;
    Model::from_params(cfg, params)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    model_from_checkpoint(&Checkpoint::load(path)?, path)
}
