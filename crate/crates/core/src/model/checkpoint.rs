//! Binary checkpoint: magic, version, a JSON manifest, then named little-endian
//! f32 tensors in parameter order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::VqaModel;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CVQACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Model configuration in `key = value` form.
    pub model_config: String,
    /// Digest of the full run configuration that produced the weights.
    pub config_hash: String,
    pub vocab_digest: String,
    pub class_weights: Vec<f64>,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: VqaModel<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let manifest = serde_json::to_vec(&ckpt.manifest).map_err(|e| Error::json(path, e))?;
    put_u32(&mut out, manifest.len())?;
    out.extend_from_slice(&manifest);
    put_u32(&mut out, ckpt.model.params.len())?;
    for p in ckpt.model.params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let manifest: Manifest =
        serde_json::from_slice(r.bytes(len)?).map_err(|e| Error::json(path, e))?;
    let config = ModelConfig::from_kv(&manifest.model_config)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.bytes(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let listed: Vec<ParamEntry> = params
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    if listed != manifest.params {
        return Err(Error::Checkpoint("parameter table disagrees with manifest".into()));
    }
    let mut model = VqaModel::init(config, 0)?;
    model.load_params(params)?;
    Ok(Checkpoint { manifest, model })
}

impl Checkpoint {
    pub fn new(model: VqaModel<f32>, config_hash: String, vocab_digest: String, class_weights: Vec<f64>, epoch: usize) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                model_config: model.config.to_kv(),
                config_hash,
                vocab_digest,
                class_weights,
                epoch,
                params,
            },
            model,
        }
    }
}
