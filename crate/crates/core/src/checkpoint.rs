//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "ZIPC" version
//! meta_len meta_json
//! n_params { name_len name ndim dims.. values(f32 x numel) }
//! n_moment_entries { param_index n_bufs { len values(f64 x len) } }
//! ```

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DecoderBackbone};
use crate::error::{Error, Result};
use crate::fusion::{ZipperConfig, ZipperModel};
use crate::numeric::{ParamStore, Tensor};
use crate::training::{OptimizerKind, OptimizerState, SingleDecoder};

pub const MAGIC: &[u8; 4] = b"ZIPC";
pub const FORMAT_VERSION: u32 = 1;

/// Architecture needed to rebuild a model around stored parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Backbone { config: BackboneConfig },
    Zipper { text: BackboneConfig, speech: BackboneConfig, zipper: ZipperConfig },
    SingleDecoder { config: BackboneConfig, speech_offset: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    /// Free-form run configuration snapshot.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub moments: Vec<(usize, Vec<Vec<f64>>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore<f32>, opt: Option<&OptimizerState>) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), values: t.data().to_vec() })
            .collect();
        let mut meta = meta;
        if let Some(o) = opt {
            meta.optimizer = Some(OptimizerMeta { kind: o.kind, learning_rate: o.learning_rate, step: o.step });
        }
        let moments = opt.map(OptimizerState::export_moments).unwrap_or_default();
        Checkpoint { meta, params, moments }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                put_u32(&mut out, d)?;
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.moments.len())?;
        for (i, bufs) in &self.moments {
            put_u32(&mut out, *i)?;
            put_u32(&mut out, bufs.len())?;
            for b in bufs {
                put_u32(&mut out, b.len())?;
                for v in b {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let n = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
        let n_params = r.u32()?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(NamedTensor { name, shape, values });
        }
        let n_moments = r.u32()?;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let idx = r.u32()?;
            let n_bufs = r.u32()?;
            let mut bufs = Vec::with_capacity(n_bufs);
            for _ in 0..n_bufs {
                let len = r.u32()?;
                let bytes = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("buffer too large".into()))?)?;
                bufs.push(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
            }
            moments.push((idx, bufs));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { meta, params, moments })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Writes stored values into `store`, which must hold exactly the same
    /// names and shapes. Gradient flags of `store` are kept.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in &self.params {
            let id = store.id(&p.name).ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(Error::ParamMismatch { name: p.name.clone(), expected: t.shape().to_vec(), found: p.shape.clone() });
            }
            let flag = t.requires_grad();
            let mut fresh = Tensor::new(p.shape.clone(), p.values.clone())?;
            fresh.set_requires_grad(flag);
            *t = fresh;
        }
        if let Some((_, name, _)) = store.iter().find(|(_, name, _)| !self.params.iter().any(|p| p.name == *name)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")));
        }
        Ok(())
    }

    /// Optimizer state stored with the checkpoint, if any.
    pub fn optimizer(&self, store: &ParamStore<f32>) -> Result<Option<OptimizerState>> {
        let Some(m) = &self.meta.optimizer else { return Ok(None) };
        let mut opt = OptimizerState::new(m.kind, m.learning_rate);
        opt.step = m.step;
        opt.import_moments(store, self.moments.clone())?;
        Ok(Some(opt))
    }

    pub fn backbone(&self) -> Result<DecoderBackbone<f32>> {
        let ModelSpec::Backbone { config } = &self.meta.model else {
            return Err(Error::Checkpoint("checkpoint does not hold a single tower".into()));
        };
        let mut m = DecoderBackbone::new(config.clone(), 0)?;
        self.apply_to(&mut m.params)?;
        Ok(m)
    }

    pub fn zipper(&self) -> Result<ZipperModel<f32>> {
        let ModelSpec::Zipper { text, speech, zipper } = &self.meta.model else {
            return Err(Error::Checkpoint("checkpoint does not hold a zipped model".into()));
        };
        let mut m = ZipperModel::init(zipper.clone(), text, speech, 0)?;
        self.apply_to(&mut m.params)?;
        Ok(m)
    }

    pub fn single_decoder(&self) -> Result<SingleDecoder<f32>> {
        let ModelSpec::SingleDecoder { config, speech_offset } = &self.meta.model else {
            return Err(Error::Checkpoint("checkpoint does not hold a single decoder".into()));
        };
        let mut backbone = DecoderBackbone::new(config.clone(), 0)?;
        self.apply_to(&mut backbone.params)?;
        Ok(SingleDecoder { backbone, speech_offset: *speech_offset })
    }
}

impl ModelSpec {
    pub fn of_zipper<T>(m: &ZipperModel<T>) -> Self {
        ModelSpec::Zipper { text: m.text.config.clone(), speech: m.speech.config.clone(), zipper: m.config.clone() }
    }

    pub fn of_backbone<T>(m: &DecoderBackbone<T>) -> Self {
        ModelSpec::Backbone { config: m.config.clone() }
    }

    pub fn of_single_decoder<T>(m: &SingleDecoder<T>) -> Self {
        ModelSpec::SingleDecoder { config: m.backbone.config.clone(), speech_offset: m.speech_offset }
    }
}
