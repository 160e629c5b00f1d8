//! `RPML` weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RPML" version
//! meta_len meta_bytes                       (UTF-8 JSON)
//! count
//! count × { name_len name ndim dim[ndim] }  (manifest)
//! count × { name_len name f32[numel] }      (tensor records)
//! ```
//!
//! Tensors are written sorted by name and restored to that order on load
//! whatever the order on disk.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClsModel, ModelConfig, SegModel};
use crate::error::{Error, Result};
use crate::nn::Module;

pub const RPML_MAGIC: &[u8; 4] = b"RPML";
pub const RPML_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Seg,
    Cls,
}

/// JSON stored in the metadata string of model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub kind: ModelKind,
    pub config: ModelConfig,
}

impl ModelWeights {
    /// Snapshot of every parameter and buffer of `module`.
    pub fn from_module<M: Module<f32> + ?Sized>(module: &M, metadata: String) -> Self {
        let mut tensors: Vec<NamedTensor> = module
            .named_params()
            .into_iter()
            .map(|(name, p)| NamedTensor { name, shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
            .chain(module.named_buffers().into_iter().map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            }))
            .collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { metadata, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.binary_search_by(|t| t.name.as_str().cmp(name)).ok().map(|i| &self.tensors[i])
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.tensors.windows(2) {
            if w[0].name >= w[1].name {
                return Err(Error::validation(format!("tensor names not unique and sorted at {:?}", w[1].name)));
            }
        }
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::validation(format!("tensor {:?} does not match its shape", t.name)));
            }
        }
        Ok(())
    }

    /// Copies tensors into `module`. Every parameter and buffer of the module
    /// must be present with the same shape; nothing is written otherwise.
    pub fn apply_to<M: Module<f32> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let check = |name: &str, shape: &[usize]| -> Result<()> {
            let t = self.get(name).ok_or_else(|| Error::validation(format!("missing tensor {name:?}")))?;
            if t.shape != shape {
                return Err(Error::validation(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(())
        };
        for (name, p) in module.named_params() {
            check(&name, p.value.shape())?;
        }
        for (name, b) in module.named_buffers() {
            check(&name, b.shape())?;
        }
        for (name, p) in module.named_params_mut() {
            p.value.data_mut().copy_from_slice(&self.get(&name).expect("checked").data);
        }
        for (name, b) in module.named_buffers_mut() {
            b.data_mut().copy_from_slice(&self.get(&name).expect("checked").data);
        }
        Ok(())
    }

    pub fn meta(&self) -> Result<WeightsMeta> {
        serde_json::from_str(&self.metadata).map_err(|e| Error::format(format!("weight metadata: {e}")))
    }

    pub fn from_seg(seg: &SegModel<f32>, config: &ModelConfig) -> Self {
        let meta = WeightsMeta { kind: ModelKind::Seg, config: config.clone() };
        Self::from_module(seg, serde_json::to_string(&meta).expect("serializable"))
    }

    pub fn from_cls(cls: &ClsModel<f32>) -> Self {
        let config = ModelConfig { seg: cls.seg.config.clone(), cls: cls.config.clone() };
        let meta = WeightsMeta { kind: ModelKind::Cls, config };
        Self::from_module(cls, serde_json::to_string(&meta).expect("serializable"))
    }

    /// Segmentation model from a seg file, or the frozen base of a cls file.
    pub fn to_seg(&self) -> Result<SegModel<f32>> {
        let meta = self.meta()?;
        let mut seg = SegModel::new(meta.config.seg, &mut ChaCha8Rng::seed_from_u64(0))?;
        match meta.kind {
            ModelKind::Seg => self.apply_to(&mut seg)?,
            ModelKind::Cls => {
                let sub = ModelWeights {
                    metadata: String::new(),
                    tensors: self
                        .tensors
                        .iter()
                        .filter_map(|t| {
                            t.name.strip_prefix("seg.").map(|n| NamedTensor { name: n.to_string(), ..t.clone() })
                        })
                        .collect(),
                };
                sub.apply_to(&mut seg)?;
            }
        }
        Ok(seg)
    }

    pub fn to_cls(&self) -> Result<ClsModel<f32>> {
        let meta = self.meta()?;
        if meta.kind != ModelKind::Cls {
            return Err(Error::validation("weights hold a segmentation model, not a classifier"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = SegModel::new(meta.config.seg, &mut rng)?;
        let mut cls = ClsModel::new(meta.config.cls, seg, &mut rng)?;
        self.apply_to(&mut cls)?;
        Ok(cls)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::validation("value exceeds 32 bits"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_weights<W: Write>(weights: &ModelWeights, mut sink: W) -> Result<()> {
    let mut sorted = weights.clone();
    sorted.tensors.sort_by(|a, b| a.name.cmp(&b.name));
    sorted.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(RPML_MAGIC);
    buf.extend_from_slice(&RPML_VERSION.to_le_bytes());
    put_str(&mut buf, &sorted.metadata)?;
    put_u32(&mut buf, sorted.tensors.len())?;
    for t in &sorted.tensors {
        put_str(&mut buf, &t.name)?;
        put_u32(&mut buf, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut buf, d)?;
        }
    }
    for t in &sorted.tensors {
        put_str(&mut buf, &t.name)?;
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("weight file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))
    }
}

pub fn read_weights<R: Read>(mut source: R) -> Result<ModelWeights> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).map_err(|_| Error::format("not an RPML file"))? != RPML_MAGIC {
        return Err(Error::format("bad magic, not an RPML file"));
    }
    let version = c.u32()? as u32;
    if version > RPML_VERSION {
        return Err(Error::Version { found: version, supported: RPML_VERSION });
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut manifest: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        if manifest.insert(name.clone(), shape).is_some() {
            return Err(Error::validation(format!("duplicate manifest entry {name:?}")));
        }
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let shape = manifest
            .remove(&name)
            .ok_or_else(|| Error::validation(format!("tensor {name:?} not in manifest or repeated")))?;
        let numel: usize = shape.iter().product();
        let bytes = c.take(numel.checked_mul(4).ok_or_else(|| Error::format("tensor size overflow"))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(Error::validation("trailing bytes after the last tensor record"));
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(ModelWeights { metadata, tensors })
}

pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_weights(weights, std::io::BufWriter::new(f))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    read_weights(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> ModelWeights {
        ModelWeights {
            metadata: "{}".into(),
            tensors: vec![
                NamedTensor { name: "a".into(), shape: vec![2, 2], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5] },
                NamedTensor { name: "b".into(), shape: vec![3], data: vec![0.1, 0.2, 0.3] },
            ],
        }
    }

    fn bytes(w: &ModelWeights) -> Vec<u8> {
        let mut out = Vec::new();
        write_weights(w, &mut out).unwrap();
        out
    }

    #[test]
    fn roundtrip_bit_exact() {
        let w = fixture();
        let back = read_weights(&bytes(&w)[..]).unwrap();
        assert_eq!(back.metadata, w.metadata);
        for (a, b) in back.tensors.iter().zip(&w.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncation_is_format_error() {
        let b = bytes(&fixture());
        for cut in [0, 3, 10, b.len() - 1] {
            assert!(matches!(read_weights(&b[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = bytes(&fixture());
        b[0] = b'X';
        assert!(matches!(read_weights(&b[..]), Err(Error::Format(_))));
        let mut b = bytes(&fixture());
        b[4] = 9;
        assert!(matches!(read_weights(&b[..]), Err(Error::Version { found: 9, .. })));
    }
}
