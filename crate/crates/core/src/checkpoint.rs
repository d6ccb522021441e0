//! `ZQH1` tensor container.
//!
//! Layout: 4-byte magic `ZQH1`, little-endian u32 manifest length `L`, `L`
//! bytes of UTF-8 JSON manifest, then the payload. Tensor offsets are
//! relative to the payload start and 64-byte aligned; the manifest is padded
//! with trailing spaces so the payload itself starts on a 64-byte boundary.
//! All values are little-endian, row-major.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Embeddings, LayerParams, Linear};
use crate::model::{Batch, Model, ModelConfig, QuantizedModel};
use crate::reference::LnParams;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"ZQH1";
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::I8(_) => DType::I8,
            DynTensor::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::I8(t) => t.shape(),
            DynTensor::I32(t) => t.shape(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            DynTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DynTensor::I8(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DynTensor::I32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    fn nbytes(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size_bytes()
    }
}

impl From<Tensor<f32>> for DynTensor {
    fn from(t: Tensor<f32>) -> Self {
        DynTensor::F32(t)
    }
}

impl From<Tensor<i8>> for DynTensor {
    fn from(t: Tensor<i8>) -> Self {
        DynTensor::I8(t)
    }
}

impl From<Tensor<i32>> for DynTensor {
    fn from(t: Tensor<i32>) -> Self {
        DynTensor::I32(t)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Named tensors plus an optional model config and free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, DynTensor>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<DynTensor>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: t.dtype().name().to_string(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
                nbytes: t.nbytes() as u64,
            });
            offset = align_up(offset + t.nbytes());
        }
        let manifest = Manifest { config: self.config, meta: self.meta.clone(), tensors: entries };
        let mut json = serde_json::to_vec(&manifest)?;
        json.resize(align_up(8 + json.len()) - 8, b' ');
        let len = u32::try_from(json.len()).map_err(|_| Error::input("manifest exceeds 4 GiB"))?;

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for t in self.tensors.values() {
            t.write_le(&mut out);
            out.resize(payload_start + align_up(out.len() - payload_start), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated("header shorter than 8 bytes".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated(format!("manifest of {len} bytes runs past end of file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| Error::Manifest(format!("unparseable manifest: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let dtype = match e.dtype.as_str() {
                "f32" => DType::F32,
                "i8" => DType::I8,
                "i32" => DType::I32,
                other => return Err(Error::UnknownDtype(other.to_string())),
            };
            let numel: usize = e.shape.iter().product();
            if e.nbytes as usize != numel * dtype.size_bytes() {
                return Err(Error::Manifest(format!(
                    "`{}` declares {} bytes for shape {:?} of {dtype}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    Error::Truncated(format!(
                        "`{}` spans {}..{} but the payload has {} bytes",
                        e.name,
                        e.offset,
                        e.offset + e.nbytes,
                        payload.len()
                    ))
                })?;
            let raw = &payload[start..end];
            let manifest_err = |err: Error| Error::Manifest(format!("`{}`: {err}", e.name));
            let t = match dtype {
                DType::F32 => DynTensor::F32(
                    Tensor::new(
                        &e.shape,
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                    .map_err(manifest_err)?,
                ),
                DType::I8 => DynTensor::I8(
                    Tensor::new(&e.shape, raw.iter().map(|&b| b as i8).collect()).map_err(manifest_err)?,
                ),
                DType::I32 => DynTensor::I32(
                    Tensor::new(
                        &e.shape,
                        raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                    .map_err(manifest_err)?,
                ),
                DType::U8 => unreachable!(),
            };
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Manifest(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self { config: manifest.config, meta: manifest.meta, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    fn take_f32(&mut self, name: &str) -> Result<Tensor<f32>> {
        match self.tensors.remove(name) {
            Some(DynTensor::F32(t)) => Ok(t),
            Some(other) => Err(Error::Manifest(format!("`{name}` must be f32, found {}", other.dtype()))),
            None => Err(Error::Manifest(format!("missing tensor `{name}`"))),
        }
    }

    fn take_i32(&mut self, name: &str) -> Result<Option<Tensor<i32>>> {
        match self.tensors.remove(name) {
            Some(DynTensor::I32(t)) => Ok(Some(t)),
            Some(other) => Err(Error::Manifest(format!("`{name}` must be i32, found {}", other.dtype()))),
            None => Ok(None),
        }
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self.take_f32(name)?;
        if t.shape() != shape {
            return Err(Error::Manifest(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn take_vec(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.take_shaped(name, &[len])?.into_data())
    }

    fn take_linear(&mut self, prefix: &str, w: &str, b: &str, shape: [usize; 2]) -> Result<Linear> {
        let wt = self.take_shaped(&format!("{prefix}{w}"), &shape)?;
        let bt = self.take_vec(&format!("{prefix}{b}"), shape[1])?;
        Linear::new(wt, bt)
    }

    fn take_ln(&mut self, prefix: &str, d: usize, eps: f32) -> Result<LnParams> {
        let g = self.take_vec(&format!("{prefix}.gamma"), d)?;
        let b = self.take_vec(&format!("{prefix}.beta"), d)?;
        LnParams::new(g, b, eps)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn ln_tensors(c: &mut Container, prefix: &str, ln: &LnParams) -> Result<()> {
    let d = ln.dim();
    c.insert(format!("{prefix}.gamma"), Tensor::new(&[d], ln.gamma.clone())?);
    c.insert(format!("{prefix}.beta"), Tensor::new(&[d], ln.beta.clone())?);
    Ok(())
}

fn linear_tensors(c: &mut Container, w: String, b: String, l: &Linear) -> Result<()> {
    c.insert(w, l.w.clone());
    c.insert(b, Tensor::new(&[l.b.len()], l.b.clone())?);
    Ok(())
}

impl Model {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container { config: Some(self.config), ..Default::default() };
        let e = &self.embeddings;
        c.insert("emb.token_table", e.token.clone());
        c.insert("emb.pos_table", e.position.clone());
        c.insert("emb.type_table", e.token_type.clone());
        ln_tensors(&mut c, "emb.ln", &e.ln)?;
        for (k, l) in self.layers.iter().enumerate() {
            let p = format!("layer{k}.");
            for (suffix, lin) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o), ("1", &l.fc1), ("2", &l.fc2)] {
                linear_tensors(&mut c, format!("{p}W_{suffix}"), format!("{p}b_{suffix}"), lin)?;
            }
            ln_tensors(&mut c, &format!("{p}ln1"), &l.ln1)?;
            ln_tensors(&mut c, &format!("{p}ln2"), &l.ln2)?;
        }
        if let Some(pool) = &self.pooler {
            linear_tensors(&mut c, "pool.W".into(), "pool.b".into(), pool)?;
        }
        if let Some(head) = &self.classifier {
            linear_tensors(&mut c, "cls.W".into(), "cls.b".into(), head)?;
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let cfg = c.config.ok_or_else(|| Error::Manifest("model container has no config".into()))?;
        cfg.validate()?;
        let (d, f, eps) = (cfg.d_model, cfg.d_ff, cfg.ln_eps);
        let embeddings = Embeddings {
            token: c.take_shaped("emb.token_table", &[cfg.vocab_size, d])?,
            position: c.take_shaped("emb.pos_table", &[cfg.max_positions, d])?,
            token_type: c.take_shaped("emb.type_table", &[cfg.type_vocab, d])?,
            ln: c.take_ln("emb.ln", d, eps)?,
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for k in 0..cfg.n_layers {
            let p = format!("layer{k}.");
            layers.push(LayerParams {
                q: c.take_linear(&p, "W_q", "b_q", [d, d])?,
                k: c.take_linear(&p, "W_k", "b_k", [d, d])?,
                v: c.take_linear(&p, "W_v", "b_v", [d, d])?,
                o: c.take_linear(&p, "W_o", "b_o", [d, d])?,
                ln1: c.take_ln(&format!("{p}ln1"), d, eps)?,
                fc1: c.take_linear(&p, "W_1", "b_1", [d, f])?,
                fc2: c.take_linear(&p, "W_2", "b_2", [f, d])?,
                ln2: c.take_ln(&format!("{p}ln2"), d, eps)?,
                n_heads: cfg.n_heads,
            });
        }
        let pooler = if c.tensors.contains_key("pool.W") {
            Some(c.take_linear("pool.", "W", "b", [d, d])?)
        } else {
            None
        };
        let classifier = if cfg.n_labels > 0 {
            Some(c.take_linear("cls.", "W", "b", [d, cfg.n_labels])?)
        } else {
            None
        };
        if let Some(extra) = c.tensors.keys().next() {
            return Err(Error::Manifest(format!("unexpected tensor `{extra}`")));
        }
        let model = Model { config: cfg, embeddings, layers, pooler, classifier };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }
}

impl QuantizedModel {
    /// The quantized artifacts of this model: int8 values, column/row scales
    /// and epilogue biases of every INT8 slot, plus the mode under `meta.mode`.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container { config: Some(*self.config()), ..Default::default() };
        c.meta.insert("mode".into(), serde_json::to_value(self.mode())?);
        if let Some(q) = self.embedding().token_table_q() {
            c.insert("emb.token_table.int8", q.as_i8().expect("TWQ values are i8").clone());
            c.insert("emb.token_table.scales", Tensor::new(&[q.scales().len()], q.scales().to_vec())?);
        }
        for (k, layer) in self.layers().iter().enumerate() {
            for (name, ql) in layer.quantized_weights() {
                let p = format!("layer{k}.{name}");
                c.insert(format!("{p}.int8"), ql.weight.values.clone());
                let s = &ql.weight.col_scales;
                c.insert(format!("{p}.scales"), Tensor::new(&[s.len()], s.clone())?);
                c.insert(format!("{p}.bias"), Tensor::new(&[ql.bias.len()], ql.bias.clone())?);
            }
        }
        Ok(c)
    }
}

/// Token batches for calibration and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchData {
    pub ids: Tensor<i32>,
    pub mask: Tensor<i32>,
    pub labels: Option<Vec<i32>>,
}

impl BatchData {
    pub fn new(ids: Tensor<i32>, mask: Tensor<i32>, labels: Option<Vec<i32>>) -> Result<Self> {
        let all = Batch::new(ids, mask)?;
        if let Some(l) = &labels {
            if l.len() != all.n_seq() {
                return Err(Error::shape(format!("{} labels for {} rows", l.len(), all.n_seq())));
            }
        }
        Ok(Self { ids: all.ids, mask: all.mask, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.ids.shape()[1]
    }

    pub fn all(&self) -> Batch {
        Batch { ids: self.ids.clone(), mask: self.mask.clone() }
    }

    /// Consecutive row chunks of `batch_size`; the last one may be shorter.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        let all = self.all();
        (0..self.n_rows())
            .step_by(batch_size)
            .map(|start| all.rows(start, batch_size.min(self.n_rows() - start)))
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        c.insert("ids", self.ids.clone());
        c.insert("mask", self.mask.clone());
        if let Some(l) = &self.labels {
            c.insert("labels", Tensor::new(&[l.len()], l.clone())?);
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let ids = c.take_i32("ids")?.ok_or_else(|| Error::Manifest("missing tensor `ids`".into()))?;
        let mask = c.take_i32("mask")?.ok_or_else(|| Error::Manifest("missing tensor `mask`".into()))?;
        let labels = c.take_i32("labels")?.map(Tensor::into_data);
        Self::new(ids, mask, labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.insert("a", Tensor::new(&[2, 3], vec![1.5f32, -2.0, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap());
        c.insert("b", Tensor::new(&[5], vec![-127i8, 0, 1, 2, 127]).unwrap());
        c.insert("c", Tensor::new(&[1], vec![i32::MAX]).unwrap());
        c
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ZQH1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!((8 + len) % ALIGN, 0);
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        let offsets: Vec<u64> =
            manifest["tensors"].as_array().unwrap().iter().map(|e| e["offset"].as_u64().unwrap()).collect();
        assert_eq!(offsets, vec![0, 64, 128]);
        assert!(manifest.get("config").is_none());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::BadMagic)));
        assert!(matches!(Container::from_bytes(b"ZQ"), Err(Error::BadMagic)));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 70];
        assert!(matches!(Container::from_bytes(cut), Err(Error::Truncated(_))));
        assert!(matches!(Container::from_bytes(&bytes[..20]), Err(Error::Truncated(_))));
    }

    fn with_manifest(edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let bytes = sample().to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        edit(&mut manifest);
        let mut json = serde_json::to_vec(&manifest).unwrap();
        json.resize(len, b' ');
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + len..]);
        out
    }

    #[test]
    fn length_beyond_payload_is_truncation() {
        let bytes = with_manifest(|m| {
            m["tensors"][2]["shape"] = serde_json::json!([100]);
            m["tensors"][2]["nbytes"] = serde_json::json!(400);
        });
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn unknown_dtype_and_shape_mismatch() {
        let bytes = with_manifest(|m| m["tensors"][0]["dtype"] = serde_json::json!("f16"));
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::UnknownDtype(d)) if d == "f16"));
        let bytes = with_manifest(|m| m["tensors"][0]["shape"] = serde_json::json!([3, 3]));
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Manifest(_))));
    }

    #[test]
    fn batch_data_round_trip() {
        let ids = Tensor::new(&[2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let mask = Tensor::new(&[2, 3], vec![1, 1, 0, 1, 1, 1]).unwrap();
        let data = BatchData::new(ids, mask, Some(vec![0, 1])).unwrap();
        let back = BatchData::from_container(Container::from_bytes(&data.to_container().unwrap().to_bytes().unwrap()).unwrap())
            .unwrap();
        assert_eq!(back, data);
        assert_eq!(data.batches(1).unwrap().len(), 2);
        assert!(BatchData::new(data.ids.clone(), data.mask.clone(), Some(vec![1])).is_err());
    }
}
