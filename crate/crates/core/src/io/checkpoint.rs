//! SVOC container: magic, version, canonical JSON config and a sorted table
//! of little-endian tensors.
//!
//! Layout: `b"SVOC"`, `u32` version, `u64` config length, config bytes,
//! `u32` tensor count, then per tensor `u32` name length, name, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, `u64` dims and the payload.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Generator, GeneratorConfig, GeneratorWeights};
use crate::params::Parameters;
use crate::real::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVOC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FORMAT_GENERATOR: &str = "generator";
const FORMAT_TENSOR: &str = "tensor";
const TENSOR_NAME: &str = "data";

/// One named tensor held as raw little-endian bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn dtype_size(d: Precision) -> usize {
    match d {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

impl StoredTensor {
    pub fn from_array<F: Real>(name: impl Into<String>, a: &ArrayD<F>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * dtype_size(F::PRECISION));
        for &v in a.iter() {
            v.to_le_bytes_vec(&mut bytes);
        }
        Self { name: name.into(), dtype: F::PRECISION, shape: a.shape().to_vec(), bytes }
    }

    /// Values converted to `F`; exact when the stored dtype matches.
    pub fn to_array<F: Real>(&self) -> ArrayD<F> {
        let data: Vec<F> = match self.dtype {
            Precision::F32 => self.bytes.chunks_exact(4).map(|c| F::lit(f64::from(f32::from_le_slice(c)))).collect(),
            Precision::F64 => self.bytes.chunks_exact(8).map(|c| F::lit(f64::from_le_slice(c))).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), data).expect("payload size checked on decode")
    }
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: Value,
    pub tensors: Vec<StoredTensor>,
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Sorted-key JSON with no whitespace.
pub fn canonical_json(v: &Value) -> String {
    serde_json::to_string(&canonical(v)).expect("JSON values always serialise")
}

pub fn encode_tensors(config: &Value, tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&StoredTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(w) = sorted.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(Error::InvalidInput(format!("duplicate tensor name {}", w[0].name)));
    }
    let cfg = canonical_json(config);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for t in sorted {
        let expected = t.shape.iter().product::<usize>() * dtype_size(t.dtype);
        if t.bytes.len() != expected {
            return Err(Error::InvalidInput(format!("tensor {} payload does not match its shape", t.name)));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(match t.dtype {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(corrupt(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(format!("{what} overflows")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Container> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic, not an SVOC file"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let cfg_len = c.len("config length")?;
    let cfg_bytes = c.take(cfg_len, "config")?;
    let config: Value = serde_json::from_slice(cfg_bytes).map_err(|e| corrupt(format!("config JSON: {e}")))?;
    let n = c.u32("tensor count")? as usize;
    let mut tensors: Vec<StoredTensor> = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let dtype = match c.take(1, "dtype")?[0] {
            0 => Precision::F32,
            1 => Precision::F64,
            tag => return Err(corrupt(format!("unknown dtype tag {tag} for {name}"))),
        };
        let rank = c.u32("rank")? as usize;
        if rank > 16 {
            return Err(corrupt(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let size = shape
            .iter()
            .try_fold(dtype_size(dtype), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("payload size of {name} overflows")))?;
        let payload = c.take(size, "tensor payload")?.to_vec();
        if let Some(prev) = tensors.last() {
            if prev.name >= name {
                return Err(corrupt(format!("tensor table not sorted or has duplicates at {name}")));
            }
        }
        tensors.push(StoredTensor { name, dtype, shape, bytes: payload });
    }
    if c.pos != bytes.len() {
        return Err(corrupt("trailing bytes after tensor table"));
    }
    Ok(Container { config, tensors })
}

pub fn write_container(path: impl AsRef<Path>, config: &Value, tensors: &[StoredTensor]) -> Result<()> {
    std::fs::write(path, encode_tensors(config, tensors)?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_tensors(&std::fs::read(path)?)
}

fn format_of(c: &Container) -> Option<&str> {
    c.config.get("format").and_then(Value::as_str)
}

/// Writes config, `meta` and every parameter of `model`.
pub fn save_checkpoint<F: Real>(model: &Generator<F>, meta: &Value, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = Vec::new();
    model.weights.visit(&mut |n, v| tensors.push(StoredTensor::from_array(n, &v.to_owned())));
    let config = serde_json::json!({
        "format": FORMAT_GENERATOR,
        "model": serde_json::to_value(&model.config)?,
        "meta": meta,
    });
    write_container(path, &config, &tensors)
}

/// Model and the metadata object stored with it.
pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<(Generator<F>, Value)> {
    let c = read_container(path)?;
    if format_of(&c) != Some(FORMAT_GENERATOR) {
        return Err(Error::InvalidCheckpoint("file does not hold a generator".into()));
    }
    let cfg: GeneratorConfig = serde_json::from_value(c.config["model"].clone())
        .map_err(|e| Error::InvalidCheckpoint(format!("model config: {e}")))?;
    cfg.validate().map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    let mut stored: BTreeMap<&str, &StoredTensor> = c.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut weights = GeneratorWeights::<F>::init(&cfg, 0)?;
    let mut failure: Option<Error> = None;
    weights.visit_mut(&mut |name, mut view| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            None => failure = Some(Error::InvalidCheckpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape != view.shape() => {
                failure = Some(Error::InvalidCheckpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    t.shape,
                    view.shape()
                )))
            }
            Some(t) => view.assign(&t.to_array::<F>()),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::InvalidCheckpoint(format!("unexpected tensor {extra}")));
    }
    let meta = c.config.get("meta").cloned().unwrap_or(Value::Null);
    let model = Generator::from_parts(cfg, weights).map_err(|e| match e {
        Error::InvalidCheckpoint(_) => e,
        other => Error::InvalidCheckpoint(other.to_string()),
    })?;
    Ok((model, meta))
}

/// Single-tensor container (mel spectrograms and other arrays).
pub fn save_tensor<F: Real>(a: &ArrayD<F>, path: impl AsRef<Path>) -> Result<()> {
    write_container(path, &serde_json::json!({ "format": FORMAT_TENSOR }), &[StoredTensor::from_array(TENSOR_NAME, a)])
}

pub fn load_tensor<F: Real>(path: impl AsRef<Path>) -> Result<ArrayD<F>> {
    let c = read_container(path)?;
    if format_of(&c) != Some(FORMAT_TENSOR) || c.tensors.len() != 1 {
        return Err(Error::InvalidCheckpoint("file does not hold a single tensor".into()));
    }
    Ok(c.tensors[0].to_array())
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;

    fn toy() -> Generator<f64> {
        let mut cfg = GeneratorConfig::toy_snn(2, 8, 2);
        cfg.n_mels = 8;
        Generator::new(cfg, 5).unwrap()
    }

    #[test]
    fn canonical_json_is_sorted_and_compact() {
        let v = serde_json::json!({"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": null}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,{"y":1,"z":0}]},"b":1}"#);
    }

    #[test]
    fn tensor_bytes_round_trip() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 1e-30]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[1]), vec![std::f64::consts::PI]).unwrap();
        let ts = [StoredTensor::from_array("z", &a), StoredTensor::from_array("a", &b)];
        let bytes = encode_tensors(&serde_json::json!({}), &ts).unwrap();
        let c = decode_tensors(&bytes).unwrap();
        assert_eq!(c.tensors[0].name, "a");
        assert_eq!(c.tensors[1].to_array::<f32>(), a);
        assert_eq!(c.tensors[0].to_array::<f64>(), b);
        assert!(encode_tensors(&Value::Null, &[ts[0].clone(), ts[0].clone()]).is_err());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svoc");
        let m = toy();
        save_checkpoint(&m, &serde_json::json!({"steps": 3}), &p).unwrap();
        let (back, meta) = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(meta["steps"], 3);
        assert_eq!(back.config, m.config);
        assert_eq!(back.weights, m.weights);
        let mel = Array2::from_shape_fn((8, 4), |(i, j)| -((i + j) as f64) / 5.0);
        let a = m.forward(mel.view()).unwrap();
        let b = back.forward(mel.view()).unwrap();
        assert_eq!(a.waveform.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.waveform.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svoc");
        save_checkpoint(&toy(), &Value::Null, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let t = dir.path().join("t.svoc");
        std::fs::write(&t, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&t), Err(Error::CorruptCheckpoint(_))));

        let mut v = bytes.clone();
        v[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        std::fs::write(&t, &v).unwrap();
        match load_checkpoint::<f64>(&t) {
            Err(Error::CorruptCheckpoint(msg)) => assert!(msg.contains("version 2")),
            other => panic!("{other:?}"),
        }

        let mut v = bytes.clone();
        v[0] = b'X';
        std::fs::write(&t, &v).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&t), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn dim_mismatch_is_invalid_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svoc");
        let m = toy();
        save_checkpoint(&m, &Value::Null, &p).unwrap();
        let mut c = read_container(&p).unwrap();
        c.config["model"]["dim"] = serde_json::json!(16);
        write_container(&p, &c.config, &c.tensors).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::InvalidCheckpoint(_))));

        let mut c2 = c.clone();
        c2.config["model"]["dim"] = serde_json::json!(8);
        c2.tensors.pop();
        write_container(&p, &c2.config, &c2.tensors).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::InvalidCheckpoint(_))));
    }

    #[test]
    fn single_tensor_container() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mel.svoc");
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 5]), |i| (i[0] * 5 + i[1]) as f32 * 0.1);
        save_tensor(&a, &p).unwrap();
        assert_eq!(load_tensor::<f32>(&p).unwrap(), a);
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::InvalidCheckpoint(_))));
    }
}
