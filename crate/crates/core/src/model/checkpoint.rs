//! `FFDC` checkpoint files.
//!
//! ```text
//! "FFDC" | u16 version | u32 config length | config (key=value UTF-8)
//!        | u32 tensor count | { u16 name length | name | FFDT tensor }*
//! ```
//!
//! Integers are little-endian. Parameters are stored under their names;
//! normalization buffers under `buffer:<name>`. Config keys prefixed with
//! `meta.` are free-form run metadata.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor, Cursor};
use crate::kv::KvConfig;
use crate::model::{ModelConfig, SedModel};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFDC";
pub const CHECKPOINT_VERSION: u16 = 1;

const BUFFER_PREFIX: &str = "buffer:";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

/// Serializes the model; `meta` keys are stored with a `meta.` prefix.
pub fn checkpoint_to_bytes<T: Scalar>(model: &SedModel<T>, meta: &KvConfig) -> Result<Vec<u8>> {
    let mut config = model.config().to_kv();
    for key in meta.keys() {
        config.set(format!("meta.{key}"), meta.get_str(key).unwrap_or_default());
    }
    let text = config.to_string();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let len = u32::try_from(text.len()).map_err(|_| fmt_err("config too large"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let entries: Vec<(String, &Tensor<T>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .chain(model.buffers.iter().map(|(k, v)| (format!("{BUFFER_PREFIX}{k}"), v)))
        .collect();
    let count = u32::try_from(entries.len()).map_err(|_| fmt_err("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let n = u16::try_from(name.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

/// Parses a checkpoint, validating every tensor against the embedded
/// configuration. Tensors must have element type `T`.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(SedModel<T>, KvConfig)> {
    let mut cur = Cursor::new(bytes, "checkpoint");
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let len = cur.u32()? as usize;
    let all = KvConfig::parse_bytes(cur.take(len)?)?;
    let (mut model_kv, mut meta) = (KvConfig::new(), KvConfig::new());
    for key in all.keys() {
        let value = all.get_str(key).unwrap_or_default();
        match key.strip_prefix("meta.") {
            Some(k) => meta.set(k, value),
            None => model_kv.set(key, value),
        }
    }
    let config = ModelConfig::from_kv(&model_kv)?;
    // A freshly built model fixes the expected names and shapes.
    let mut model = SedModel::<T>::new(config, 0)?;
    let expected = model.params.len() + model.buffers.len();
    let count = cur.u32()? as usize;
    if count != expected {
        return Err(fmt_err(format!("expected {expected} tensors, found {count}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let n = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| fmt_err("tensor name is not UTF-8"))?
            .to_string();
        let (any, used) = decode_tensor(cur.remaining())?;
        cur.skip(used)?;
        if any.dtype() != T::DTYPE {
            return Err(fmt_err(format!(
                "{name}: stored as {} but loading as {}",
                any.dtype(),
                T::DTYPE
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(fmt_err(format!("duplicate tensor {name}")));
        }
        let tensor = any.into_tensor::<T>();
        let slot = match name.strip_prefix(BUFFER_PREFIX) {
            Some(b) => model.buffers.get_mut(b),
            None => model.params.get_mut(&name).ok().map(|p| &mut p.value),
        }
        .ok_or_else(|| fmt_err(format!("unexpected tensor {name}")))?;
        if slot.shape() != tensor.shape() {
            return Err(fmt_err(format!(
                "{name}: shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if !cur.remaining().is_empty() {
        return Err(fmt_err(format!("{} trailing bytes", cur.remaining().len())));
    }
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(model: &SedModel<T>, meta: &KvConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(SedModel<T>, KvConfig)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads and requires the stored configuration to equal `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(SedModel<T>, KvConfig)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint configuration differs:\n{}\nexpected:\n{}",
            model.config().to_kv(),
            expected.to_kv()
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::BlockKind;
    use crate::init::rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            frames: 8,
            bands: 8,
            n_classes: 2,
            kinds: vec![BlockKind::Static, BlockKind::Ffd],
            channels: vec![2, 4],
            pools: vec![(2, 2), (1, 2)],
            gru_hidden: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let mut m = SedModel::<f32>::new(cfg(), 5).unwrap();
        m.buffers.values_mut().next().unwrap().data_mut()[0] = 0.25;
        let mut meta = KvConfig::new();
        meta.set("epochs", 3);
        let a = checkpoint_to_bytes(&m, &meta).unwrap();
        let (back, meta2) = checkpoint_from_bytes::<f32>(&a).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back, m);
        assert_eq!(checkpoint_to_bytes(&back, &meta2).unwrap(), a);
        let x = Tensor::uniform(vec![1, 1, 8, 8], -1.0, 1.0, &mut rng(0));
        assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let m = SedModel::<f32>::new(cfg(), 5).unwrap();
        let bytes = checkpoint_to_bytes(&m, &KvConfig::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes::<f32>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(checkpoint_from_bytes::<f32>(&bad).is_err());
        assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(checkpoint_from_bytes::<f64>(&bytes).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffdc");
        save_checkpoint(&m, &KvConfig::new(), &path).unwrap();
        let mut other = cfg();
        other.n_classes = 3;
        assert!(load_checkpoint_expecting::<f32>(&path, &other).is_err());
        assert!(load_checkpoint_expecting::<f32>(&path, &cfg()).is_ok());
    }
}
