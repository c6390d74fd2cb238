//! Checkpoint serialization: a flat sequence of named arrays.
//!
//! Each entry is `u32 LE` name length, the UTF-8 name bytes, `u32 LE` rank,
//! one `u64 LE` per extent, then the elements as `f64` little-endian (in all
//! scalar widths). Entries cover every parameter and every running-statistics
//! buffer, in model visit order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use crate::backbone::EfcNet;
use crate::error::{Error, Result};
use crate::layers::{Parameter, StateSink};
use crate::scalar::Scalar;

struct Writer<S: Scalar> {
    buf: Vec<u8>,
    seen: Vec<String>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Writer<S> {
    fn entry(&mut self, name: &str, shape: &[usize], data: &[S]) {
        self.seen.push(name.to_string());
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for extent in shape {
            self.buf.extend_from_slice(&(*extent as u64).to_le_bytes());
        }
        for v in data {
            self.buf.extend_from_slice(&v.to_le_f64_bytes());
        }
    }
}

impl<S: Scalar> StateSink<S> for Writer<S> {
    fn param(&mut self, param: &Parameter<S>) {
        let shape = param.value.shape();
        let data = param.value.to_vec();
        self.entry(&param.name, &shape, &data);
    }

    fn buffer(&mut self, name: &str, shape: &[usize], data: &RefCell<Vec<S>>) {
        let data = data.borrow().clone();
        self.entry(name, shape, &data);
    }
}

/// Serializes every named parameter and buffer of the model.
pub fn checkpoint_bytes<S: Scalar>(model: &EfcNet<S>) -> Result<Vec<u8>> {
    let mut writer = Writer::<S> {
        buf: Vec::new(),
        seen: Vec::new(),
        _marker: std::marker::PhantomData,
    };
    model.visit_state(&mut writer);
    let mut sorted = writer.seen.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != writer.seen.len() {
        return Err(Error::Checkpoint("duplicate state names in model".into()));
    }
    Ok(writer.buf)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &EfcNet<S>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

fn parse_entries(bytes: &[u8]) -> Result<HashMap<String, (Vec<usize>, Vec<f64>)>> {
    let mut map = HashMap::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        *pos += n;
        Ok(slice)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF8 name".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(map)
}

struct Loader<S: Scalar> {
    entries: HashMap<String, (Vec<usize>, Vec<f64>)>,
    error: Option<Error>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Loader<S> {
    fn fetch(&mut self, name: &str, shape: &[usize]) -> Option<Vec<S>> {
        if self.error.is_some() {
            return None;
        }
        match self.entries.remove(name) {
            Some((stored_shape, data)) => {
                if stored_shape != shape {
                    self.error = Some(Error::Checkpoint(format!(
                        "`{name}`: stored shape {stored_shape:?}, model expects {shape:?}"
                    )));
                    None
                } else {
                    Some(data.into_iter().map(S::of).collect())
                }
            }
            None => {
                self.error = Some(Error::Checkpoint(format!("missing entry `{name}`")));
                None
            }
        }
    }
}

impl<S: Scalar> StateSink<S> for Loader<S> {
    fn param(&mut self, param: &Parameter<S>) {
        let shape = param.value.shape();
        if let Some(data) = self.fetch(&param.name, &shape) {
            param.value.set_data(&data);
        }
    }

    fn buffer(&mut self, name: &str, shape: &[usize], data: &RefCell<Vec<S>>) {
        if let Some(values) = self.fetch(name, shape) {
            data.borrow_mut().copy_from_slice(&values);
        }
    }
}

/// Restores model state from checkpoint bytes. Every model entry must be
/// present with matching extents and no stored entry may be left over.
pub fn load_checkpoint_bytes<S: Scalar>(bytes: &[u8], model: &EfcNet<S>) -> Result<()> {
    let mut loader = Loader::<S> {
        entries: parse_entries(bytes)?,
        error: None,
        _marker: std::marker::PhantomData,
    };
    model.visit_state(&mut loader);
    if let Some(err) = loader.error {
        return Err(err);
    }
    if !loader.entries.is_empty() {
        let mut names: Vec<&String> = loader.entries.keys().collect();
        names.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} entries unknown to the model, e.g. `{}`",
            names.len(),
            names[0]
        )));
    }
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path, model: &EfcNet<S>) -> Result<()> {
    load_checkpoint_bytes(&std::fs::read(path)?, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::layers::Mode;
    use crate::tensor::{no_grad, Tensor};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.stages = 2;
        cfg.base_channels = 4;
        cfg.input_height = 32;
        cfg.input_width = 32;
        cfg.mps_heads = 2;
        cfg
    }

    #[test]
    fn roundtrip_restores_forward_behavior() {
        let cfg = tiny();
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();

        let mut other_cfg = cfg.clone();
        other_cfg.seed = 12345; // different init
        let other: EfcNet<f64> = EfcNet::new(&other_cfg).unwrap();
        let x = Tensor::from_vec(
            vec![1, 1, 32, 32],
            (0..1024).map(|i| (i % 31) as f64 / 31.0).collect(),
        )
        .unwrap();
        let before = no_grad(|| other.forward(&x, Mode::Eval)).unwrap();
        load_checkpoint_bytes(&bytes, &other).unwrap();
        let after = no_grad(|| other.forward(&x, Mode::Eval)).unwrap();
        let original = no_grad(|| model.forward(&x, Mode::Eval)).unwrap();
        assert_ne!(before.final_map().to_vec(), after.final_map().to_vec());
        assert_eq!(after.final_map().to_vec(), original.final_map().to_vec());
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let cfg = tiny();
        let a: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let b: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = tiny();
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let mut bytes = checkpoint_bytes(&model).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(load_checkpoint_bytes(&bytes, &model).is_err());
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let model: EfcNet<f64> = EfcNet::new(&tiny()).unwrap();
        let mut bigger = tiny();
        bigger.base_channels = 8;
        let other: EfcNet<f64> = EfcNet::new(&bigger).unwrap();
        let bytes = checkpoint_bytes(&other).unwrap();
        assert!(load_checkpoint_bytes(&bytes, &model).is_err());
    }
}
