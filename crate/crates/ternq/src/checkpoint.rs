//! `TQ58` checkpoints: model config plus every master weight as raw f32.

use std::path::Path;

use ternq_core::layers::Transformer;
use ternq_core::Tensor;

use crate::format::{self, DType, Entry};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TQ58";

pub fn encode_checkpoint(model: &Transformer<f32>) -> Result<Vec<u8>> {
    let mut entries = vec![format::config_entry(model.config())];
    entries.extend(
        model
            .named_params()
            .map(|(name, t)| Entry::f32(name, t.shape(), t.data())),
    );
    format::encode(&CHECKPOINT_MAGIC, &entries, false)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Transformer<f32>> {
    let mut entries = format::decode(bytes, &CHECKPOINT_MAGIC, false)?;
    let config = format::take_config(&mut entries)?;
    let named = entries
        .into_iter()
        .map(|e| {
            if e.dtype != DType::F32 {
                return Err(Error::Format(format!("tensor {} is not f32", e.name)));
            }
            let t = Tensor::new(&e.dims_usize(), e.as_f32()?)?;
            Ok((e.name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Transformer::from_named(config, named)?)
}

pub fn save_checkpoint(model: &Transformer<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Transformer<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
