//! `TQPK` packed models: BitLinear weights as 2-bit ternary codes with a
//! per-record f32 scale, everything else as f32.

use std::path::Path;

use ternq_core::packed_model::{PackedParam, PackedTransformer};
use ternq_core::ternpack::PackedTernaryMatrix;
use ternq_core::Tensor;

use crate::format::{self, DType, Entry};
use crate::{Error, Result};

pub const PACKED_MAGIC: [u8; 4] = *b"TQPK";

pub fn encode_packed(model: &PackedTransformer) -> Result<Vec<u8>> {
    let mut entries = vec![format::config_entry(model.config())];
    for (name, p) in model.named_params() {
        entries.push(match p {
            PackedParam::Dense(t) => Entry::f32(name, t.shape(), t.data()),
            PackedParam::Ternary(m) => Entry {
                name: name.to_owned(),
                dtype: DType::PackedTernary,
                dims: vec![m.rows() as u32, m.cols() as u32],
                scale: m.scale(),
                data: m.bytes().to_vec(),
            },
        });
    }
    format::encode(&PACKED_MAGIC, &entries, true)
}

pub fn decode_packed(bytes: &[u8]) -> Result<PackedTransformer> {
    let mut entries = format::decode(bytes, &PACKED_MAGIC, true)?;
    let config = format::take_config(&mut entries)?;
    let named = entries
        .into_iter()
        .map(|e| {
            let p = match e.dtype {
                DType::F32 => PackedParam::Dense(Tensor::new(&e.dims_usize(), e.as_f32()?)?),
                DType::PackedTernary => {
                    let [r, c] = e.dims[..] else {
                        return Err(Error::Format(format!(
                            "packed tensor {} must be 2-D",
                            e.name
                        )));
                    };
                    PackedParam::Ternary(PackedTernaryMatrix::from_raw(
                        r as usize, c as usize, e.scale, e.data,
                    )?)
                }
                DType::U32 => {
                    return Err(Error::Format(format!("unexpected u32 tensor {}", e.name)))
                }
            };
            Ok((e.name, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PackedTransformer::from_named(config, named)?)
}

pub fn save_packed(model: &PackedTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_packed(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedTransformer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_packed(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ternq_core::layers::{ModelConfig, Transformer, DEFAULT_NORM_EPS};

    fn packed() -> PackedTransformer {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 6,
            context: 3,
            insert_extra_norms: false,
            quantize_activations: false,
            norm_eps: DEFAULT_NORM_EPS,
        };
        PackedTransformer::from_model(&Transformer::new(cfg, 2).unwrap()).unwrap()
    }

    #[test]
    fn round_trip() {
        let p = packed();
        let bytes = encode_packed(&p).unwrap();
        assert_eq!(&bytes[..4], b"TQPK");
        assert_eq!(decode_packed(&bytes).unwrap(), p);
    }

    #[test]
    fn checkpoint_magic_is_rejected() {
        let mut bytes = encode_packed(&packed()).unwrap();
        bytes[..4].copy_from_slice(b"TQ58");
        assert!(matches!(decode_packed(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn reserved_code_in_payload_is_corruption() {
        let p = packed();
        let bytes = encode_packed(&p).unwrap();
        // last record is lm_head.weight (9x4 = 36 weights, 9 bytes): poison its first byte
        let lm_len = 9;
        let mut bad = bytes.clone();
        let at = bad.len() - lm_len;
        bad[at] = 0xFF;
        assert!(matches!(
            decode_packed(&bad),
            Err(Error::Core(ternq_core::Error::Corrupt { .. }))
        ));
    }
}
