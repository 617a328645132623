//! Shared little-endian tensor-table container used by checkpoints (`TQ58`)
//! and packed models (`TQPK`).
//!
//! ```text
//! magic[4] | u32 version | u32 count | record* | payload
//! record  = u16 name_len | name | u8 dtype | u8 rank | u32 dim* | u64 offset [| f32 scale]
//! ```
//! Offsets are relative to the start of the payload. The scale field exists
//! only in packed-model files.

use ternq_core::layers::ModelConfig;

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U32 = 1,
    PackedTernary = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::U32),
            2 => Ok(DType::PackedTernary),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn payload_len(self, dims: &[u32]) -> usize {
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        match self {
            DType::F32 | DType::U32 => 4 * numel,
            DType::PackedTernary => numel.div_ceil(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub scale: f32,
    pub data: Vec<u8>,
}

impl Entry {
    pub fn f32(name: &str, dims: &[usize], values: &[f32]) -> Self {
        Entry {
            name: name.to_owned(),
            dtype: DType::F32,
            dims: dims.iter().map(|&d| d as u32).collect(),
            scale: 1.0,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn u32(name: &str, values: &[u32]) -> Self {
        Entry {
            name: name.to_owned(),
            dtype: DType::U32,
            dims: vec![values.len() as u32],
            scale: 1.0,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn as_f32(&self) -> Result<Vec<f32>> {
        self.words(DType::F32)
            .map(|w| w.into_iter().map(f32::from_bits).collect())
    }

    pub fn as_u32(&self) -> Result<Vec<u32>> {
        self.words(DType::U32)
    }

    fn words(&self, want: DType) -> Result<Vec<u32>> {
        if self.dtype != want {
            return Err(Error::Format(format!(
                "tensor {} has dtype {:?}, expected {want:?}",
                self.name, self.dtype
            )));
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn encode(magic: &[u8; 4], entries: &[Entry], with_scale: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len())
            .map_err(|_| Error::Format(format!("rank too large for {}", e.name)))?;
        if e.data.len() != e.dtype.payload_len(&e.dims) {
            return Err(Error::Format(format!(
                "payload of {} does not match its shape",
                e.name
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype as u8);
        out.push(rank);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        if with_scale {
            out.extend_from_slice(&e.scale.to_le_bytes());
        }
        offset += e.data.len() as u64;
    }
    for e in entries {
        out.extend_from_slice(&e.data);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], magic: &[u8; 4], with_scale: bool) -> Result<Vec<Entry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let found: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &found != magic {
        return Err(Error::BadMagic {
            expected: *magic,
            found,
        });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = DType::from_tag(cur.u8()?)?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Format(format!("tensor {name} has an empty shape")));
        }
        let offset = cur.u64()?;
        let scale = if with_scale {
            f32::from_bits(cur.u32()?)
        } else {
            1.0
        };
        table.push((name, dtype, dims, offset, scale));
    }
    let payload = &bytes[cur.pos..];
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(table.len());
    let mut entries = Vec::with_capacity(table.len());
    for (name, dtype, dims, offset, scale) in table {
        let len = dtype.payload_len(&dims) as u64;
        let end = offset
            .checked_add(len)
            .ok_or_else(|| Error::Format(format!("offset overflow for {name}")))?;
        if end > payload.len() as u64 {
            return Err(Error::Truncated {
                offset: cur.pos + offset as usize,
                needed: len as usize,
                available: payload.len().saturating_sub(offset as usize),
            });
        }
        spans.push((offset, end));
        entries.push(Entry {
            name,
            dtype,
            dims,
            scale,
            data: payload[offset as usize..end as usize].to_vec(),
        });
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Format("tensor payloads overlap".into()));
    }
    let used = spans.last().map_or(0, |s| s.1);
    if used != payload.len() as u64 {
        return Err(Error::Format(format!(
            "payload is {} bytes but the table covers {used}",
            payload.len()
        )));
    }
    Ok(entries)
}

pub fn config_entry(cfg: &ModelConfig) -> Entry {
    let eps = cfg.norm_eps.to_bits();
    Entry::u32(
        CONFIG_TENSOR,
        &[
            cfg.vocab_size as u32,
            cfg.d_model as u32,
            cfg.n_layers as u32,
            cfg.n_heads as u32,
            cfg.d_ff as u32,
            cfg.context as u32,
            cfg.insert_extra_norms as u32,
            cfg.quantize_activations as u32,
            eps as u32,
            (eps >> 32) as u32,
        ],
    )
}

/// Pulls the config record out of `entries`.
pub fn take_config(entries: &mut Vec<Entry>) -> Result<ModelConfig> {
    let i = entries
        .iter()
        .position(|e| e.name == CONFIG_TENSOR)
        .ok_or_else(|| Error::Format(format!("missing {CONFIG_TENSOR} record")))?;
    let v = entries.remove(i).as_u32()?;
    let [vocab, d, l, h, ff, ctx, extra, qa, eps_lo, eps_hi] = v[..] else {
        return Err(Error::Format(format!(
            "{CONFIG_TENSOR} must hold 10 values"
        )));
    };
    let flag = |x: u32| match x {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format(format!("invalid flag value {x}"))),
    };
    let cfg = ModelConfig {
        vocab_size: vocab as usize,
        d_model: d as usize,
        n_layers: l as usize,
        n_heads: h as usize,
        d_ff: ff as usize,
        context: ctx as usize,
        insert_extra_norms: flag(extra)?,
        quantize_activations: flag(qa)?,
        norm_eps: f64::from_bits(u64::from(eps_lo) | (u64::from(eps_hi) << 32)),
    };
    cfg.validate()?;
    Ok(cfg)
}
