//! 2-bit ternary packing, multiply-free matmul and weight-footprint sums.
//!
//! Weights are packed row-major, four per byte; weight `i` sits in bits
//! `2·(i mod 4) ..= 2·(i mod 4)+1` of byte `i / 4`. Codes: `00 → 0`,
//! `01 → +1`, `10 → −1`, `11` reserved. Unused trailing slots are `00`.

use alloc::vec;
use alloc::vec::Vec;

use crate::quantize::QuantizedWeights;
use crate::{Error, Result, Tensor};

const CODE_ZERO: u8 = 0b00;
const CODE_POS: u8 = 0b01;
const CODE_NEG: u8 = 0b10;
const CODE_RESERVED: u8 = 0b11;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    scale: f32,
    bytes: Vec<u8>,
}

pub fn packed_len(numel: usize) -> usize {
    numel.div_ceil(4)
}

impl PackedTernaryMatrix {
    /// Wraps an existing buffer after checking its length and that no
    /// occupied slot carries the reserved code.
    pub fn from_raw(rows: usize, cols: usize, scale: f32, bytes: Vec<u8>) -> Result<Self> {
        let numel = rows * cols;
        if numel == 0 {
            return Err(Error::Corrupt {
                detail: alloc::format!("empty matrix {rows}x{cols}"),
            });
        }
        if bytes.len() != packed_len(numel) {
            return Err(Error::Corrupt {
                detail: alloc::format!(
                    "{} bytes for {numel} weights, expected {}",
                    bytes.len(),
                    packed_len(numel)
                ),
            });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Corrupt {
                detail: alloc::format!("scale {scale} is not positive and finite"),
            });
        }
        let p = PackedTernaryMatrix {
            rows,
            cols,
            scale,
            bytes,
        };
        if let Some(i) = (0..numel).find(|&i| p.slot(i) == CODE_RESERVED) {
            return Err(Error::Corrupt {
                detail: alloc::format!("reserved code 11 at weight {i}"),
            });
        }
        Ok(p)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn slot(&self, i: usize) -> u8 {
        (self.bytes[i / 4] >> (2 * (i % 4))) & 0b11
    }
}

/// Packs a 2-D ternary matrix.
pub fn pack_ternary(q: &QuantizedWeights<f32>) -> Result<PackedTernaryMatrix> {
    let (rows, cols) = match q.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::shape("pack_ternary", s, &[0, 0])),
    };
    let mut bytes = vec![0u8; packed_len(rows * cols)];
    for (i, &c) in q.codes().iter().enumerate() {
        let code = match c {
            1 => CODE_POS,
            -1 => CODE_NEG,
            _ => CODE_ZERO,
        };
        bytes[i / 4] |= code << (2 * (i % 4));
    }
    Ok(PackedTernaryMatrix {
        rows,
        cols,
        scale: q.scale(),
        bytes,
    })
}

pub fn unpack_ternary(p: &PackedTernaryMatrix) -> Result<QuantizedWeights<f32>> {
    let numel = p.rows * p.cols;
    if p.bytes.len() != packed_len(numel) {
        return Err(Error::Corrupt {
            detail: alloc::format!("buffer length {} for {numel} weights", p.bytes.len()),
        });
    }
    let mut codes = Vec::with_capacity(numel);
    for i in 0..numel {
        codes.push(match p.slot(i) {
            CODE_ZERO => 0,
            CODE_POS => 1,
            CODE_NEG => -1,
            _ => {
                return Err(Error::Corrupt {
                    detail: alloc::format!("reserved code 11 at weight {i}"),
                })
            }
        });
    }
    QuantizedWeights::new(&[p.rows, p.cols], codes, p.scale)
}

/// `x [m×k] · Wᵀ` for a packed `W [n×k]`, giving `[m×n]`. The inner loop
/// only adds or subtracts inputs; the scale is applied once per output.
pub fn packed_matmul(x: &Tensor<f32>, p: &PackedTernaryMatrix) -> Result<Tensor<f32>> {
    if x.shape().len() != 2 || x.cols() != p.cols {
        return Err(Error::shape("packed_matmul", x.shape(), &[p.rows, p.cols]));
    }
    let (m, k, n) = (x.rows(), p.cols, p.rows);
    let mut out = vec![0.0f32; m * n];
    // Decode one weight row at a time into sign bytes; reused for all inputs.
    let mut signs = vec![0u8; k];
    for o in 0..n {
        for (j, s) in signs.iter_mut().enumerate() {
            *s = p.slot(o * k + j);
        }
        for i in 0..m {
            let xr = x.row(i);
            let mut acc = 0.0f32;
            for (&s, &xv) in signs.iter().zip(xr) {
                match s {
                    CODE_POS => acc += xv,
                    CODE_NEG => acc -= xv,
                    _ => {}
                }
            }
            out[i * n + o] = acc * p.scale;
        }
    }
    Tensor::new(&[m, n], out)
}

pub const GIB: u64 = 1 << 30;

/// Weight-storage footprint of a packed ternary model. Covers the weights
/// and their scales only; optimizer state and activations are excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct FootprintReport {
    pub params: u64,
    pub tensors: u64,
    pub weight_bytes: u64,
    pub scale_bytes: u64,
    pub total_bytes: u64,
    /// Same parameters stored as 32-bit floats.
    pub dense_f32_bytes: u64,
    /// `(budget in bytes, fits)` per requested device budget.
    pub fits: Vec<(u64, bool)>,
}

impl FootprintReport {
    pub fn weight_gib(&self) -> f64 {
        self.weight_bytes as f64 / GIB as f64
    }

    pub fn total_gib(&self) -> f64 {
        self.total_bytes as f64 / GIB as f64
    }

    pub fn dense_f32_gib(&self) -> f64 {
        self.dense_f32_bytes as f64 / GIB as f64
    }
}

/// 2 bits per weight plus one f32 scale per tensor.
pub fn footprint(params: u64, tensors: u64, budgets: &[u64]) -> Result<FootprintReport> {
    if params == 0 {
        return Err(Error::contract(
            "footprint",
            "parameter count must be positive",
        ));
    }
    let weight_bytes = params.div_ceil(4);
    let scale_bytes = 4 * tensors;
    let total_bytes = weight_bytes + scale_bytes;
    Ok(FootprintReport {
        params,
        tensors,
        weight_bytes,
        scale_bytes,
        total_bytes,
        dense_f32_bytes: 4 * params,
        fits: budgets.iter().map(|&b| (b, total_bytes <= b)).collect(),
    })
}
