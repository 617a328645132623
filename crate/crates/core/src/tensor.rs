//! Dense row-major tensors and matrix-product kernels.
//!
//! Every product kernel accumulates each output element as
//! `0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...` in ascending inner index. The
//! transposed variants materialise the transpose first so that all three
//! entry points share one accumulation order; this is what lets the
//! lambda-endpoint checks demand bit equality.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(
                "Tensor::new",
                alloc::format!("shape {shape:?} must have positive dimensions"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "shape must have positive dimensions"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), cols], data).expect("valid rows")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::contract(
                op,
                alloc::format!("expected a 2-D tensor, got shape {:?}", self.shape),
            )),
        }
    }
}

/// `a [m×k] · b [k×n] -> [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(&[m, n], out)
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = a.dims2("matmul_bt")?;
    let (_, k2) = b.dims2("matmul_bt")?;
    if k != k2 {
        return Err(Error::shape("matmul_bt", &a.shape, &b.shape));
    }
    matmul(a, &transpose(b)?)
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, _) = a.dims2("matmul_at")?;
    let (k2, _) = b.dims2("matmul_at")?;
    if k != k2 {
        return Err(Error::shape("matmul_at", &a.shape, &b.shape));
    }
    matmul(&transpose(a)?, b)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        for (j, &x) in row.iter().enumerate() {
            out[j * r + i] = x;
        }
    }
    Tensor::new(&[c, r], out)
}

// Register tile per target; sized so the accumulators stay in registers.
#[cfg(target_feature = "avx512f")]
const TILE_ROWS: usize = 8;
#[cfg(target_feature = "avx512f")]
const TILE_COLS: usize = 32;
#[cfg(all(target_feature = "avx2", not(target_feature = "avx512f")))]
const TILE_ROWS: usize = 4;
#[cfg(all(target_feature = "avx2", not(target_feature = "avx512f")))]
const TILE_COLS: usize = 16;
#[cfg(not(target_feature = "avx2"))]
const TILE_ROWS: usize = 6;
#[cfg(not(target_feature = "avx2"))]
const TILE_COLS: usize = 8;

/// Computes `out[rows] = a[rows] · b` for a band of consecutive rows. Each
/// output is accumulated from zero in ascending inner index; the register
/// tiling only changes which outputs are in flight, never the order of the
/// additions feeding any one of them.
fn gemm_band<T: Scalar>(k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let m = out.len() / n;
    let mut i = 0;
    while i + TILE_ROWS <= m {
        let mut j = 0;
        while j + TILE_COLS <= n {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for p in 0..k {
                let bv: &[T; TILE_COLS] = b[p * n + j..][..TILE_COLS].try_into().unwrap();
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let x = a[(i + r) * k + p];
                    for c in 0..TILE_COLS {
                        acc_r[c] += x * bv[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i + r) * n + j..][..TILE_COLS].copy_from_slice(acc_r);
            }
            j += TILE_COLS;
        }
        if j < n {
            for r in i..i + TILE_ROWS {
                gemm_row_tail(
                    k,
                    n,
                    j,
                    &a[r * k..(r + 1) * k],
                    b,
                    &mut out[r * n..(r + 1) * n],
                );
            }
        }
        i += TILE_ROWS;
    }
    for r in i..m {
        gemm_row_tail(
            k,
            n,
            0,
            &a[r * k..(r + 1) * k],
            b,
            &mut out[r * n..(r + 1) * n],
        );
    }
}

fn gemm_row_tail<T: Scalar>(
    k: usize,
    n: usize,
    from: usize,
    a_row: &[T],
    b: &[T],
    out_row: &mut [T],
) {
    for o in &mut out_row[from..] {
        *o = T::zero();
    }
    for (p, &x) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n + from..(p + 1) * n];
        for (o, &y) in out_row[from..].iter_mut().zip(b_row) {
            *o += x * y;
        }
    }
}

#[cfg(feature = "parallel")]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    use rayon::prelude::*;
    if m * k * n < 1 << 16 || rayon::current_num_threads() == 1 {
        gemm_band(k, n, a, b, out);
        return;
    }
    out.par_chunks_mut(TILE_ROWS * n)
        .zip(a.par_chunks(TILE_ROWS * k))
        .for_each(|(o, a)| gemm_band(k, n, a, b, o));
}

#[cfg(not(feature = "parallel"))]
fn gemm<T: Scalar>(_m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    gemm_band(k, n, a, b, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let eye = Tensor::from_rows(&[&[1.0f32, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[&[1.0f32, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0f32], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
        assert!(alloc::format!("{err}").contains("[2, 3]"));
    }

    #[test]
    fn transposed_variants_match_naive_dot_bitwise() {
        let a = Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.11).cos());
        let c = matmul_bt(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0f32;
                for p in 0..5 {
                    acc += a.row(i)[p] * b.row(j)[p];
                }
                assert_eq!(c.row(i)[j].to_bits(), acc.to_bits());
            }
        }
        let at = matmul_at(&transpose(&a).unwrap(), &transpose(&b).unwrap()).unwrap();
        assert_eq!(at, c);
    }

    #[test]
    fn constructor_rejects_bad_lengths() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }
}
