//! Forward kernels shared by the autodiff tape and the packed inference path.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Scalar, Tensor};

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Derivative of SiLU at `x`.
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

/// Dot product over eight interleaved partial sums that are combined in a
/// fixed order, so the result is deterministic and the loop vectorizes.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let split = n - n % LANES;
    let mut acc = [T::zero(); LANES];
    for (ca, cb) in a[..split]
        .chunks_exact(LANES)
        .zip(b[..split].chunks_exact(LANES))
    {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[split..n].iter().zip(&b[split..n]) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise `x / sqrt(mean(x²) + eps) * gain`. Returns the output and the
/// per-row reciprocal RMS (needed by the backward rule).
pub fn rmsnorm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::shape("rmsnorm", x.shape(), gain.shape()));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let dn = T::of(d as f64);
    for row in out.data_mut().chunks_mut(d) {
        let ss = dot(row, row);
        let r = T::one() / (ss / dn + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * r * g;
        }
        inv.push(r);
    }
    Ok((out, inv))
}

pub fn gather_rows<T: Scalar>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let d = table.cols();
    let bound = table.rows();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= bound {
            return Err(Error::Index {
                op: "gather_rows",
                index: i,
                bound,
            });
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(&[indices.len(), d], data)
}

/// Geometry of a batched multi-head attention call. Rows of q/k/v are laid
/// out as `batch × seq`, columns as `heads × head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

impl AttnShape {
    pub(crate) fn check<T: Scalar>(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<()> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::shape("causal_attention", q.shape(), k.shape()));
        }
        if q.shape().len() != 2 || q.rows() != self.batch * self.seq {
            return Err(Error::shape(
                "causal_attention",
                q.shape(),
                &[self.batch * self.seq, q.cols()],
            ));
        }
        if self.heads == 0 || !q.cols().is_multiple_of(self.heads) {
            return Err(Error::contract(
                "causal_attention",
                alloc::format!("width {} not divisible by {} heads", q.cols(), self.heads),
            ));
        }
        Ok(())
    }
}

/// Causal scaled dot-product attention. Returns the output `[batch·seq × d]`
/// and the attention probabilities laid out `[batch][head][i][j]` (zero above
/// the diagonal).
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, Vec<T>)> {
    shape.check(q, k, v)?;
    let AttnShape { batch, seq, heads } = shape;
    let d = q.cols();
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            for i in 0..seq {
                let qi = &qd[(b * seq + i) * d + col..][..hd];
                let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                for j in 0..=i {
                    let kj = &kd[(b * seq + j) * d + col..][..hd];
                    p[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let o = &mut out[(b * seq + i) * d + col..][..hd];
                for j in 0..=i {
                    let vj = &vd[(b * seq + j) * d + col..][..hd];
                    let w = p[j];
                    for c in 0..hd {
                        o[c] += w * vj[c];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(q.shape(), out)?, probs))
}

/// Mean over rows of `-log softmax(logits)[target]`. Also returns the
/// softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let vocab = logits.cols();
    if logits.shape().len() != 2 || targets.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy_logits",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (row, &t) in probs.data_mut().chunks_mut(vocab).zip(targets) {
        if t >= vocab {
            return Err(Error::Index {
                op: "cross_entropy_logits",
                index: t,
                bound: vocab,
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        total += sum.ln() + max - row[t];
        for v in row.iter_mut() {
            *v = (*v - max).exp() / sum;
        }
    }
    Ok((total / T::of(targets.len() as f64), probs))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        let x = Tensor::new(&[3], vec![0.0f64, 1.0, 40.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((y.data()[2] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[&[2.0f64, 2.0, 2.0, 2.0], &[0.0, 3.0f64.ln(), 0.0, 0.0]]);
        let mut x2 = x.clone();
        x2.data_mut()[6] = f64::NEG_INFINITY;
        x2.data_mut()[7] = f64::NEG_INFINITY;
        let y = softmax_rows(&x);
        for &p in y.row(0) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let y2 = softmax_rows(&x2);
        assert!((y2.row(1)[0] - 0.25).abs() < 1e-12);
        assert!((y2.row(1)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_with_large_logits() {
        let x = Tensor::from_rows(&[&[1000.0f32, 999.0, -1000.0]]);
        let y = softmax_rows(&x);
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(y.is_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[2, 4]);
        let (l, _) = cross_entropy(&uniform, &[0, 3]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        let two = Tensor::from_rows(&[&[0.0f64, 3.0f64.ln()]]);
        let (l, _) = cross_entropy(&two, &[1]).unwrap();
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);

        let peaked = Tensor::from_rows(&[&[50.0f64, 0.0, 0.0]]);
        let (l, _) = cross_entropy(&peaked, &[0]).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            cross_entropy(&x, &[4]),
            Err(Error::Index {
                index: 4,
                bound: 4,
                ..
            })
        ));
    }

    #[test]
    fn attention_first_position_copies_value() {
        let q = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let k = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let v = Tensor::from_fn(&[3, 4], |i| (i as f64).cos());
        let (o, p) = causal_attention(
            &q,
            &k,
            &v,
            AttnShape {
                batch: 1,
                seq: 3,
                heads: 2,
            },
        )
        .unwrap();
        assert_eq!(o.row(0), v.row(0));
        // head 0 row 0 puts all mass on position 0, nothing above the diagonal
        assert_eq!(&p[0..3], &[1.0, 0.0, 0.0]);
    }
}
