//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in creation order, so the tape index order is already a
//! topological order: parents always have smaller indices than children.
//! [`Graph::backward`] walks the tape once in reverse and applies each
//! reachable node's rule exactly once.

use alloc::vec;
use alloc::vec::Vec;

use crate::ops::{self, AttnShape};
use crate::tensor::{matmul, matmul_at, matmul_bt};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    MseToConst {
        x: Var,
        target: Tensor<T>,
    },
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A tape of tensor operations. One graph is built per forward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    rules_applied: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            rules_applied: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of the same shape when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Number of backward rules applied so far (instrumentation).
    pub fn rules_applied(&self) -> usize {
        self.rules_applied
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the bias-free linear layer form with `b` stored `[out×in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_bt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = ops::silu(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (out, inv_rms) = ops::rmsnorm_rows(self.value(x), self.value(gain), eps)?;
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Row lookup into `table`, e.g. token or position embeddings.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(table), indices)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (out, probs) =
            ops::causal_attention(self.value(q), self.value(k), self.value(v), shape)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits [m×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error between `x` and a constant target.
    pub fn mse_to_const(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape("mse", xv.shape(), target.shape()));
        }
        let mut s = T::zero();
        for (&a, &b) in xv.data().iter().zip(target.data()) {
            let d = a - b;
            s += d * d;
        }
        let mse = s / T::of(xv.numel() as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(mse),
            Op::MseToConst {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Forward value is `surrogate`; backward hands the upstream gradient to
    /// `value` unchanged. `surrogate` is a constant: nothing differentiates
    /// through however it was produced.
    pub fn straight_through(&mut self, value: Var, surrogate: Tensor<T>) -> Result<Var> {
        if self.value(value).shape() != surrogate.shape() {
            return Err(Error::shape(
                "straight_through",
                self.value(value).shape(),
                surrogate.shape(),
            ));
        }
        let rg = self.any_grad(&[value]);
        Ok(self.push(surrogate, Op::StraightThrough(value), rg))
    }

    /// Accumulates d(root)/d(node) into every node reachable from `root`.
    /// Gradients from a previous call are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                alloc::format!("root must be scalar, got shape {shape:?}"),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = Tensor::full(&shape, T::one());
        self.nodes[root.0].grad = Some(seed);

        for idx in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else {
                continue;
            };
            apply_rule(before, node, &g)?;
            node.grad = Some(g);
            self.rules_applied += 1;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: Tensor<T>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn apply_rule<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<()> {
    let val = |nodes: &[Node<T>], v: Var| nodes[v.0].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
            if nodes[a.0].requires_grad {
                let ga = matmul_bt(g, &nodes[b.0].value)?;
                accumulate(nodes, *a, ga);
            }
            if nodes[b.0].requires_grad {
                let gb = matmul_at(&nodes[a.0].value, g)?;
                accumulate(nodes, *b, gb);
            }
        }
        Op::MatMulBt(a, b) => {
            // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
            if nodes[a.0].requires_grad {
                let ga = matmul(g, &nodes[b.0].value)?;
                accumulate(nodes, *a, ga);
            }
            if nodes[b.0].requires_grad {
                let gb = matmul_at(g, &nodes[a.0].value)?;
                accumulate(nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.clone());
            accumulate(nodes, *b, g.clone());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            accumulate(nodes, *a, ops::mul(g, &bv)?);
            accumulate(nodes, *b, ops::mul(g, &av)?);
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, *a, g.map(|x| x * c));
        }
        Op::Sum(a) => {
            let gv = g.item();
            let shape = nodes[a.0].value.shape().to_vec();
            accumulate(nodes, *a, Tensor::full(&shape, gv));
        }
        Op::Silu(a) => {
            let x = &nodes[a.0].value;
            let mut ga = g.clone();
            for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                *o *= ops::silu_grad(xv);
            }
            accumulate(nodes, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let cols = y.cols();
            let mut ga = g.clone();
            for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                let dot = ops::dot(grow, yrow);
                for (gi, &yi) in grow.iter_mut().zip(yrow) {
                    *gi = yi * (*gi - dot);
                }
            }
            accumulate(nodes, *a, ga);
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = &nodes[x.0].value;
            let gain_v = nodes[gain.0].value.data();
            let d = xv.cols();
            let dn = T::of(d as f64);
            let mut gx = Tensor::zeros(xv.shape());
            let mut gg = Tensor::zeros(nodes[gain.0].value.shape());
            let mut scaled = vec![T::zero(); d];
            let rows = xv.data().chunks_exact(d).zip(g.data().chunks_exact(d));
            for (((xr, gr), out), &inv) in rows.zip(gx.data_mut().chunks_exact_mut(d)).zip(inv_rms)
            {
                for ((s, &gi), &w) in scaled.iter_mut().zip(gr).zip(gain_v) {
                    *s = gi * w;
                }
                for ((acc, &gi), &xi) in gg.data_mut().iter_mut().zip(gr).zip(xr) {
                    *acc += gi * xi * inv;
                }
                let k = inv * inv * inv * ops::dot(&scaled, xr) / dn;
                for ((o, &s), &xi) in out.iter_mut().zip(&scaled).zip(xr) {
                    *o = inv * s - k * xi;
                }
            }
            let (x, gain) = (*x, *gain);
            accumulate(nodes, x, gx);
            accumulate(nodes, gain, gg);
        }
        Op::Gather { table, indices } => {
            let tv = &nodes[table.0].value;
            let d = tv.cols();
            let mut gt = Tensor::zeros(tv.shape());
            for (r, &i) in indices.iter().enumerate() {
                let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                for (o, &x) in dst.iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            accumulate(nodes, *table, gt);
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => {
            let (gq, gk, gv) = attention_backward(
                &nodes[q.0].value,
                &nodes[k.0].value,
                &nodes[v.0].value,
                *shape,
                probs,
                g,
            )?;
            accumulate(nodes, *q, gq);
            accumulate(nodes, *k, gk);
            accumulate(nodes, *v, gv);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let scale = g.item() / T::of(targets.len() as f64);
            let mut gl = probs.clone();
            let vocab = gl.cols();
            for (row, &t) in gl.data_mut().chunks_mut(vocab).zip(targets) {
                row[t] -= T::one();
                for x in row.iter_mut() {
                    *x *= scale;
                }
            }
            accumulate(nodes, *logits, gl);
        }
        Op::MseToConst { x, target } => {
            let xv = &nodes[x.0].value;
            let c = T::of(2.0) * g.item() / T::of(xv.numel() as f64);
            let mut gx = xv.clone();
            for (o, &t) in gx.data_mut().iter_mut().zip(target.data()) {
                *o = (*o - t) * c;
            }
            accumulate(nodes, *x, gx);
        }
        Op::StraightThrough(v) => accumulate(nodes, *v, g.clone()),
    }
    Ok(())
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    shape: AttnShape,
    probs: &[T],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let AttnShape { batch, seq, heads } = shape;
    let d = q.cols();
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gv = vec![T::zero(); v.numel()];
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            let at = |i: usize| (b * seq + i) * d + col;
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let go = &gd[at(i)..][..hd];
                // dP = dO·Vᵀ, dV += Pᵀ·dO
                for j in 0..=i {
                    dp[j] = ops::dot(go, &vd[at(j)..][..hd]);
                    let gvj = &mut gv[at(j)..][..hd];
                    for c in 0..hd {
                        gvj[c] += p[j] * go[c];
                    }
                }
                // dS = P ⊙ (dP − Σ dP⊙P)
                let dot = ops::dot(&dp[..=i], &p[..=i]);
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let (qi, kj) = (&qd[at(i)..][..hd], &kd[at(j)..][..hd]);
                    let gqi = &mut gq[at(i)..][..hd];
                    for c in 0..hd {
                        gqi[c] += ds * kj[c];
                    }
                    let gkj = &mut gk[at(j)..][..hd];
                    for c in 0..hd {
                        gkj[c] += ds * qi[c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape(), gq)?,
        Tensor::new(k.shape(), gk)?,
        Tensor::new(v.shape(), gv)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(w),
            Err(Error::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let used = g.param(Tensor::full(&[2], 1.0));
        let unused = g.param(Tensor::full(&[4], 1.0));
        let s = g.sum(used);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full(&[2, 2], 3.0));
        let w = g.param(Tensor::full(&[2, 2], 1.0));
        let p = g.matmul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(!g.requires_grad(c));
        assert_eq!(g.grad(w).unwrap().data(), &[6.0; 4]);
    }

    #[test]
    fn straight_through_is_identity_backward() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
        let st = g
            .straight_through(w, Tensor::from_fn(&[2, 3], |i| -(i as f32) * 7.0))
            .unwrap();
        assert_eq!(g.value(st).data()[1], -7.0);
        let s = g.sum(st);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn straight_through_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::zeros(&[2, 3]));
        assert!(g.straight_through(w, Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn diamond_graph_applies_each_rule_once() {
        // w -> a = silu(w); b = a*a (two edges from a); c = b + a; root = sum(c)
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::full(&[2], 0.5));
        let a = g.silu(w);
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let r = g.sum(c);
        g.backward(r).unwrap();
        // five nodes, all reachable and requiring grad
        assert_eq!(g.rules_applied(), 5);
        let av = ops::silu(&Tensor::full(&[1], 0.5)).item();
        let expected = (2.0 * av + 1.0) * ops::silu_grad(0.5);
        assert!((g.grad(w).unwrap().data()[0] - expected).abs() < 1e-14);
    }
}
