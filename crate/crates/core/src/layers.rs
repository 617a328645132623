//! RMSNorm, BitLinear and a small pre-norm decoder-only transformer.
//!
//! Every linear projection (Q, K, V, O, the three MLP matrices and the output
//! head) is a [`BitLinear`]: bias-free, fake-quantized through the lambda
//! blend. With `insert_extra_norms` each BitLinear also owns an input RMSNorm
//! on top of the block's usual pre-norms. Token and position embeddings stay
//! full precision.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::ops::{self, AttnShape};
use crate::quantize::{blended_weights, fake_quant_activations, fake_quant_weights, weight_quant};
use crate::{Error, Result, Scalar, Tensor};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct RmsNormParams<T = f32> {
    pub gain: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> RmsNormParams<T> {
    pub fn ones(dim: usize) -> Self {
        RmsNormParams {
            gain: Tensor::full(&[dim], T::one()),
            eps: T::of(DEFAULT_NORM_EPS),
        }
    }
}

/// Row-wise RMS normalisation over the last dimension.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, p: &RmsNormParams<T>) -> Result<Tensor<T>> {
    if p.eps < T::zero() {
        return Err(Error::contract("rmsnorm", "eps must be non-negative"));
    }
    ops::rmsnorm_rows(x, &p.gain, p.eps).map(|(y, _)| y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Gain,
    /// Weight of a BitLinear layer; the only kind that gets quantized.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// A bias-free quantized projection. `weight` is stored `[out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitLinear {
    pub weight: ParamId,
    pub input_norm: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub attn_norm: ParamId,
    pub q: BitLinear,
    pub k: BitLinear,
    pub v: BitLinear,
    pub o: BitLinear,
    pub mlp_norm: ParamId,
    /// W1, passed through SiLU.
    pub gate: BitLinear,
    /// W3, multiplied with the gate.
    pub up: BitLinear,
    /// W2, back to model width.
    pub down: BitLinear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub final_norm: ParamId,
    pub lm_head: BitLinear,
}

impl Layout {
    pub fn bitlinears(&self) -> Vec<BitLinear> {
        let mut out = Vec::with_capacity(self.blocks.len() * 7 + 1);
        for b in &self.blocks {
            out.extend([b.q, b.k, b.v, b.o, b.gate, b.up, b.down]);
        }
        out.push(self.lm_head);
        out
    }

    /// Block pre-norms plus the final norm.
    pub fn standard_norms(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.attn_norm, b.mlp_norm])
            .collect();
        out.push(self.final_norm);
        out
    }

    pub fn norm_count(&self) -> usize {
        self.standard_norms().len()
            + self
                .bitlinears()
                .iter()
                .filter(|l| l.input_norm.is_some())
                .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub insert_extra_norms: bool,
    pub quantize_activations: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.context,
        ];
        if dims.contains(&0) {
            return Err(Error::contract(
                "ModelConfig",
                "all dimensions must be positive",
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(
                "ModelConfig",
                format!(
                    "d_model {} not divisible by {} heads",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::contract("ModelConfig", "norm_eps must be positive"));
        }
        Ok(())
    }

    /// Parameter table in canonical order, and the layout that indexes it.
    pub fn param_specs(&self) -> (Vec<ParamSpec>, Layout) {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push(ParamSpec { name, shape, kind });
            ParamId(specs.len() - 1)
        };
        let d = self.d_model;
        let extra = self.insert_extra_norms;

        let tok_emb = add(
            "tok_emb".into(),
            vec![self.vocab_size, d],
            ParamKind::Embedding,
        );
        let pos_emb = add(
            "pos_emb".into(),
            vec![self.context, d],
            ParamKind::Embedding,
        );
        let linear = |add: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> ParamId,
                      prefix: String,
                      out: usize,
                      inp: usize| {
            let weight = add(
                format!("{prefix}.weight"),
                vec![out, inp],
                ParamKind::Linear,
            );
            let input_norm =
                extra.then(|| add(format!("{prefix}.norm"), vec![inp], ParamKind::Gain));
            BitLinear { weight, input_norm }
        };
        let mut blocks = Vec::with_capacity(self.n_layers);
        for l in 0..self.n_layers {
            let p = format!("blocks.{l}");
            let attn_norm = add(format!("{p}.attn_norm"), vec![d], ParamKind::Gain);
            let q = linear(&mut add, format!("{p}.attn.q"), d, d);
            let k = linear(&mut add, format!("{p}.attn.k"), d, d);
            let v = linear(&mut add, format!("{p}.attn.v"), d, d);
            let o = linear(&mut add, format!("{p}.attn.o"), d, d);
            let mlp_norm = add(format!("{p}.mlp_norm"), vec![d], ParamKind::Gain);
            let gate = linear(&mut add, format!("{p}.mlp.w1"), self.d_ff, d);
            let up = linear(&mut add, format!("{p}.mlp.w3"), self.d_ff, d);
            let down = linear(&mut add, format!("{p}.mlp.w2"), d, self.d_ff);
            blocks.push(BlockLayout {
                attn_norm,
                q,
                k,
                v,
                o,
                mlp_norm,
                gate,
                up,
                down,
            });
        }
        let final_norm = add("final_norm".into(), vec![d], ParamKind::Gain);
        let lm_head = linear(&mut add, "lm_head".into(), self.vocab_size, d);
        (
            specs,
            Layout {
                tok_emb,
                pos_emb,
                blocks,
                final_norm,
                lm_head,
            },
        )
    }
}

/// Whether a forward pass records gradients for the model's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

/// Tape handles produced by [`Transformer::forward`].
pub struct ForwardPass {
    /// `[batch·seq × vocab]`
    pub logits: Var,
    /// Post-residual output of every block, `[batch·seq × d_model]` each.
    pub acts: Vec<Var>,
    /// One handle per parameter, in canonical order.
    pub params: Vec<Var>,
}

/// Per-block hidden states captured from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActivations<T = f32>(pub Vec<Tensor<T>>);

impl<T: Scalar> BlockActivations<T> {
    pub fn from_pass(g: &Graph<T>, pass: &ForwardPass) -> Self {
        BlockActivations(pass.acts.iter().map(|&a| g.value(a).clone()).collect())
    }
}

/// Tape handles for one BitLinear.
#[derive(Clone, Copy, Debug)]
pub struct BitLinearVars {
    pub weight: Var,
    pub input_norm: Option<Var>,
}

/// `x′ = rmsnorm(x)` when an input norm is present, `x″ = act_quant(x′)`
/// when enabled, then `x″ · fake_quant(W, λ)ᵀ`. No bias.
pub fn bitlinear_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: BitLinearVars,
    lambda: T,
    quantize_activations: bool,
    eps: T,
) -> Result<Var> {
    let mut h = x;
    if let Some(gain) = layer.input_norm {
        h = g.rmsnorm(h, gain, eps)?;
    }
    if quantize_activations {
        h = fake_quant_activations(g, h)?;
    }
    let w = fake_quant_weights(g, layer.weight, lambda)?;
    g.matmul_bt(h, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T = f32> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Transformer<T> {
    /// Random init: N(0, 0.02) for embeddings and projections, with the
    /// residual-output projections (O and W2) further scaled by 1/√(2L);
    /// all norm gains start at 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = config.param_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
        let residual_scale = 1.0 / num_traits::Float::sqrt(2.0 * config.n_layers as f64);
        let residual: Vec<ParamId> = layout
            .blocks
            .iter()
            .flat_map(|b| [b.o.weight, b.down.weight])
            .collect();
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| match s.kind {
                ParamKind::Gain => Tensor::full(&s.shape, T::one()),
                ParamKind::Embedding | ParamKind::Linear => {
                    let std = if residual.contains(&ParamId(i)) {
                        INIT_STD * residual_scale
                    } else {
                        INIT_STD
                    };
                    Tensor::from_fn(&s.shape, |_| T::of(normal.sample(&mut rng) * std))
                }
            })
            .collect();
        Ok(Transformer {
            config,
            specs,
            layout,
            params,
        })
    }

    /// Rebuilds a model from named tensors; every expected parameter must be
    /// present with the right shape and nothing else may be.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = config.param_specs();
        if named.len() != specs.len() {
            return Err(Error::contract(
                "Transformer::from_named",
                format!("expected {} tensors, got {}", specs.len(), named.len()),
            ));
        }
        let mut params: Vec<Option<Tensor<T>>> = vec![None; specs.len()];
        for (name, t) in named {
            let Some(i) = specs.iter().position(|s| s.name == name) else {
                return Err(Error::contract(
                    "Transformer::from_named",
                    format!("unexpected tensor {name}"),
                ));
            };
            if t.shape() != specs[i].shape.as_slice() {
                return Err(Error::shape(
                    "Transformer::from_named",
                    &specs[i].shape,
                    t.shape(),
                ));
            }
            params[i] = Some(t);
        }
        let params = params
            .into_iter()
            .zip(&specs)
            .map(|(p, s)| {
                p.ok_or_else(|| {
                    Error::contract(
                        "Transformer::from_named",
                        format!("missing tensor {}", s.name),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer {
            config,
            specs,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            specs: self.specs.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copy whose BitLinear weights are replaced by their dequantized ternary
    /// values (the fully quantized network expressed as a dense one).
    pub fn dequantized_ternary(&self) -> Self {
        let mut out = self.clone();
        for l in self.layout.bitlinears() {
            out.params[l.weight.0] = weight_quant(&self.params[l.weight.0]).dequantize();
        }
        out
    }

    /// Dense weights at blend level `lambda`, as the forward pass sees them.
    pub fn blended_weight(&self, layer: BitLinear, lambda: T) -> Result<Tensor<T>> {
        blended_weights(&self.params[layer.weight.0], lambda)
    }

    /// Decoder forward over `batch` sequences laid end to end in `tokens`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        batch: usize,
        lambda: T,
        binding: Binding,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::contract(
                "transformer_forward",
                format!(
                    "{} tokens do not split into {batch} sequences",
                    tokens.len()
                ),
            ));
        }
        let seq = tokens.len() / batch;
        if seq > cfg.context {
            return Err(Error::Index {
                op: "transformer_forward",
                index: seq,
                bound: cfg.context + 1,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                op: "transformer_forward",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| match binding {
                Binding::Trainable => g.param(p.clone()),
                Binding::Frozen => g.constant(p.clone()),
            })
            .collect();
        let eps = T::of(cfg.norm_eps);
        let qa = cfg.quantize_activations;
        let bl = |l: BitLinear| BitLinearVars {
            weight: params[l.weight.0],
            input_norm: l.input_norm.map(|n| params[n.0]),
        };
        let lay = &self.layout;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.gather(params[lay.tok_emb.0], tokens)?;
        let pos = g.gather(params[lay.pos_emb.0], &positions)?;
        let mut h = g.add(tok, pos)?;
        let attn_shape = AttnShape {
            batch,
            seq,
            heads: cfg.n_heads,
        };
        let mut acts = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let a = g.rmsnorm(h, params[b.attn_norm.0], eps)?;
            let q = bitlinear_forward(g, a, bl(b.q), lambda, qa, eps)?;
            let k = bitlinear_forward(g, a, bl(b.k), lambda, qa, eps)?;
            let v = bitlinear_forward(g, a, bl(b.v), lambda, qa, eps)?;
            let att = g.causal_attention(q, k, v, attn_shape)?;
            let o = bitlinear_forward(g, att, bl(b.o), lambda, qa, eps)?;
            h = g.add(h, o)?;

            let m = g.rmsnorm(h, params[b.mlp_norm.0], eps)?;
            let gate = bitlinear_forward(g, m, bl(b.gate), lambda, qa, eps)?;
            let up = bitlinear_forward(g, m, bl(b.up), lambda, qa, eps)?;
            let gate = g.silu(gate);
            let inner = g.mul(gate, up)?;
            let down = bitlinear_forward(g, inner, bl(b.down), lambda, qa, eps)?;
            h = g.add(h, down)?;
            acts.push(h);
        }
        let f = g.rmsnorm(h, params[lay.final_norm.0], eps)?;
        let logits = bitlinear_forward(g, f, bl(lay.lm_head), lambda, qa, eps)?;
        Ok(ForwardPass {
            logits,
            acts,
            params,
        })
    }

    /// Mean next-token cross-entropy of `inputs → targets` without recording
    /// gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, lambda: T) -> Result<T> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, inputs, batch, lambda, Binding::Frozen)?;
        let ce = g.cross_entropy(pass.logits, targets)?;
        Ok(g.value(ce).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(extra: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            context: 6,
            insert_extra_norms: extra,
            quantize_activations: false,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let p = RmsNormParams {
            gain: Tensor::full(&[2], 1.0f64),
            eps: 0.0,
        };
        let y = rmsnorm(&Tensor::from_rows(&[&[3.0, 4.0]]), &p).unwrap();
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.data()[1] - 1.131_370_849_898_476).abs() < 1e-12);

        let c = rmsnorm(&Tensor::from_rows(&[&[2.5, 2.5]]), &p).unwrap();
        assert!(c.data().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let z = rmsnorm(&Tensor::<f64>::zeros(&[1, 2]), &RmsNormParams::ones(2)).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);

        assert!(rmsnorm(&Tensor::<f64>::zeros(&[1, 3]), &p).is_err());
    }

    #[test]
    fn bitlinear_fully_quantized_example() {
        let mut g = Graph::<f64>::new();
        // rmsnorm([2, 2]) = [1, 1]
        let x = g.constant(Tensor::from_rows(&[&[2.0, 2.0]]));
        let w = g.param(Tensor::from_rows(&[&[0.4, -0.4]]));
        let n = g.param(Tensor::full(&[2], 1.0));
        let y = bitlinear_forward(
            &mut g,
            x,
            BitLinearVars {
                weight: w,
                input_norm: Some(n),
            },
            1.0,
            false,
            0.0,
        )
        .unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn extra_norm_count() {
        for extra in [false, true] {
            let cfg = tiny(extra);
            let (_, lay) = cfg.param_specs();
            let standard = 2 * cfg.n_layers + 1;
            let linears = 7 * cfg.n_layers + 1;
            assert_eq!(lay.bitlinears().len(), linears);
            let expected = if extra { standard + linears } else { standard };
            assert_eq!(lay.norm_count(), expected);
        }
    }

    #[test]
    fn logits_shape_and_token_errors() {
        let m = Transformer::<f32>::new(tiny(true), 3).unwrap();
        let mut g = Graph::new();
        let pass = m
            .forward(&mut g, &[1, 2, 3, 4, 5, 6, 7, 8], 2, 0.5, Binding::Frozen)
            .unwrap();
        assert_eq!(g.value(pass.logits).shape(), &[8, 11]);
        assert_eq!(pass.acts.len(), 2);
        for &a in &pass.acts {
            assert_eq!(g.value(a).shape(), &[8, 8]);
        }
        let mut g = Graph::new();
        assert!(matches!(
            m.forward(&mut g, &[1, 11], 1, 0.0, Binding::Frozen),
            Err(Error::Index { index: 11, .. })
        ));
        assert!(m.forward(&mut g, &[0; 7], 1, 0.0, Binding::Frozen).is_err());
    }

    #[test]
    fn named_round_trip_and_rejections() {
        let m = Transformer::<f32>::new(tiny(false), 9).unwrap();
        let named: Vec<_> = m
            .named_params()
            .map(|(n, t)| (String::from(n), t.clone()))
            .collect();
        let back = Transformer::from_named(*m.config(), named.clone()).unwrap();
        assert_eq!(back, m);

        let mut missing = named.clone();
        missing.pop();
        assert!(Transformer::from_named(*m.config(), missing).is_err());

        let mut renamed = named;
        renamed[0].0 = "bogus".into();
        assert!(Transformer::from_named(*m.config(), renamed).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Transformer::<f32>::new(tiny(true), 5).unwrap();
        let b = Transformer::<f32>::new(tiny(true), 5).unwrap();
        let c = Transformer::<f32>::new(tiny(true), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(false);
        cfg.n_heads = 3;
        assert!(Transformer::<f32>::new(cfg, 0).is_err());
        let mut cfg = tiny(false);
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }
}
