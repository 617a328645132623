//! Inference over a transformer whose BitLinear weights are 2-bit packed.
//!
//! Mirrors [`Transformer::forward`](crate::layers::Transformer::forward) at
//! λ=1 but routes every projection through [`packed_matmul`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{BitLinear, Layout, ModelConfig, ParamKind, ParamSpec, Transformer};
use crate::ops::{self, AttnShape};
use crate::quantize::{activation_quant, weight_quant};
use crate::ternpack::{pack_ternary, packed_matmul, PackedTernaryMatrix};
use crate::{Error, Result, Tensor};

/// One stored tensor of a packed model.
#[derive(Clone, Debug, PartialEq)]
pub enum PackedParam {
    Dense(Tensor<f32>),
    Ternary(PackedTernaryMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTransformer {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    params: Vec<PackedParam>,
}

impl PackedTransformer {
    /// Quantizes and packs every BitLinear weight; everything else is copied.
    pub fn from_model(model: &Transformer<f32>) -> Result<Self> {
        let params = model
            .specs()
            .iter()
            .zip(model.params())
            .map(|(s, t)| match s.kind {
                ParamKind::Linear => pack_ternary(&weight_quant(t)).map(PackedParam::Ternary),
                _ => Ok(PackedParam::Dense(t.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PackedTransformer {
            config: *model.config(),
            specs: model.specs().to_vec(),
            layout: model.layout().clone(),
            params,
        })
    }

    /// Reassembles a model from named parts, checking kinds and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, PackedParam)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = config.param_specs();
        if named.len() != specs.len() {
            return Err(Error::contract(
                "PackedTransformer::from_named",
                format!("expected {} tensors, got {}", specs.len(), named.len()),
            ));
        }
        let mut params: Vec<Option<PackedParam>> = vec![None; specs.len()];
        for (name, p) in named {
            let Some(i) = specs.iter().position(|s| s.name == name) else {
                return Err(Error::contract(
                    "PackedTransformer::from_named",
                    format!("unexpected tensor {name}"),
                ));
            };
            let spec = &specs[i];
            let ok = match (&p, spec.kind) {
                (PackedParam::Ternary(m), ParamKind::Linear) => spec.shape == [m.rows(), m.cols()],
                (PackedParam::Dense(t), ParamKind::Gain | ParamKind::Embedding) => {
                    t.shape() == spec.shape.as_slice()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::contract(
                    "PackedTransformer::from_named",
                    format!("tensor {name} has the wrong kind or shape"),
                ));
            }
            params[i] = Some(p);
        }
        let params = params
            .into_iter()
            .zip(&specs)
            .map(|(p, s)| {
                p.ok_or_else(|| {
                    Error::contract(
                        "PackedTransformer::from_named",
                        format!("missing {}", s.name),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PackedTransformer {
            config,
            specs,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &PackedParam)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    fn dense(&self, i: usize) -> &Tensor<f32> {
        match &self.params[i] {
            PackedParam::Dense(t) => t,
            PackedParam::Ternary(_) => unreachable!("layout guarantees a dense tensor"),
        }
    }

    fn linear(&self, x: &Tensor<f32>, l: BitLinear) -> Result<Tensor<f32>> {
        let eps = self.config.norm_eps as f32;
        let mut h = match l.input_norm {
            Some(n) => ops::rmsnorm_rows(x, self.dense(n.0), eps)?.0,
            None => x.clone(),
        };
        if self.config.quantize_activations {
            h = activation_quant(&h);
        }
        match &self.params[l.weight.0] {
            PackedParam::Ternary(p) => packed_matmul(&h, p),
            PackedParam::Dense(_) => unreachable!("layout guarantees a packed tensor"),
        }
    }

    /// Logits `[batch·seq × vocab]` for `batch` sequences laid end to end.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<f32>> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::contract(
                "packed_forward",
                "tokens do not split into the batch",
            ));
        }
        let seq = tokens.len() / batch;
        if seq > cfg.context {
            return Err(Error::Index {
                op: "packed_forward",
                index: seq,
                bound: cfg.context + 1,
            });
        }
        let eps = cfg.norm_eps as f32;
        let lay = &self.layout;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let mut h = ops::add(
            &ops::gather_rows(self.dense(lay.tok_emb.0), tokens)?,
            &ops::gather_rows(self.dense(lay.pos_emb.0), &positions)?,
        )?;
        let shape = AttnShape {
            batch,
            seq,
            heads: cfg.n_heads,
        };
        for b in &lay.blocks {
            let a = ops::rmsnorm_rows(&h, self.dense(b.attn_norm.0), eps)?.0;
            let q = self.linear(&a, b.q)?;
            let k = self.linear(&a, b.k)?;
            let v = self.linear(&a, b.v)?;
            let att = ops::causal_attention(&q, &k, &v, shape)?.0;
            h = ops::add(&h, &self.linear(&att, b.o)?)?;
            let m = ops::rmsnorm_rows(&h, self.dense(b.mlp_norm.0), eps)?.0;
            let gate = ops::silu(&self.linear(&m, b.gate)?);
            let up = self.linear(&m, b.up)?;
            let inner = ops::mul(&gate, &up)?;
            h = ops::add(&h, &self.linear(&inner, b.down)?)?;
        }
        let f = ops::rmsnorm_rows(&h, self.dense(lay.final_norm.0), eps)?.0;
        self.linear(&f, lay.lm_head)
    }

    /// Mean next-token cross-entropy for `inputs → targets`.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<f32> {
        let logits = self.logits(inputs, batch)?;
        Ok(ops::cross_entropy(&logits, targets)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DEFAULT_NORM_EPS;

    #[test]
    fn packed_logits_track_dense_fully_quantized_logits() {
        let cfg = ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context: 5,
            insert_extra_norms: true,
            quantize_activations: false,
            norm_eps: DEFAULT_NORM_EPS,
        };
        let m = Transformer::<f32>::new(cfg, 1).unwrap();
        let p = PackedTransformer::from_model(&m).unwrap();
        let tokens = [1, 5, 7, 12, 0, 3, 3, 4];
        let packed = p.logits(&tokens, 2).unwrap();
        let mut g = crate::Graph::new();
        let pass = m
            .forward(&mut g, &tokens, 2, 1.0, crate::layers::Binding::Frozen)
            .unwrap();
        for (a, b) in packed.data().iter().zip(g.value(pass.logits).data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
