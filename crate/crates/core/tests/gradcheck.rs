//! Analytic gradients against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ternq_core::layers::{Binding, ModelConfig, Transformer, DEFAULT_NORM_EPS};
use ternq_core::ops::AttnShape;
use ternq_core::{Graph, Tensor, Var};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Absolute slack for gradients near zero, where the difference quotient is
/// dominated by rounding in the loss.
const ABS_TOL: f64 = 1e-9;

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= REL_TOL * a.abs().max(n.abs()) + ABS_TOL
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Checks d(loss)/d(input) for every element of every input.
fn check(inputs: Vec<Tensor<f64>>, seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars);
        let l = weighted_sum(&mut g, out, seed);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars);
    let l = weighted_sum(&mut g, out, seed);
    g.backward(l).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            assert!(
                close(a, numeric),
                "seed {seed} input {i} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

const SEEDS: std::ops::Range<u64> = 0..20;

#[test]
fn matmul_variants() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[5, 4]);
        check(vec![a.clone(), b], seed, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        });
        check(vec![a, bt], seed, |g, v| g.matmul_bt(v[0], v[1]).unwrap());
    }
}

#[test]
fn elementwise_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 5]);
        let b = rand_tensor(&mut rng, &[2, 5]);
        check(vec![a.clone()], seed, |g, v| g.silu(v[0]));
        check(vec![a.clone(), b.clone()], seed, |g, v| {
            g.mul(v[0], v[1]).unwrap()
        });
        check(vec![a.clone(), b], seed, |g, v| g.add(v[0], v[1]).unwrap());
        check(vec![a], seed, |g, v| g.scale(v[0], -1.7));
    }
}

#[test]
fn softmax_rows() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 6]).map(|v| 3.0 * v);
        check(vec![x], seed, |g, v| g.softmax_rows(v[0]));
    }
}

#[test]
fn rmsnorm_input_and_gain() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let gain = rand_tensor(&mut rng, &[6]).map(|v| 1.0 + 0.5 * v);
        check(vec![x, gain], seed, |g, v| {
            g.rmsnorm(v[0], v[1], 1e-6).unwrap()
        });
    }
}

#[test]
fn cross_entropy() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, &[4, 7]).map(|v| 2.0 * v);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..7)).collect();
        check(vec![logits], seed, move |g, v| {
            g.cross_entropy(v[0], &targets).unwrap()
        });
    }
}

#[test]
fn gather_and_mse() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let target = rand_tensor(&mut rng, &[4, 3]);
        check(vec![table], seed, move |g, v| {
            let rows = g.gather(v[0], &[4, 0, 4, 2]).unwrap();
            g.mse_to_const(rows, &target).unwrap()
        });
    }
}

#[test]
fn causal_attention() {
    let shape = AttnShape {
        batch: 2,
        seq: 3,
        heads: 2,
    };
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qkv: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[6, 4])).collect();
        check(qkv, seed, move |g, v| {
            g.causal_attention(v[0], v[1], v[2], shape).unwrap()
        });
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let surrogate = rand_tensor(&mut rng, &[4, 3]);
        let upstream = rand_tensor(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let wv = g.param(w);
        let s = g.straight_through(wv, surrogate).unwrap();
        let u = g.constant(upstream.clone());
        let p = g.mul(s, u).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &upstream);
    }
}

fn small_model(extra: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        context: 5,
        insert_extra_norms: extra,
        quantize_activations: false,
        norm_eps: DEFAULT_NORM_EPS,
    }
}

#[test]
fn small_transformer_every_parameter() {
    for (seed, extra) in [(1, false), (2, true), (3, true)] {
        let model = Transformer::<f64>::new(small_model(extra), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<usize> = (0..8).map(|_| rng.random_range(0..13)).collect();
        let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..13)).collect();

        let mut g = Graph::new();
        let pass = model
            .forward(&mut g, &inputs, 2, 0.0, Binding::Trainable)
            .unwrap();
        let ce = g.cross_entropy(pass.logits, &targets).unwrap();
        g.backward(ce).unwrap();

        let mut checked = 0;
        for (i, &pv) in pass.params.iter().enumerate() {
            let analytic = g.grad_or_zeros(pv);
            for j in 0..model.params()[i].numel() {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[i].data_mut()[j] += delta;
                    m.loss(&inputs, &targets, 2, 0.0).unwrap()
                };
                let numeric = (at(H) - at(-H)) / (2.0 * H);
                let a = analytic.data()[j];
                assert!(
                    close(a, numeric),
                    "{} [{j}]: analytic {a} numeric {numeric}",
                    model.specs()[i].name
                );
                checked += 1;
            }
        }
        assert_eq!(checked, model.num_params());
    }
}
