//! Ternary weight quantization, 8-bit activation quantization and the
//! lambda schedules that blend full-precision and quantized weights.
//!
//! Weights use a single per-tensor scale `γ = mean(|W|)`; codes are
//! `clip(round(W / γ), -1, 1)` with ties rounded away from zero.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Scale used for an all-zero matrix so the codes stay 0 without dividing by 0.
pub const ZERO_SCALE_SENTINEL: f64 = 1.0;

/// Ternary code matrix plus per-tensor scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights<T = f32> {
    shape: Vec<usize>,
    codes: Vec<i8>,
    scale: T,
}

impl<T: Scalar> QuantizedWeights<T> {
    /// Validates the code alphabet and scale.
    pub fn new(shape: &[usize], codes: Vec<i8>, scale: T) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != codes.len() || shape.is_empty() {
            return Err(Error::shape("QuantizedWeights::new", shape, &[codes.len()]));
        }
        if let Some(bad) = codes.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::contract(
                "QuantizedWeights::new",
                alloc::format!("code {bad} is not ternary"),
            ));
        }
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(Error::contract(
                "QuantizedWeights::new",
                alloc::format!("scale must be positive and finite, got {scale:?}"),
            ));
        }
        Ok(QuantizedWeights {
            shape: shape.to_vec(),
            codes,
            scale,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// `codes · γ` elementwise.
    pub fn dequantize(&self) -> Tensor<T> {
        let data = self
            .codes
            .iter()
            .map(|&c| match c {
                1 => self.scale,
                -1 => -self.scale,
                _ => T::zero(),
            })
            .collect();
        Tensor::new(&self.shape, data).expect("shape checked at construction")
    }
}

/// Absmean ternary quantization of a weight tensor.
pub fn weight_quant<T: Scalar>(w: &Tensor<T>) -> QuantizedWeights<T> {
    let mut sum = T::zero();
    for &x in w.data() {
        sum += x.abs();
    }
    let mean = sum / T::of(w.numel() as f64);
    let scale = if mean > T::zero() {
        mean
    } else {
        T::of(ZERO_SCALE_SENTINEL)
    };
    let codes = w
        .data()
        .iter()
        .map(|&x| {
            // Float::round rounds half away from zero
            let r = (x / scale).round();
            if r >= T::one() {
                1
            } else if r <= -T::one() {
                -1
            } else {
                0
            }
        })
        .collect();
    QuantizedWeights {
        shape: w.shape().to_vec(),
        codes,
        scale,
    }
}

/// Highest integer level of the symmetric 8-bit activation grid.
pub const ACTIVATION_LEVELS: f64 = 127.0;

/// Per-row symmetric absmax quantize-dequantize onto `[-127, 127]`. All-zero
/// rows pass through unchanged.
pub fn activation_quant<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let levels = T::of(ACTIVATION_LEVELS);
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if max == T::zero() {
            continue;
        }
        let step = max / levels;
        for v in row.iter_mut() {
            let q = (*v / step).round().max(-levels).min(levels);
            *v = q * step;
        }
    }
    out
}

/// `W + λ·(dequant(weight_quant(W)) − W)` with the bracket detached. The
/// endpoints are returned exactly: λ=0 gives `W`, λ=1 gives the dequantized
/// ternary matrix.
pub fn blended_weights<T: Scalar>(w: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    check_lambda(lambda.as_f64())?;
    if lambda == T::zero() {
        return Ok(w.clone());
    }
    let dq = weight_quant(w).dequantize();
    if lambda == T::one() {
        return Ok(dq);
    }
    let mut out = w.clone();
    for (o, &q) in out.data_mut().iter_mut().zip(dq.data()) {
        *o = *o + lambda * (q - *o);
    }
    Ok(out)
}

/// Fake-quantized weights on the tape: forward uses [`blended_weights`],
/// backward passes the gradient to `w` unchanged for every λ.
pub fn fake_quant_weights<T: Scalar>(g: &mut Graph<T>, w: Var, lambda: T) -> Result<Var> {
    let surrogate = blended_weights(g.value(w), lambda)?;
    g.straight_through(w, surrogate)
}

/// Activation fake-quantization with a straight-through gradient.
pub fn fake_quant_activations<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let surrogate = activation_quant(g.value(x));
    g.straight_through(x, surrogate)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(
            "fake_quant_weights",
            alloc::format!("lambda {lambda} outside [0, 1]"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `min(a·t/T, 1)`: reaches 1 at `t = T/a` and stays there.
    TwoPhase,
    /// `t/T`.
    Linear,
    /// 0 before `T/2`, 1 from then on.
    Step,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::TwoPhase => "two-phase",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-phase" => Some(ScheduleKind::TwoPhase),
            "linear" => Some(ScheduleKind::Linear),
            "step" => Some(ScheduleKind::Step),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub kind: ScheduleKind,
    /// Ramp slope for the two-phase schedule.
    pub slope: f64,
    pub total_steps: u64,
}

impl LambdaSchedule {
    pub const DEFAULT_SLOPE: f64 = 2.0;

    pub fn two_phase(total_steps: u64) -> Self {
        LambdaSchedule {
            kind: ScheduleKind::TwoPhase,
            slope: Self::DEFAULT_SLOPE,
            total_steps,
        }
    }

    pub fn new(kind: ScheduleKind, total_steps: u64) -> Self {
        LambdaSchedule {
            kind,
            slope: Self::DEFAULT_SLOPE,
            total_steps,
        }
    }

    /// λ(t) for `0 ≤ t ≤ T`.
    pub fn value(&self, step: u64) -> Result<f64> {
        let total = self.total_steps;
        if total == 0 || step > total {
            return Err(Error::Index {
                op: "lambda_value",
                index: step as usize,
                bound: total as usize + 1,
            });
        }
        let frac = step as f64 / total as f64;
        let raw = match self.kind {
            ScheduleKind::TwoPhase => self.slope * frac,
            ScheduleKind::Linear => frac,
            ScheduleKind::Step => {
                if 2 * step < total {
                    0.0
                } else {
                    1.0
                }
            }
        };
        Ok(raw.clamp(0.0, 1.0))
    }
}

/// Activation-quantization switches plus the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    pub quantize_activations: bool,
    pub activation_bits: u32,
    pub schedule: LambdaSchedule,
}

impl QuantConfig {
    pub fn new(schedule: LambdaSchedule) -> Self {
        QuantConfig {
            quantize_activations: false,
            activation_bits: 8,
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quantize_activations && self.activation_bits != 8 {
            return Err(Error::contract(
                "QuantConfig",
                alloc::format!(
                    "only 8-bit activations are supported, got {}",
                    self.activation_bits
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn exact_ternary_matrix() {
        let w = Tensor::from_rows(&[&[0.4f32, -0.4], &[0.4, -0.4]]);
        let q = weight_quant(&w);
        assert_eq!(q.scale(), 0.4);
        assert_eq!(q.codes(), &[1, -1, 1, -1]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn zero_matrix_uses_sentinel() {
        let q = weight_quant(&Tensor::<f32>::zeros(&[3, 2]));
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.codes(), &[0; 6]);
        assert_eq!(q.dequantize().data(), &[0.0; 6]);
    }

    #[test]
    fn mixed_magnitudes() {
        let w = Tensor::from_rows(&[&[1.0f64, 0.1], &[-1.0, -0.1]]);
        let q = weight_quant(&w);
        assert!((q.scale() - 0.55).abs() < 1e-15);
        assert_eq!(q.codes(), &[1, 0, -1, 0]);
        let dq = q.dequantize();
        assert_eq!(dq.data(), &[q.scale(), 0.0, -q.scale(), 0.0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // mean |w| = 1, so ±0.5 sits exactly on the rounding boundary
        let w = Tensor::new(&[4], vec![0.5f64, -0.5, 1.5, -1.5]).unwrap();
        assert_eq!(weight_quant(&w).codes(), &[1, -1, 1, -1]);
    }

    #[test]
    fn activation_quant_example() {
        let x = Tensor::from_rows(&[&[0.5f64, -1.0], &[0.0, 0.0]]);
        let y = activation_quant(&x);
        assert!((y.data()[0] - 64.0 / 127.0).abs() < 1e-15);
        assert!((y.data()[0] - 0.503937).abs() < 1e-6);
        assert_eq!(y.data()[1], -1.0);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn activation_grid_points_are_fixed() {
        let s = 0.37f64 / 127.0;
        let x = Tensor::new(&[4], vec![127.0 * s, -3.0 * s, 0.0, 64.0 * s]).unwrap();
        let y = activation_quant(&x);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= f64::EPSILON * a.abs().max(1e-300) * 2.0);
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let w = Tensor::from_rows(&[&[1.0f64, 0.1], &[-1.0, -0.1]]);
        assert_eq!(blended_weights(&w, 0.0).unwrap(), w);
        assert_eq!(
            blended_weights(&w, 1.0).unwrap(),
            weight_quant(&w).dequantize()
        );
        let half = blended_weights(&w, 0.5).unwrap();
        for (a, b) in half.data().iter().zip([0.775, 0.05, -0.775, -0.05]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(blended_weights(&w, 1.5).is_err());
        assert!(blended_weights(&w, -0.1).is_err());
    }

    #[test]
    fn fake_quant_forward_and_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 0.1], &[-1.0, -0.1]]));
        let q = fake_quant_weights(&mut g, w, 1.0).unwrap();
        assert_eq!(g.value(q).data()[1], 0.0);
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn two_phase_schedule_points() {
        let s = LambdaSchedule::two_phase(1000);
        assert_eq!(s.value(0).unwrap(), 0.0);
        assert_eq!(s.value(250).unwrap(), 0.5);
        assert_eq!(s.value(500).unwrap(), 1.0);
        assert_eq!(s.value(1000).unwrap(), 1.0);
        assert!(s.value(1001).is_err());
    }

    #[test]
    fn linear_and_step_schedules() {
        let lin = LambdaSchedule::new(ScheduleKind::Linear, 10);
        assert_eq!(lin.value(5).unwrap(), 0.5);
        let step = LambdaSchedule::new(ScheduleKind::Step, 10);
        assert_eq!(step.value(4).unwrap(), 0.0);
        assert_eq!(step.value(5).unwrap(), 1.0);
    }

    #[test]
    fn quant_config_rejects_other_widths() {
        let mut cfg = QuantConfig::new(LambdaSchedule::two_phase(10));
        cfg.activation_bits = 4;
        assert!(cfg.validate().is_ok());
        cfg.quantize_activations = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn codes_outside_alphabet_rejected() {
        assert!(QuantizedWeights::new(&[2], vec![2i8, 0], 1.0f32).is_err());
        assert!(QuantizedWeights::new(&[2], vec![1i8, 0], 0.0f32).is_err());
    }
}
