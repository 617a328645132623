//! The optimization loop: fake-quantized forward at the scheduled λ, CE plus
//! optional layer-wise distillation, clipped AdamW on master weights.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ternq_core::distill::{kd_loss_graph, total_loss_graph, DistillConfig};
use ternq_core::layers::{Binding, BlockActivations, ModelConfig, Transformer, DEFAULT_NORM_EPS};
use ternq_core::optim::{adamw_step, clip_global_norm, AdamWConfig, AdamWState};
use ternq_core::packed_model::PackedTransformer;
use ternq_core::quantize::{LambdaSchedule, ScheduleKind};
use ternq_core::Graph;

use crate::corpus::{eval_windows, sample_batch, Corpus, BYTE_VOCAB};
use crate::metrics::{StepRecord, TrainMetrics};
use crate::{Error, Result};

/// The three training strategies under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    BaselineQat,
    QatKd,
    DirectRmsnorm,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::BaselineQat, Arm::QatKd, Arm::DirectRmsnorm];

    pub fn name(self) -> &'static str {
        match self {
            Arm::BaselineQat => "baseline-qat",
            Arm::QatKd => "qat-kd",
            Arm::DirectRmsnorm => "direct-rmsnorm",
        }
    }

    /// `(insert_extra_norms, distill_enabled)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Arm::BaselineQat => (false, false),
            Arm::QatKd => (false, true),
            Arm::DirectRmsnorm => (true, false),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

/// Model dimensions shared by the teacher and every arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub quantize_activations: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            quantize_activations: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arm: Arm,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub schedule: String,
    pub schedule_slope: f64,
    pub kd_beta: f64,
    pub model: ModelShape,
    /// Record per-step wall time in the metrics (makes them non-reproducible).
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            arm: Arm::DirectRmsnorm,
            steps: 3000,
            batch_size: 8,
            seq_len: 64,
            seed: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            clip_norm: 1.0,
            schedule: ScheduleKind::TwoPhase.name().to_owned(),
            schedule_slope: LambdaSchedule::DEFAULT_SLOPE,
            kd_beta: 1.0,
            model: ModelShape::default(),
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "batch size and sequence length must be positive".into(),
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.schedule_slope.is_nan() || self.schedule_slope <= 0.0 {
            return Err(Error::Config("schedule slope must be positive".into()));
        }
        self.schedule()?;
        self.adamw().validate()?;
        self.distill().validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<LambdaSchedule> {
        let kind = ScheduleKind::parse(&self.schedule)
            .ok_or_else(|| Error::Config(format!("unknown schedule `{}`", self.schedule)))?;
        Ok(LambdaSchedule {
            kind,
            slope: self.schedule_slope,
            total_steps: self.steps,
        })
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            enabled: self.arm.flags().1,
            beta: self.kd_beta,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        model_config(&self.model, self.seq_len, self.arm.flags().0)
    }

    /// Teacher architecture: same dimensions, no extra norms.
    pub fn teacher_config(&self) -> ModelConfig {
        model_config(&self.model, self.seq_len, false)
    }
}

fn model_config(shape: &ModelShape, context: usize, extra_norms: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: BYTE_VOCAB,
        d_model: shape.d_model,
        n_layers: shape.n_layers,
        n_heads: shape.n_heads,
        d_ff: shape.d_ff,
        context,
        insert_extra_norms: extra_norms,
        quantize_activations: shape.quantize_activations,
        norm_eps: DEFAULT_NORM_EPS,
    }
}

pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    /// Master weights after the last completed update.
    pub model: Transformer<f32>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.metrics.diverged()
    }
}

/// Init weights come from `seed`; batches from an independent stream of the
/// same seed, so every arm with one seed sees identical weights and data.
fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains a fresh model for `cfg.arm`. The KD arm needs a frozen teacher.
pub fn train_run(
    cfg: &TrainConfig,
    corpus: &Corpus,
    teacher: Option<&Transformer<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let distill = cfg.distill();
    let teacher = match (distill.enabled, teacher) {
        (true, None) => {
            return Err(Error::Config(format!(
                "arm {} needs a teacher checkpoint",
                cfg.arm
            )))
        }
        (true, Some(t)) => {
            check_teacher(cfg, t)?;
            Some(t)
        }
        (false, _) => None,
    };
    let schedule = cfg.schedule()?;
    let model = Transformer::new(cfg.model_config(), cfg.seed)?;
    run_loop(cfg, corpus, model, teacher, &distill, |t| schedule.value(t))
}

/// Full-precision training (λ ≡ 0, no extra norms, no distillation).
pub fn train_teacher(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Transformer::new(cfg.teacher_config(), cfg.seed)?;
    let off = DistillConfig {
        enabled: false,
        beta: cfg.kd_beta,
    };
    run_loop(cfg, corpus, model, None, &off, |_| Ok(0.0))
}

fn check_teacher(cfg: &TrainConfig, teacher: &Transformer<f32>) -> Result<()> {
    let t = teacher.config();
    let s = cfg.model_config();
    if t.d_model != s.d_model || t.n_layers != s.n_layers || t.vocab_size != s.vocab_size {
        return Err(Error::Config(format!(
            "teacher (d_model {}, {} layers) does not match the student (d_model {}, {} layers)",
            t.d_model, t.n_layers, s.d_model, s.n_layers
        )));
    }
    if t.context < cfg.seq_len {
        return Err(Error::Config(format!(
            "teacher context {} is shorter than seq_len {}",
            t.context, cfg.seq_len
        )));
    }
    Ok(())
}

fn run_loop(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut model: Transformer<f32>,
    teacher: Option<&Transformer<f32>>,
    distill: &DistillConfig,
    lambda_at: impl Fn(u64) -> ternq_core::Result<f64>,
) -> Result<TrainOutcome> {
    let adam = cfg.adamw();
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let mut state = AdamWState::zeros_like(model.params());
    let mut rng = batch_rng(cfg.seed);
    let mut metrics = TrainMetrics::default();

    for step in 1..=cfg.steps {
        let started = cfg.wall_time.then(Instant::now);
        let lambda = lambda_at(step)?;
        let batch = sample_batch(corpus.train(), cfg.batch_size, cfg.seq_len, &mut rng)?;

        let teacher_acts = match teacher {
            Some(t) => {
                let mut tg = Graph::new();
                let pass = t.forward(&mut tg, &batch.inputs, batch.batch, 0.0, Binding::Frozen)?;
                Some(BlockActivations::from_pass(&tg, &pass))
            }
            None => None,
        };

        let mut g = Graph::new();
        let pass = model.forward(
            &mut g,
            &batch.inputs,
            batch.batch,
            lambda as f32,
            Binding::Trainable,
        )?;
        let ce = g.cross_entropy(pass.logits, &batch.targets)?;
        let kd = match &teacher_acts {
            Some(acts) => Some(kd_loss_graph(&mut g, &pass.acts, acts)?),
            None => None,
        };
        let loss = total_loss_graph(&mut g, ce, kd, distill)?;
        let ce_value = g.value(ce).item();
        let kd_value = kd.map(|k| g.value(k).item());
        let loss_value = g.value(loss).item();

        let mut record = StepRecord {
            step,
            lambda,
            ce: ce_value,
            kd: kd_value,
            gradnorm: f64::NAN,
            ms: None,
        };
        if !loss_value.is_finite() {
            metrics.diverged_at = Some(step);
            metrics.push(record);
            break;
        }

        g.backward(loss)?;
        let mut grads: Vec<_> = pass.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
        drop(g);
        record.gradnorm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !record.gradnorm.is_finite() {
            metrics.diverged_at = Some(step);
            metrics.push(record);
            break;
        }
        adamw_step(model.params_mut(), &grads, &names, &mut state, &adam)?;
        record.ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        metrics.push(record);
    }
    Ok(TrainOutcome { metrics, model })
}

/// Token-weighted mean next-token CE over `split`, evaluated in
/// non-overlapping windows of `seq_len`.
pub fn evaluate_ce(
    model: &Transformer<f32>,
    split: &[u8],
    lambda: f64,
    seq_len: usize,
    batch: usize,
) -> Result<f64> {
    mean_over_windows(split, seq_len, batch, |i, t, b| {
        Ok(model.loss(i, t, b, lambda as f32)?)
    })
}

/// [`evaluate_ce`] through the packed multiply-free path.
pub fn evaluate_ce_packed(
    model: &PackedTransformer,
    split: &[u8],
    seq_len: usize,
    batch: usize,
) -> Result<f64> {
    mean_over_windows(split, seq_len, batch, |i, t, b| Ok(model.loss(i, t, b)?))
}

fn mean_over_windows(
    split: &[u8],
    seq_len: usize,
    batch: usize,
    loss: impl Fn(&[usize], &[usize], usize) -> Result<f32>,
) -> Result<f64> {
    if split.len() < 2 {
        return Err(Error::Config(
            "evaluation split needs at least two bytes".into(),
        ));
    }
    if seq_len == 0 || batch == 0 {
        return Err(Error::Config(
            "evaluation window and batch must be positive".into(),
        ));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in eval_windows(split, seq_len, batch) {
        let n = b.targets.len();
        total += f64::from(loss(&b.inputs, &b.targets, b.batch)?) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_corpus;

    fn tiny(arm: Arm, steps: u64) -> TrainConfig {
        TrainConfig {
            arm,
            steps,
            batch_size: 2,
            seq_len: 8,
            model: ModelShape {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                quantize_activations: false,
            },
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Corpus {
        Corpus::from_bytes(synthetic_corpus(4000, 3), 0.9).unwrap()
    }

    #[test]
    fn arm_flags() {
        assert_eq!(Arm::BaselineQat.flags(), (false, false));
        assert_eq!(Arm::QatKd.flags(), (false, true));
        assert_eq!(Arm::DirectRmsnorm.flags(), (true, false));
        assert_eq!("qat-kd".parse::<Arm>().unwrap(), Arm::QatKd);
        assert!("kd".parse::<Arm>().is_err());
    }

    #[test]
    fn lambda_column_follows_two_phase_schedule() {
        let out = train_run(&tiny(Arm::BaselineQat, 10), &corpus(), None).unwrap();
        let lambdas: Vec<f64> = out.metrics.records.iter().map(|r| r.lambda).collect();
        let expect: Vec<f64> = (1..=10u64)
            .map(|t| (2.0 * t as f64 / 10.0).min(1.0))
            .collect();
        assert_eq!(lambdas, expect);
        assert!(out
            .metrics
            .records
            .iter()
            .all(|r| r.kd.is_none() && r.ms.is_none()));
    }

    #[test]
    fn kd_arm_requires_teacher() {
        let err = train_run(&tiny(Arm::QatKd, 2), &corpus(), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn kd_arm_records_kd() {
        let cfg = tiny(Arm::QatKd, 3);
        let c = corpus();
        let teacher = train_teacher(&cfg, &c).unwrap().model;
        let out = train_run(&cfg, &c, Some(&teacher)).unwrap();
        assert_eq!(out.metrics.kd_series().len(), 3);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let cfg = tiny(Arm::BaselineQat, 1);
        let m = Transformer::new(cfg.model_config(), 5).unwrap();
        let c = corpus();
        let ce = evaluate_ce(&m, c.val(), 1.0, 8, 4).unwrap();
        assert!((ce - 256f64.ln()).abs() < 0.5, "{ce}");
        assert_eq!(ce, evaluate_ce(&m, c.val(), 1.0, 8, 4).unwrap());
    }

    #[test]
    fn master_weights_keep_moving_at_full_quantization() {
        let cfg = tiny(Arm::DirectRmsnorm, 6);
        let c = corpus();
        let a = train_run(&cfg, &c, None).unwrap().model;
        let b = train_run(&TrainConfig { steps: 7, ..cfg }, &c, None)
            .unwrap()
            .model;
        let q = b.layout().blocks[0].q.weight;
        assert_ne!(a.param(q), b.param(q));
        let dq = b.dequantized_ternary();
        assert_ne!(dq.param(q), b.param(q));
    }
}
