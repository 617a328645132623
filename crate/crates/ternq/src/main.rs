use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use ternq::ablation::{run_ablation, summary_csv, AblationConfig};
use ternq::checkpoint::{load_checkpoint, save_checkpoint};
use ternq::corpus::{load_corpus, Corpus};
use ternq::manifest::{CorpusInfo, RunManifest, RunOutputs, BUILD_ID};
use ternq::packfile::{load_packed, save_packed};
use ternq::synth::synthetic_corpus;
use ternq::train::{
    evaluate_ce, evaluate_ce_packed, train_run, train_teacher, Arm, ModelShape, TrainConfig,
    TrainOutcome,
};
use ternq::{Error, Result};
use ternq_core::packed_model::PackedTransformer;
use ternq_core::ternpack::{footprint, GIB};

const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ternq",
    version,
    about = "Ternary quantization-aware training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm from scratch
    Train(TrainArgs),
    /// Train the full-precision teacher used by the qat-kd arm
    Teacher(TeacherArgs),
    /// Teacher once, then all three arms for each seed
    Ablate(AblateArgs),
    /// Convert a checkpoint into a 2-bit packed model
    Pack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print mean next-token cross-entropy on the validation split
    Eval(EvalArgs),
    /// Weight-storage footprint of a packed ternary model, as JSON
    Footprint(FootprintArgs),
    /// Write a deterministic synthetic text corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: u64,
    #[arg(long, default_value = "two-phase", value_parser = ["two-phase", "linear", "step"])]
    schedule: String,
    /// Weight on the distillation term
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    /// Also quantize BitLinear inputs to 8 bits
    #[arg(long)]
    quantize_activations: bool,
    /// Fraction of the corpus used for training; the rest is validation
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Record per-step wall time (metrics are then no longer reproducible)
    #[arg(long)]
    wall_time: bool,
}

impl Common {
    fn config(&self, arm: Arm, seed: u64) -> TrainConfig {
        TrainConfig {
            arm,
            steps: self.steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed,
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: self.schedule.clone(),
            kd_beta: self.beta,
            model: ModelShape {
                d_model: self.d_model,
                n_layers: self.layers,
                n_heads: self.heads,
                d_ff: self.d_ff,
                quantize_activations: self.quantize_activations,
            },
            wall_time: self.wall_time,
            ..TrainConfig::default()
        }
    }

    fn corpus(&self) -> Result<(Corpus, CorpusInfo)> {
        let corpus = load_corpus(&self.corpus, self.train_fraction)?;
        let info = CorpusInfo {
            path: Some(self.corpus.clone()),
            bytes: corpus.len(),
            train_fraction: self.train_fraction,
        };
        Ok((corpus, info))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_arm)]
    arm: Arm,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Teacher checkpoint, required by the qat-kd arm
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds, e.g. "1,2,3"
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    teacher_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// A TQ58 checkpoint, or a TQPK file with --packed
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    packed: bool,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Evaluation window; defaults to the model's context length
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct FootprintArgs {
    /// Parameter count; scientific notation such as 70e9 is accepted
    #[arg(long, value_parser = parse_count)]
    params: u64,
    /// Device budgets in GiB, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "24")]
    budget_gb: Vec<f64>,
    /// Number of weight tensors, each carrying one f32 scale
    #[arg(long, default_value_t = 0)]
    tensors: u64,
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if x < 0.0 || x.fract() != 0.0 || x > u64::MAX as f64 {
        return Err(format!("`{s}` is not a whole non-negative count"));
    }
    Ok(x as u64)
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("TQ_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("TQ_THREADS must be a positive integer, got `{v}`"))
        })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Teacher(a) => cmd_teacher(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Pack { checkpoint, out } => {
            let model = load_checkpoint(&checkpoint)?;
            save_packed(&PackedTransformer::from_model(&model)?, &out)?;
            println!("packed {} -> {}", checkpoint.display(), out.display());
            Ok(0)
        }
        Command::Eval(a) => cmd_eval(a),
        Command::Footprint(a) => cmd_footprint(a),
        Command::Synth { out, bytes, seed } => {
            if bytes == 0 {
                return Err(Error::Config("--bytes must be positive".into()));
            }
            std::fs::write(&out, synthetic_corpus(bytes, seed)).map_err(|e| io_err(&out, e))?;
            Ok(0)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn finish(outcome: &TrainOutcome, outputs: &RunOutputs) -> Result<u8> {
    outcome.metrics.write_csv(&outputs.metrics)?;
    save_checkpoint(&outcome.model, &outputs.checkpoint)?;
    match outcome.metrics.diverged_at {
        Some(step) => {
            eprintln!("run diverged at step {step}");
            Ok(EXIT_DIVERGED)
        }
        None => {
            if let Some(last) = outcome.metrics.records.last() {
                println!("step {} ce {}", last.step, last.ce);
            }
            Ok(0)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let cfg = a.common.config(a.arm, a.seed);
    cfg.validate()?;
    let teacher = match (cfg.arm.flags().1, &a.teacher) {
        (true, None) => {
            return Err(Error::Config(format!("arm {} requires --teacher", cfg.arm)));
        }
        (true, Some(p)) => Some(load_checkpoint(p)?),
        (false, _) => None,
    };
    let (corpus, info) = a.common.corpus()?;
    let outputs = RunOutputs::in_dir(&a.common.out);
    RunManifest {
        role: cfg.arm.name().to_owned(),
        arm: Some(cfg.arm),
        seed: cfg.seed,
        build: BUILD_ID.to_owned(),
        config: cfg.clone(),
        corpus: info,
        teacher: a.teacher.clone().filter(|_| teacher.is_some()),
        outputs: outputs.clone(),
    }
    .write()?;
    let outcome = train_run(&cfg, &corpus, teacher.as_ref())?;
    finish(&outcome, &outputs)
}

fn cmd_teacher(a: TeacherArgs) -> Result<u8> {
    let cfg = a.common.config(Arm::BaselineQat, a.seed);
    cfg.validate()?;
    let (corpus, info) = a.common.corpus()?;
    let outputs = RunOutputs::in_dir(&a.common.out);
    RunManifest {
        role: "teacher".to_owned(),
        arm: None,
        seed: cfg.seed,
        build: BUILD_ID.to_owned(),
        config: cfg.clone(),
        corpus: info,
        teacher: None,
        outputs: outputs.clone(),
    }
    .write()?;
    let outcome = train_teacher(&cfg, &corpus)?;
    finish(&outcome, &outputs)
}

fn cmd_ablate(a: AblateArgs) -> Result<u8> {
    if a.seeds.len() < 2 {
        eprintln!("warning: fewer than 2 seeds; the comparison will not be robust");
    }
    let cfg = AblationConfig {
        base: a.common.config(Arm::BaselineQat, 0),
        seeds: a.seeds,
        teacher_seed: a.teacher_seed,
        eval_batch: 16,
    };
    cfg.validate()?;
    let (corpus, info) = a.common.corpus()?;
    std::fs::create_dir_all(&a.common.out).map_err(|e| io_err(&a.common.out, e))?;
    let out = run_ablation(&cfg, &corpus, info, Some(&a.common.out))?;
    print!("{}", summary_csv(&out.report));
    println!("{}", out.report.verdict);
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let corpus = load_corpus(&a.corpus, a.train_fraction)?;
    let ce = if a.packed {
        let model = load_packed(&a.checkpoint)?;
        let seq = a.seq_len.unwrap_or(model.config().context);
        evaluate_ce_packed(&model, corpus.val(), seq, a.batch_size)?
    } else {
        if !(0.0..=1.0).contains(&a.lambda) {
            return Err(Error::Config(format!(
                "--lambda must lie in [0, 1], got {}",
                a.lambda
            )));
        }
        let model = load_checkpoint(&a.checkpoint)?;
        let seq = a.seq_len.unwrap_or(model.config().context);
        evaluate_ce(&model, corpus.val(), a.lambda, seq, a.batch_size)?
    };
    println!("{ce}");
    Ok(0)
}

#[derive(Serialize)]
struct FootprintJson {
    params: u64,
    tensors: u64,
    weight_bytes: u64,
    scale_bytes: u64,
    total_bytes: u64,
    weight_gib: f64,
    total_gib: f64,
    dense_f32_bytes: u64,
    dense_f32_gib: f64,
    fits: Vec<Budget>,
    scope: &'static str,
}

#[derive(Serialize)]
struct Budget {
    budget_gib: f64,
    budget_bytes: u64,
    fits: bool,
}

fn cmd_footprint(a: FootprintArgs) -> Result<u8> {
    if let Some(b) = a.budget_gb.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Config(format!("invalid budget {b}")));
    }
    let budgets: Vec<u64> = a
        .budget_gb
        .iter()
        .map(|g| (g * GIB as f64) as u64)
        .collect();
    let r = footprint(a.params, a.tensors, &budgets)?;
    let json = FootprintJson {
        params: r.params,
        tensors: r.tensors,
        weight_bytes: r.weight_bytes,
        scale_bytes: r.scale_bytes,
        total_bytes: r.total_bytes,
        weight_gib: r.weight_gib(),
        total_gib: r.total_gib(),
        dense_f32_bytes: r.dense_f32_bytes,
        dense_f32_gib: r.dense_f32_gib(),
        fits: a
            .budget_gb
            .iter()
            .zip(&r.fits)
            .map(|(&gib, &(bytes, fits))| Budget {
                budget_gib: gib,
                budget_bytes: bytes,
                fits,
            })
            .collect(),
        scope: "weights and scales only; optimizer state and activations excluded",
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(0)
}
