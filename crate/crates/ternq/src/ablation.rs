//! Teacher once, then every arm for every seed under one λ schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::corpus::Corpus;
use crate::manifest::{CorpusInfo, RunManifest, RunOutputs, BUILD_ID};
use crate::metrics::{window_mean, TrainMetrics};
use crate::train::{evaluate_ce, train_run, train_teacher, Arm, TrainConfig};
use crate::{Error, Result};

/// Fraction of steps at each end used to compare KD-MSE.
pub const KD_WINDOW: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Shared run settings; `arm` and `seed` are overridden per run.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
    pub eval_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub seed: u64,
    /// Validation CE at λ = 1; NaN for a diverged run.
    pub final_ce: f64,
    pub diverged: bool,
    pub kd_first: Option<f64>,
    pub kd_last: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub teacher_val_ce: f64,
    pub rows: Vec<SummaryRow>,
    /// `(arm, mean final CE)` sorted ascending; diverged runs count as +∞.
    pub ranking: Vec<(Arm, f64)>,
    pub verdict: String,
}

/// Everything a run produced, kept in memory for callers that do not write
/// files.
pub struct RunRecord {
    pub arm: Option<Arm>,
    pub seed: u64,
    pub metrics: TrainMetrics,
}

pub struct AblationOutput {
    pub report: AblationReport,
    pub teacher: RunRecord,
    pub runs: Vec<RunRecord>,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval batch must be positive".into()));
        }
        self.base.validate()
    }

    pub fn run_config(&self, arm: Arm, seed: u64) -> TrainConfig {
        TrainConfig {
            arm,
            seed,
            ..self.base.clone()
        }
    }
}

/// Runs the ablation. With `out` set, each run gets its own directory with
/// a manifest, metrics and checkpoint, plus `summary.csv`/`summary.json`.
pub fn run_ablation(
    cfg: &AblationConfig,
    corpus: &Corpus,
    corpus_info: CorpusInfo,
    out: Option<&Path>,
) -> Result<AblationOutput> {
    cfg.validate()?;
    let dirs = |name: &str| out.map(|o| RunOutputs::in_dir(&o.join(name)));

    let teacher_cfg = cfg.run_config(cfg.base.arm, cfg.teacher_seed);
    let teacher_out = dirs("teacher");
    if let Some(o) = &teacher_out {
        manifest("teacher", None, &teacher_cfg, &corpus_info, None, o).write()?;
    }
    let teacher = train_teacher(&teacher_cfg, corpus)?;
    if teacher.diverged() {
        return Err(Error::Config("teacher training diverged".into()));
    }
    let teacher_val_ce = evaluate_ce(
        &teacher.model,
        corpus.val(),
        0.0,
        cfg.base.seq_len,
        cfg.eval_batch,
    )?;
    if let Some(o) = &teacher_out {
        teacher.metrics.write_csv(&o.metrics)?;
        save_checkpoint(&teacher.model, &o.checkpoint)?;
    }

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for arm in Arm::ALL {
            let run_cfg = cfg.run_config(arm, seed);
            let paths = dirs(&format!("{arm}-s{seed}"));
            if let Some(o) = &paths {
                let t = teacher_out
                    .as_ref()
                    .filter(|_| arm.flags().1)
                    .map(|t| t.checkpoint.clone());
                manifest(arm.name(), Some(arm), &run_cfg, &corpus_info, t, o).write()?;
            }
            let res = train_run(&run_cfg, corpus, Some(&teacher.model))?;
            let diverged = res.diverged();
            let final_ce = if diverged {
                f64::NAN
            } else {
                evaluate_ce(
                    &res.model,
                    corpus.val(),
                    1.0,
                    cfg.base.seq_len,
                    cfg.eval_batch,
                )?
            };
            let kd = res.metrics.kd_series();
            rows.push(SummaryRow {
                arm,
                seed,
                final_ce,
                diverged,
                kd_first: window_mean(&kd, KD_WINDOW, false),
                kd_last: window_mean(&kd, KD_WINDOW, true),
            });
            if let Some(o) = &paths {
                res.metrics.write_csv(&o.metrics)?;
                save_checkpoint(&res.model, &o.checkpoint)?;
            }
            runs.push(RunRecord {
                arm: Some(arm),
                seed,
                metrics: res.metrics,
            });
        }
    }

    let ranking = rank_arms(&rows);
    let verdict = verdict(&ranking, &rows);
    let report = AblationReport {
        teacher_val_ce,
        rows,
        ranking,
        verdict,
    };
    if let Some(o) = out {
        write_summary(&report, o)?;
    }
    Ok(AblationOutput {
        report,
        teacher: RunRecord {
            arm: None,
            seed: cfg.teacher_seed,
            metrics: teacher.metrics,
        },
        runs,
    })
}

fn manifest(
    role: &str,
    arm: Option<Arm>,
    cfg: &TrainConfig,
    corpus: &CorpusInfo,
    teacher: Option<PathBuf>,
    outputs: &RunOutputs,
) -> RunManifest {
    RunManifest {
        role: role.to_owned(),
        arm,
        seed: cfg.seed,
        build: BUILD_ID.to_owned(),
        config: cfg.clone(),
        corpus: corpus.clone(),
        teacher,
        outputs: outputs.clone(),
    }
}

/// Mean final CE per arm, lowest first.
pub fn rank_arms(rows: &[SummaryRow]) -> Vec<(Arm, f64)> {
    let mut ranking: Vec<(Arm, f64)> = Arm::ALL
        .into_iter()
        .filter_map(|arm| {
            let ces: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm)
                .map(|r| {
                    if r.diverged {
                        f64::INFINITY
                    } else {
                        r.final_ce
                    }
                })
                .collect();
            (!ces.is_empty()).then(|| (arm, ces.iter().sum::<f64>() / ces.len() as f64))
        })
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranking
}

/// Seeds in which `arm` has the strictly lowest final CE.
pub fn wins(rows: &[SummaryRow], arm: Arm) -> usize {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    seeds
        .into_iter()
        .filter(|&s| {
            let ce = |a: Arm| {
                rows.iter().find(|r| r.seed == s && r.arm == a).map(|r| {
                    if r.diverged {
                        f64::INFINITY
                    } else {
                        r.final_ce
                    }
                })
            };
            let Some(mine) = ce(arm) else { return false };
            Arm::ALL
                .into_iter()
                .filter(|&a| a != arm)
                .all(|a| ce(a).is_none_or(|other| mine < other))
        })
        .count()
}

fn verdict(ranking: &[(Arm, f64)], rows: &[SummaryRow]) -> String {
    let order = ranking
        .iter()
        .map(|(a, ce)| format!("{a} {ce:.4}"))
        .collect::<Vec<_>>()
        .join(" < ");
    let expected = [Arm::DirectRmsnorm, Arm::QatKd, Arm::BaselineQat];
    let matches = ranking.iter().map(|r| r.0).eq(expected);
    let seeds = rows.len() / Arm::ALL.len();
    format!(
        "mean final CE at lambda=1: {order}; expected ordering {}; direct-rmsnorm lowest in {}/{seeds} seeds",
        if matches { "reproduced" } else { "NOT reproduced" },
        wins(rows, Arm::DirectRmsnorm),
    )
}

pub fn summary_csv(report: &AblationReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "seed", "final_ce"])
        .expect("in-memory CSV write");
    for r in &report.rows {
        w.write_record([r.arm.name(), &r.seed.to_string(), &r.final_ce.to_string()])
            .expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

fn write_summary(report: &AblationReport, out: &Path) -> Result<()> {
    let csv = out.join("summary.csv");
    std::fs::write(&csv, summary_csv(report)).map_err(|e| Error::io(&csv, e))?;
    let json = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: Arm, seed: u64, ce: f64) -> SummaryRow {
        SummaryRow {
            arm,
            seed,
            final_ce: ce,
            diverged: false,
            kd_first: None,
            kd_last: None,
        }
    }

    #[test]
    fn ranking_and_wins() {
        let rows = vec![
            row(Arm::BaselineQat, 1, 3.0),
            row(Arm::QatKd, 1, 2.5),
            row(Arm::DirectRmsnorm, 1, 2.0),
            row(Arm::BaselineQat, 2, 3.0),
            row(Arm::QatKd, 2, 1.9),
            row(Arm::DirectRmsnorm, 2, 2.1),
        ];
        let r = rank_arms(&rows);
        assert_eq!(
            r.iter().map(|x| x.0).collect::<Vec<_>>(),
            [Arm::DirectRmsnorm, Arm::QatKd, Arm::BaselineQat]
        );
        assert_eq!(wins(&rows, Arm::DirectRmsnorm), 1);
        assert!(verdict(&r, &rows).contains("reproduced; direct-rmsnorm lowest in 1/2 seeds"));
    }

    #[test]
    fn diverged_runs_rank_last() {
        let mut bad = row(Arm::DirectRmsnorm, 1, f64::NAN);
        bad.diverged = true;
        let rows = vec![bad, row(Arm::BaselineQat, 1, 9.0)];
        assert_eq!(rank_arms(&rows)[0].0, Arm::BaselineQat);
        assert_eq!(wins(&rows, Arm::BaselineQat), 1);
    }
}
