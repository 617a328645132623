//! Per-step training metrics and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CSV_HEADER: &str = "step,lambda,ce,kd,gradnorm,ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lambda: f64,
    pub ce: f32,
    /// Present only when distillation is active.
    pub kd: Option<f32>,
    /// Global gradient norm before clipping.
    pub gradnorm: f64,
    /// Wall time of the step; recorded only when timing is switched on so
    /// that metrics files stay reproducible by default.
    pub ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
    /// First step whose loss or gradient went non-finite.
    pub diverged_at: Option<u64>,
}

impl TrainMetrics {
    pub fn push(&mut self, r: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.step < r.step));
        self.records.push(r);
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// KD values of every record that has one, in step order.
    pub fn kd_series(&self) -> Vec<f32> {
        self.records.iter().filter_map(|r| r.kd).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory CSV write");
        }
        if self.records.is_empty() {
            w.write_record(CSV_HEADER.split(','))
                .expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::Format(e.to_string()))?;
        if header.iter().ne(CSV_HEADER.split(',')) {
            return Err(Error::Format(format!(
                "metrics header must be `{CSV_HEADER}`"
            )));
        }
        let mut m = TrainMetrics::default();
        for r in rd.deserialize() {
            let r: StepRecord = r.map_err(|e| Error::Format(format!("metrics: {e}")))?;
            if m.diverged_at.is_none() && (!r.ce.is_finite() || !r.gradnorm.is_finite()) {
                m.diverged_at = Some(r.step);
            }
            m.records.push(r);
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean of `xs[range]` where the range covers the first or last `fraction`
/// of the series (at least one element).
pub fn window_mean(xs: &[f32], fraction: f64, tail: bool) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = ((xs.len() as f64 * fraction).ceil() as usize).clamp(1, xs.len());
    let w = if tail { &xs[xs.len() - n..] } else { &xs[..n] };
    Some(w.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64)
}
