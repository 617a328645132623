//! Layer-wise distillation: mean over blocks of the elementwise MSE between
//! student and frozen-teacher block outputs.

use crate::autograd::{Graph, Var};
use crate::layers::BlockActivations;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub enabled: bool,
    /// Weight of the distillation term.
    pub beta: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: false,
            beta: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::contract(
                "DistillConfig",
                "beta must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn check_blocks(student: usize, teacher: usize) -> Result<()> {
    if student != teacher || student == 0 {
        return Err(Error::shape("kd_loss", &[student], &[teacher]));
    }
    Ok(())
}

pub fn kd_loss<T: Scalar>(
    student: &BlockActivations<T>,
    teacher: &BlockActivations<T>,
) -> Result<T> {
    check_blocks(student.0.len(), teacher.0.len())?;
    let mut total = T::zero();
    for (s, t) in student.0.iter().zip(&teacher.0) {
        total += mse(s, t)?;
    }
    Ok(total / T::of(student.0.len() as f64))
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("kd_loss", a.shape(), b.shape()));
    }
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        s += d * d;
    }
    Ok(s / T::of(a.numel() as f64))
}

/// Tape version of [`kd_loss`]; the teacher side is constant.
pub fn kd_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    student: &[Var],
    teacher: &BlockActivations<T>,
) -> Result<Var> {
    check_blocks(student.len(), teacher.0.len())?;
    let mut acc: Option<Var> = None;
    for (&s, t) in student.iter().zip(&teacher.0) {
        let m = g.mse_to_const(s, t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    let sum = acc.expect("at least one block");
    Ok(g.scale(sum, T::one() / T::of(student.len() as f64)))
}

/// `ce + β·kd` when enabled, `ce` otherwise.
pub fn total_loss<T: Scalar>(ce: T, kd: T, cfg: &DistillConfig) -> T {
    if cfg.enabled {
        ce + T::of(cfg.beta) * kd
    } else {
        ce
    }
}

pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    kd: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    match (cfg.enabled, kd) {
        (true, Some(kd)) => {
            let weighted = g.scale(kd, T::of(cfg.beta));
            g.add(ce, weighted)
        }
        (true, None) => Err(Error::contract(
            "total_loss",
            "distillation enabled but no kd term was computed",
        )),
        (false, _) => Ok(ce),
    }
}
