use super::{AutodiffError, Result, Tensor};
use serde::{Deserialize, Serialize};

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

fn check_shapes(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Step decay: the rate is divided by `factor` every `every` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub every: u64,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            every: 10_000,
            factor: 10.0,
        }
    }
}

impl LrSchedule {
    /// Rate used for (zero-based) iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let drops = iter.checked_div(self.every).unwrap_or(0);
        self.base / self.factor.powi(drops.min(i32::MAX as u64) as i32)
    }
}

/// SGD with optional heavy-ball momentum; momentum 0 is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub schedule: LrSchedule,
    pub momentum: f64,
    velocity: Vec<Tensor>,
    iteration: u64,
}

impl Sgd {
    pub fn new(schedule: LrSchedule, momentum: f64) -> Self {
        Self {
            schedule,
            momentum,
            velocity: Vec::new(),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.iteration)
    }

    /// Applies one update and advances the schedule.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        let lr = self.current_lr();
        if self.momentum == 0.0 {
            sgd_step(params, grads, lr)?;
        } else {
            check_shapes(params, grads)?;
            if self.velocity.is_empty() {
                self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            }
            for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
                for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vi = self.momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        self.iteration += 1;
        Ok(lr)
    }
}
