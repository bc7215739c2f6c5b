//! Per-parameter optimizers. Moment buffers live inside [`Param`] so they
//! travel with checkpoints.

use super::Param;
use ndarray::Dimension;
use serde::{Deserialize, Serialize};

const EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive-moment estimation; `smoothing` is the second-moment decay.
    Adam,
    /// Root-mean-square propagation; `smoothing` is the squared-gradient
    /// decay constant.
    RmsProp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCfg {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub smoothing: f32,
}

impl OptimizerCfg {
    pub fn adam(lr: f32) -> Self {
        OptimizerCfg {
            kind: OptimizerKind::Adam,
            lr,
            smoothing: 0.999,
        }
    }

    pub fn rmsprop(lr: f32, smoothing: f32) -> Self {
        OptimizerCfg {
            kind: OptimizerKind::RmsProp,
            lr,
            smoothing,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerCfg,
    /// Completed step count; Adam bias correction uses `t`.
    pub t: u64,
}

const ADAM_BETA1: f32 = 0.9;

impl Optimizer {
    pub fn new(cfg: OptimizerCfg) -> Self {
        Optimizer { cfg, t: 0 }
    }

    /// Mark the start of an update; call once per optimization step,
    /// before applying `step` to the parameters.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    pub fn step<D: Dimension>(&self, p: &mut Param<D>) {
        match self.cfg.kind {
            OptimizerKind::Adam => {
                let b1 = ADAM_BETA1;
                let b2 = self.cfg.smoothing;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                ndarray::Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(&mut p.m1)
                    .and(&mut p.m2)
                    .for_each(|v, &g, m1, m2| {
                        *m1 = b1 * *m1 + (1.0 - b1) * g;
                        *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *v -= self.cfg.lr * mhat / (vhat.sqrt() + EPS);
                    });
            }
            OptimizerKind::RmsProp => {
                let a = self.cfg.smoothing;
                ndarray::Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(&mut p.m1)
                    .for_each(|v, &g, sq| {
                        *sq = a * *sq + (1.0 - a) * g * g;
                        *v -= self.cfg.lr * g / (sq.sqrt() + EPS);
                    });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn rmsprop_step_has_unit_scale_free_magnitude() {
        let mut p = Param::new(Array1::from_elem(1, 1.0f32));
        p.grad[0] = 4.0;
        let mut opt = Optimizer::new(OptimizerCfg::rmsprop(0.01, 0.9));
        opt.advance();
        opt.step(&mut p);
        // First step: sq = 0.1 * g^2, so delta = lr * g / (sqrt(0.1) * |g|).
        let expect = 1.0 - 0.01 * 4.0 / ((0.1f32 * 16.0).sqrt() + EPS);
        assert!((p.value[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr() {
        let mut p = Param::new(Array1::from_elem(1, 0.0f32));
        p.grad[0] = 1e-3;
        let mut opt = Optimizer::new(OptimizerCfg::adam(0.1));
        opt.advance();
        opt.step(&mut p);
        assert!((p.value[0] + 0.1).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Param::new(Array1::from_elem(3, 2.0f32));
        let mut opt = Optimizer::new(OptimizerCfg::rmsprop(0.5, 0.9));
        opt.advance();
        opt.step(&mut p);
        assert!(p.value.iter().all(|&v| v == 2.0));
    }
}
