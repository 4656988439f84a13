//! Optimizers and learning-rate schedules over candle variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::{OptimizerKind, Schedule, TrainConfig};
use crate::error::Result;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct Optimizer {
    kind: OptimizerKind,
    vars: Vec<Var>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: usize,
    momentum: f64,
    weight_decay: f64,
    clip_grad_norm: f64,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: &TrainConfig) -> Self {
        let n = vars.len();
        Optimizer {
            kind: cfg.optimizer,
            vars,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_grad_norm: cfg.clip_grad_norm,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Backpropagates `loss` and applies one update at rate `lr`. Variables
    /// the loss does not reach are left untouched.
    pub fn backward_step(&mut self, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads, lr)
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let scale = if self.clip_grad_norm > 0.0 {
            let mut sq = 0.0;
            for v in &self.vars {
                if let Some(g) = grads.get(v) {
                    sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > self.clip_grad_norm {
                self.clip_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let t = self.steps as i32;
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else {
                continue;
            };
            // detached so optimizer state never holds on to the autograd graph
            let g = g.detach();
            let mut g = if scale != 1.0 { (g * scale)? } else { g };
            let w = &var.as_tensor().detach();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    if self.weight_decay > 0.0 {
                        g = (g + (w * self.weight_decay)?)?;
                    }
                    let buf = match &self.first[i] {
                        Some(b) => ((b * self.momentum)? + &g)?,
                        None => g,
                    };
                    var.set(&(w - (&buf * lr)?)?)?;
                    self.first[i] = Some(buf);
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let mut w = w.clone();
                    if self.weight_decay > 0.0 {
                        if self.kind == OptimizerKind::Adam {
                            g = (g + (&w * self.weight_decay)?)?;
                        } else {
                            w = (&w * (1.0 - lr * self.weight_decay))?;
                        }
                    }
                    let m = match &self.first[i] {
                        Some(m) => ((m * BETA1)? + (&g * (1.0 - BETA1))?)?,
                        None => (&g * (1.0 - BETA1))?,
                    };
                    let v = match &self.second[i] {
                        Some(v) => ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?,
                        None => (g.sqr()? * (1.0 - BETA2))?,
                    };
                    let m_hat = (&m / (1.0 - BETA1.powi(t)))?;
                    let v_hat = (&v / (1.0 - BETA2.powi(t)))?;
                    let update = (m_hat / (v_hat.sqrt()? + EPS)?)?;
                    var.set(&(w - (update * lr)?)?)?;
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                }
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based) after `iteration` updates in total.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize, iteration: usize) -> f64 {
    let base = match &cfg.schedule {
        Schedule::Step { milestones, gamma } => {
            let drops = milestones.iter().filter(|&&m| epoch >= m).count();
            cfg.lr * gamma.powi(drops as i32)
        }
        Schedule::Cosine { min_lr } => {
            let progress = if cfg.epochs == 0 { 0.0 } else { epoch as f64 / cfg.epochs as f64 };
            min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    };
    if iteration < cfg.warmup_iters {
        // linear ramp from a third of the rate
        let frac = iteration as f64 / cfg.warmup_iters as f64;
        base * (1.0 / 3.0 + (2.0 / 3.0) * frac)
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Stage;
    use candle_core::{DType, Device};

    #[test]
    fn detector_rate_drops_at_eight_and_eleven() {
        let mut cfg = TrainConfig::defaults_for(Stage::Detector);
        cfg.warmup_iters = 0;
        let lrs: Vec<f64> = (0..12).map(|e| learning_rate(&cfg, e, 1000)).collect();
        for (e, lr) in lrs.iter().enumerate() {
            let want = match e {
                0..=7 => 0.02,
                8..=10 => 0.002,
                _ => 0.0002,
            };
            assert!((lr - want).abs() < 1e-12, "epoch {e}: {lr}");
        }
    }

    #[test]
    fn cosine_starts_at_base_and_decreases() {
        let cfg = TrainConfig::defaults_for(Stage::ActionParser);
        let lrs: Vec<f64> = (0..30).map(|e| learning_rate(&cfg, e, 0)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[29] > 0.0);
    }

    fn quadratic_descent(kind: OptimizerKind) -> f64 {
        let mut cfg = TrainConfig::defaults_for(Stage::Detector);
        cfg.optimizer = kind;
        cfg.weight_decay = 0.0;
        cfg.clip_grad_norm = 0.0;
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Optimizer::new(vec![x.clone()], &cfg);
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss, 0.05).unwrap();
        }
        x.as_tensor().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn every_optimizer_minimizes_a_quadratic() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam, OptimizerKind::Adamw] {
            assert!(quadratic_descent(kind) < 1e-3, "{kind:?}");
        }
    }

    #[test]
    fn first_adam_step_moves_by_the_rate() {
        let cfg = TrainConfig::defaults_for(Stage::PartParser);
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -4.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Optimizer::new(vec![x.clone()], &cfg);
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss, 0.1).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 3.9).abs() < 1e-6);
    }
}
