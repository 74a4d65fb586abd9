//! Adam / AdamW and epoch-level learning-rate schedulers.
//!
//! Both optimizers keep their moment estimates as named tensors so a
//! checkpoint can restore them exactly.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Adam {
        lr: f64,
    },
    /// Weight decay is decoupled from the gradient, as in Loshchilov & Hutter.
    AdamW {
        lr: f64,
        weight_decay: f64,
    },
}

impl OptimizerSpec {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Adam { lr } | OptimizerSpec::AdamW { lr, .. } => lr,
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match *self {
            OptimizerSpec::Adam { .. } => 0.0,
            OptimizerSpec::AdamW { weight_decay, .. } => weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Recipe(format!("learning rate must be positive, got {lr}")));
        }
        let wd = self.weight_decay();
        if !(wd.is_finite() && wd >= 0.0) {
            return Err(Error::Recipe(format!("weight decay must be non-negative, got {wd}")));
        }
        Ok(())
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Optimizer {
    spec: OptimizerSpec,
    lr: f64,
    steps: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, vars: Vec<(String, Var)>) -> Result<Self> {
        spec.validate()?;
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            lr: spec.lr(),
            steps: 0,
            slots,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - self.lr * self.spec.weight_decay();
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            slot.m = ((&slot.m * BETA1)? + (&g * (1.0 - BETA1))?)?;
            slot.v = ((&slot.v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + EPS)?)?;
            let theta = slot.var.as_tensor().detach();
            let theta = if decay != 1.0 { (theta * decay)? } else { theta };
            slot.var.set(&(theta - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .flat_map(|s| {
                [
                    (format!("optim.m.{}", s.name), s.m.clone()),
                    (format!("optim.v.{}", s.name), s.v.clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&mut self, steps: u64, lr: f64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for slot in &mut self.slots {
            for (prefix, dst) in [("optim.m.", &mut slot.m), ("optim.v.", &mut slot.v)] {
                let key = format!("{prefix}{}", slot.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks optimizer tensor {key}")))?;
                if t.dims() != dst.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "{key}: expected {:?}, got {:?}",
                        dst.dims(),
                        t.dims()
                    )));
                }
                *dst = t.to_dtype(dst.dtype())?;
            }
        }
        self.steps = steps;
        self.lr = lr;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerSpec {
    #[default]
    None,
    /// Multiplies the rate by `factor` once the monitored metric (higher is
    /// better) has failed to improve for more than `patience` epochs.
    ReduceOnPlateau {
        factor: f64,
        patience: usize,
    },
    CosineAnnealing {
        t_max: usize,
        eta_min: f64,
    },
}

impl SchedulerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SchedulerSpec::None => Ok(()),
            SchedulerSpec::ReduceOnPlateau { factor, .. } => {
                if factor > 0.0 && factor < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Recipe(format!("plateau factor must be in (0, 1), got {factor}")))
                }
            }
            SchedulerSpec::CosineAnnealing { t_max, eta_min } => {
                if t_max == 0 || eta_min.is_nan() || eta_min < 0.0 {
                    Err(Error::Recipe(
                        "cosine annealing needs t_max > 0 and eta_min >= 0".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub spec: SchedulerSpec,
    pub base_lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub epochs: usize,
    pub reductions: usize,
}

impl Scheduler {
    pub fn new(spec: SchedulerSpec, base_lr: f64) -> Self {
        Self {
            spec,
            base_lr,
            best: None,
            bad_epochs: 0,
            epochs: 0,
            reductions: 0,
        }
    }

    /// Called once per epoch with the monitored metric; returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        self.epochs += 1;
        match self.spec {
            SchedulerSpec::None => lr,
            SchedulerSpec::ReduceOnPlateau { factor, patience } => {
                // NaN never counts as an improvement
                if !metric.is_nan() && self.best.is_none_or(|b| metric > b) {
                    self.best = Some(metric);
                    self.bad_epochs = 0;
                    return lr;
                }
                self.bad_epochs += 1;
                if self.bad_epochs > patience {
                    self.bad_epochs = 0;
                    self.reductions += 1;
                    lr * factor
                } else {
                    lr
                }
            }
            SchedulerSpec::CosineAnnealing { t_max, eta_min } => {
                let t = (self.epochs % (2 * t_max)) as f64;
                let cos = (std::f64::consts::PI * t / t_max as f64).cos();
                eta_min + (self.base_lr - eta_min) * (1.0 + cos) / 2.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let var = Var::from_vec(vec![1.0f32, -2.0], 2, &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(OptimizerSpec::Adam { lr: 0.1 }, vec![("w".into(), var.clone())]).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w: Vec<f32> = var.as_tensor().to_vec1().unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6, "{w:?}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let var = Var::from_vec(vec![2.0f32], 1, &Device::Cpu).unwrap();
        let spec = OptimizerSpec::AdamW {
            lr: 0.1,
            weight_decay: 0.5,
        };
        let mut opt = Optimizer::new(spec, vec![("w".into(), var.clone())]).unwrap();
        // g = 3; first Adam step is lr * g/|g|, applied after theta * (1 - lr * wd)
        let loss = (var.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w: Vec<f32> = var.as_tensor().to_vec1().unwrap();
        assert!((w[0] - (2.0 * 0.95 - 0.1)).abs() < 1e-5, "{w:?}");
    }

    #[test]
    fn plateau_reduces_once_per_event() {
        let mut s = Scheduler::new(
            SchedulerSpec::ReduceOnPlateau {
                factor: 0.1,
                patience: 1,
            },
            1.0,
        );
        let mut lr = 1.0;
        let mut seen = Vec::new();
        for m in [0.5, 0.5, 0.5, 0.6, 0.6, 0.6, 0.7] {
            lr = s.step(m, lr);
            seen.push(lr);
        }
        let expect = [1.0, 1.0, 0.1, 0.1, 0.1, 0.01, 0.01];
        for (a, b) in seen.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{seen:?}");
        }
        assert_eq!(s.reductions, 2);
    }

    #[test]
    fn cosine_reaches_floor_at_t_max() {
        let mut s = Scheduler::new(SchedulerSpec::CosineAnnealing { t_max: 4, eta_min: 0.0 }, 1.0);
        let lrs: Vec<f64> = (0..4).map(|_| s.step(0.0, 1.0)).collect();
        assert!((lrs[1] - 0.5).abs() < 1e-12);
        assert!(lrs[3].abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(OptimizerSpec::Adam { lr: 0.0 }.validate().is_err());
        assert!(SchedulerSpec::ReduceOnPlateau {
            factor: 1.5,
            patience: 2
        }
        .validate()
        .is_err());
    }
}
