//! Binary cross-entropy and focal loss for independent multi-label targets.
//!
//! Both losses are written in terms of `z = s·x` with `s = +1` for a
//! positive target and `-1` for a negative one, so that `p_t = σ(z)` and
//! `1 - p_t = σ(-z)`. Log-probabilities come from the log-sigmoid identity
//! `log σ(z) = -(max(-z, 0) + ln(1 + e^{-|z|}))`; raw logits are never
//! exponentiated. Reduction is the mean over every element.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 1.0 }
    }
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        let p = Self { gamma, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::invalid(format!("focal alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Focal(FocalParams),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Bce => Ok(()),
            LossKind::Focal(p) => p.validate(),
        }
    }

    /// Mean loss over flat logits/targets.
    pub fn loss(&self, logits: &[f64], targets: &[f64]) -> Result<f64> {
        match self {
            LossKind::Bce => bce_loss(logits, targets),
            LossKind::Focal(p) => focal_loss(logits, targets, *p),
        }
    }

    /// Mean loss as a differentiable scalar tensor.
    pub fn tensor_loss(&self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        match self {
            LossKind::Bce => bce_loss_tensor(logits, targets),
            LossKind::Focal(p) => focal_loss_tensor(logits, targets, *p),
        }
    }
}

/// `ln σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sign_of_target(y: f64) -> Result<f64> {
    if y == 1.0 {
        Ok(1.0)
    } else if y == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::invalid(format!("target {y} is not binary")))
    }
}

fn check_shapes(logits: &[f64], targets: &[f64]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty loss input"));
    }
    Ok(())
}

/// Per-element focal term `-α (1 - p_t)^γ ln p_t`.
pub fn focal_element(logit: f64, target: f64, params: FocalParams) -> Result<f64> {
    let z = sign_of_target(target)? * logit;
    let log_pt = log_sigmoid(z);
    let weight = if params.gamma == 0.0 {
        1.0
    } else {
        (params.gamma * log_sigmoid(-z)).exp()
    };
    Ok(-params.alpha * weight * log_pt)
}

/// Per-element `-[y ln p + (1 - y) ln(1 - p)]`.
pub fn bce_element(logit: f64, target: f64) -> Result<f64> {
    let z = sign_of_target(target)? * logit;
    Ok(-log_sigmoid(z))
}

pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    check_shapes(logits, targets)?;
    let mut sum = 0.0;
    for (x, y) in logits.iter().zip(targets) {
        sum += bce_element(*x, *y)?;
    }
    Ok(sum / logits.len() as f64)
}

pub fn focal_loss(logits: &[f64], targets: &[f64], params: FocalParams) -> Result<f64> {
    params.validate()?;
    check_shapes(logits, targets)?;
    let mut sum = 0.0;
    for (x, y) in logits.iter().zip(targets) {
        sum += focal_element(*x, *y, params)?;
    }
    Ok(sum / logits.len() as f64)
}

/// Derivative of the focal element with respect to its logit.
///
/// With `f(z) = -α σ(-z)^γ ln σ(z)`:
/// `f'(z) = α σ(-z)^γ (γ σ(z) ln σ(z) - σ(-z))`, and `d/dx = s·f'(s·x)`.
pub fn focal_element_grad(logit: f64, target: f64, params: FocalParams) -> Result<f64> {
    let s = sign_of_target(target)?;
    let z = s * logit;
    let p = sigmoid(z);
    let q = sigmoid(-z);
    let weight = if params.gamma == 0.0 {
        1.0
    } else {
        (params.gamma * log_sigmoid(-z)).exp()
    };
    let inner = if params.gamma == 0.0 {
        -q
    } else {
        params.gamma * p * log_sigmoid(z) - q
    };
    Ok(s * params.alpha * weight * inner)
}

/// Gradient of the mean focal loss with respect to every logit.
pub fn focal_loss_grad(logits: &[f64], targets: &[f64], params: FocalParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_shapes(logits, targets)?;
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(x, y)| Ok(focal_element_grad(*x, *y, params)? / n))
        .collect()
}

/// Gradient of the mean BCE: `(σ(x) - y) / n`.
pub fn bce_loss_grad(logits: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_shapes(logits, targets)?;
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(x, y)| {
            sign_of_target(*y)?;
            Ok((sigmoid(*x) - y) / n)
        })
        .collect()
}

fn check_tensor_shapes(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.dims() != targets.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    Ok(())
}

/// `(z - |z|)/2 - ln(1 + e^{-|z|})`; written without `relu` so the
/// derivative at `z = 0` is right whatever subgradient `abs` picks there.
fn log_sigmoid_tensor(z: &Tensor) -> Result<Tensor> {
    let abs = z.abs()?;
    let soft = (abs.neg()?.exp()? + 1.0)?.log()?;
    Ok((((z - &abs)? * 0.5)? - soft)?)
}

/// `s = 2y - 1`, so `z = s·x`.
fn signed_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let sign = targets.to_dtype(logits.dtype())?.affine(2.0, -1.0)?;
    Ok(logits.mul(&sign)?)
}

pub fn bce_loss_tensor(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_tensor_shapes(logits, targets)?;
    let z = signed_logits(logits, targets)?;
    Ok(log_sigmoid_tensor(&z)?.neg()?.mean_all()?)
}

pub fn focal_loss_tensor(logits: &Tensor, targets: &Tensor, params: FocalParams) -> Result<Tensor> {
    params.validate()?;
    check_tensor_shapes(logits, targets)?;
    let z = signed_logits(logits, targets)?;
    let log_pt = log_sigmoid_tensor(&z)?;
    let per_elem = if params.gamma == 0.0 {
        log_pt
    } else {
        let weight = (log_sigmoid_tensor(&z.neg()?)? * params.gamma)?.exp()?;
        (weight * log_pt)?
    };
    Ok((per_elem.mean_all()? * (-params.alpha))?)
}
