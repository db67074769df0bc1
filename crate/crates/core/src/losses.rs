//! Adversarial and L1 objectives.
//!
//! Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs. Each
//! loss has a matching gradient with respect to its inputs for use in the
//! training loop; a clamped probability receives zero gradient.

use thiserror::Error;

use crate::tensor::Tensor;

pub const EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid loss weight {0}")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l1: 100.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_l1: f64) -> Result<Self, LossError> {
        if lambda_l1.is_finite() && lambda_l1 >= 0.0 {
            Ok(Self { lambda_l1 })
        } else {
            Err(LossError::InvalidWeight(lambda_l1))
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    if p.is_nan() {
        0.5
    } else {
        p.clamp(EPS, 1.0 - EPS)
    }
}

/// Binary cross-entropy of a probability against a 0/1 target.
pub fn bce(prob: f64, target: f64) -> f64 {
    let p = clamp_prob(prob);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d bce / d prob.
pub fn bce_grad(prob: f64, target: f64) -> f64 {
    if !(EPS..=1.0 - EPS).contains(&prob) {
        return 0.0;
    }
    -target / prob + (1.0 - target) / (1.0 - prob)
}

fn batch_mean(probs: &[f64], target: f64) -> f64 {
    probs.iter().map(|&p| bce(p, target)).sum::<f64>() / probs.len() as f64
}

/// Discriminator objective: real pairs scored against 1, generated pairs against 0.
pub fn d_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    batch_mean(d_real, 1.0) + batch_mean(d_fake, 0.0)
}

/// Non-saturating generator objective: generated pairs scored against 1.
pub fn g_adv_loss(d_fake: &[f64]) -> f64 {
    batch_mean(d_fake, 1.0)
}

/// Gradient of the batch-mean BCE with respect to each probability.
pub fn bce_batch_grad(probs: &[f64], target: f64) -> Vec<f64> {
    let n = probs.len() as f64;
    probs.iter().map(|&p| bce_grad(p, target) / n).collect()
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(target: &Tensor, generated: &Tensor) -> Result<f64, LossError> {
    check_shapes(target, generated)?;
    let sum: f64 = target.data().iter().zip(generated.data()).map(|(y, g)| (y - g).abs()).sum();
    Ok(sum / target.len() as f64)
}

/// d l1_loss / d generated, using sign(0) = 0.
pub fn l1_grad(target: &Tensor, generated: &Tensor) -> Result<Tensor, LossError> {
    check_shapes(target, generated)?;
    let n = target.len() as f64;
    let data = target
        .data()
        .iter()
        .zip(generated.data())
        .map(|(y, g)| {
            let d = g - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(target.shape(), data))
}

/// Generator losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLoss {
    pub adv: f64,
    pub l1: f64,
    pub total: f64,
}

pub fn g_total_loss(
    d_fake: &[f64],
    target: &Tensor,
    generated: &Tensor,
    w: LossWeights,
) -> Result<GeneratorLoss, LossError> {
    let adv = g_adv_loss(d_fake);
    let l1 = l1_loss(target, generated)?;
    Ok(GeneratorLoss { adv, l1, total: adv + w.lambda_l1 * l1 })
}
