//! The unsupervised registration loss: MSE similarity between the warped
//! moving image and the fixed image, plus diffusion regularization on the
//! spatial forward differences of the displacement field, weighted by
//! `lambda`. Both terms are means over their elements, so `lambda` is
//! resolution-independent.

use serde::{Deserialize, Serialize};

use crate::diff::kernels::Scalar;
use crate::diff::{DiffError, DiffValue, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    Diffusion,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Similarity/smoothness trade-off; 0.04 suits the knee-style synthetic
    /// default, 0.02 the smoother brain-style setting.
    pub lambda: f64,
    pub similarity: Similarity,
    pub regularizer: Regularizer,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.04,
            similarity: Similarity::Mse,
            regularizer: Regularizer::Diffusion,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0) {
            return Err(format!("loss.lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Mean over voxels of `(a - b)^2`.
pub fn mse<S: Scalar>(g: &mut Graph<S>, a: DiffValue, b: DiffValue) -> Result<DiffValue, DiffError> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Mean squared forward difference of the field over voxels, channels and
/// the three spatial axes.
pub fn diffusion_regularizer<S: Scalar>(
    g: &mut Graph<S>,
    phi: DiffValue,
) -> Result<DiffValue, DiffError> {
    let mut acc: Option<DiffValue> = None;
    for axis in 1..=3 {
        let d = g.forward_diff(phi, axis)?;
        let sq = g.square(d)?;
        let m = g.mean(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    g.scale(acc.unwrap(), 1.0 / 3.0)
}

/// `mse(moving ∘ phi, fixed) + lambda * diffusion(phi)`, differentiable
/// end-to-end. `moving`/`fixed` are `[1, d, h, w]`, `phi` is `[3, d, h, w]`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    moving: DiffValue,
    fixed: DiffValue,
    phi: DiffValue,
    lambda: f64,
) -> Result<DiffValue, DiffError> {
    let warped = g.gather_trilinear(moving, phi)?;
    let sim = mse(g, warped, fixed)?;
    if lambda == 0.0 {
        return Ok(sim);
    }
    let reg = diffusion_regularizer(g, phi)?;
    let reg = g.scale(reg, lambda)?;
    g.add(sim, reg)
}

/// Split (similarity, regularizer) readout for trace logging.
pub fn loss_terms<S: Scalar>(
    g: &mut Graph<S>,
    moving: DiffValue,
    fixed: DiffValue,
    phi: DiffValue,
    lambda: f64,
) -> Result<(DiffValue, DiffValue, DiffValue), DiffError> {
    let warped = g.gather_trilinear(moving, phi)?;
    let sim = mse(g, warped, fixed)?;
    let reg = diffusion_regularizer(g, phi)?;
    let scaled = g.scale(reg, lambda)?;
    let total = g.add(sim, scaled)?;
    Ok((total, sim, reg))
}
