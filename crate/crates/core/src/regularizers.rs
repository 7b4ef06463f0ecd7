//! Values, subgradients, and proximal maps for every supported regularizer.
//!
//! All functions here are pure. Group-structured penalties take the flat
//! weight tensor plus the layer's group index sets; biases are never passed
//! in. Values are unscaled — callers multiply by λ where the objective
//! requires it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which penalty a training run applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    None,
    L1,
    L0,
    GroupLasso,
    SparseGroupLasso,
    SparseGroupL0asso,
}

/// A penalty kind with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Result<RegularizerSpec> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "regularizer strength must be nonnegative, got {}",
                lambda
            )));
        }
        Ok(RegularizerSpec { kind, lambda })
    }
}

/// Σ_g √|g| · ‖w_g‖₂ — the size-weighted group norm sum.
pub fn group_lasso_value(weights: &Tensor, groups: &[Vec<usize>]) -> f64 {
    let w = weights.data();
    groups
        .iter()
        .map(|g| {
            let norm_sq: f64 = g.iter().map(|&i| w[i] * w[i]).sum();
            (g.len() as f64).sqrt() * norm_sq.sqrt()
        })
        .sum()
}

/// Per group: √|g| · w_g / ‖w_g‖₂, with the zero vector at zero groups.
pub fn group_lasso_subgrad(weights: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let w = weights.data();
    let mut out = Tensor::zeros(weights.shape());
    for g in groups {
        let norm_sq: f64 = g.iter().map(|&i| w[i] * w[i]).sum();
        if norm_sq > 0.0 {
            let coef = (g.len() as f64).sqrt() / norm_sq.sqrt();
            for &i in g {
                out.data_mut()[i] = coef * w[i];
            }
        }
    }
    out
}

pub fn l1_value(weights: &Tensor) -> f64 {
    weights.iter().map(f64::abs).sum()
}

/// sign(w), with 0 selected at w = 0.
pub fn l1_subgrad(weights: &Tensor) -> Tensor {
    weights.map(|w| {
        if w > 0.0 {
            1.0
        } else if w < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Exact nonzero count; no tolerance.
pub fn l0_count(weights: &Tensor) -> usize {
    weights.iter().filter(|&w| w != 0.0).count()
}

/// Group-norm sum plus exact nonzero count (unit-weighted; scaled by λ at
/// call sites).
pub fn sgl0_value(weights: &Tensor, groups: &[Vec<usize>]) -> f64 {
    group_lasso_value(weights, groups) + l0_count(weights) as f64
}

/// Group-norm sum plus the elementwise ℓ₁ norm.
pub fn sparse_group_lasso_value(weights: &Tensor, groups: &[Vec<usize>]) -> f64 {
    group_lasso_value(weights, groups) + l1_value(weights)
}

/// sign(c)·max(|c|−λ, 0).
pub fn soft_threshold(c: f64, lambda: f64) -> f64 {
    c.signum() * (c.abs() - lambda).max(0.0)
}

/// 0 when |w| ≤ t, else w; the boundary maps to 0.
pub fn hard_threshold(w: f64, t: f64) -> f64 {
    if w.abs() <= t {
        0.0
    } else {
        w
    }
}

/// Exact minimizer of λ‖V‖₀ + (β/2)‖V−W‖₂²: elementwise hard threshold at
/// √(2λ/β).
pub fn prox_l0(weights: &Tensor, lambda: f64, beta: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "prox_l0 requires nonnegative strength, got {}",
            lambda
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!(
            "prox_l0 requires a positive coupling weight, got {}",
            beta
        )));
    }
    let t = (2.0 * lambda / beta).sqrt();
    Ok(weights.map(|w| hard_threshold(w, t)))
}

/// Unscaled penalty value of `kind` over one layer's weights.
pub fn layer_value(kind: RegularizerKind, weights: &Tensor, groups: &[Vec<usize>]) -> f64 {
    match kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::L1 => l1_value(weights),
        RegularizerKind::L0 => l0_count(weights) as f64,
        RegularizerKind::GroupLasso => group_lasso_value(weights, groups),
        RegularizerKind::SparseGroupLasso => sparse_group_lasso_value(weights, groups),
        RegularizerKind::SparseGroupL0asso => sgl0_value(weights, groups),
    }
}

/// Chosen subgradient of `kind` over one layer's weights. Only defined for
/// the subdifferentiable penalties used by baseline training.
pub fn layer_subgrad(
    kind: RegularizerKind,
    weights: &Tensor,
    groups: &[Vec<usize>],
) -> Result<Tensor> {
    match kind {
        RegularizerKind::None => Ok(Tensor::zeros(weights.shape())),
        RegularizerKind::L1 => Ok(l1_subgrad(weights)),
        RegularizerKind::GroupLasso => Ok(group_lasso_subgrad(weights, groups)),
        RegularizerKind::SparseGroupLasso => {
            let mut g = group_lasso_subgrad(weights, groups);
            g.axpy(1.0, &l1_subgrad(weights));
            Ok(g)
        }
        RegularizerKind::L0 | RegularizerKind::SparseGroupL0asso => Err(Error::Config(format!(
            "{:?} has no subgradient; train it with the penalty-decomposition algorithm",
            kind
        ))),
    }
}
