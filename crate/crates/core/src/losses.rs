//! Training objectives: classification cross-entropy, the cross-view
//! contrastive alignment term, the attention-entropy regulariser, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Clamp used inside `log` for the entropy term (so `0·log 0` evaluates to 0).
pub const LOG_EPS: f64 = 1e-8;
/// Floor of the norm in unit-length normalisation.
pub const NORM_EPS: f64 = 1e-12;
/// Allowed deviation from unit norm for alignment embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(MavrError::Config(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(MavrError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits [B, C]` against integer labels.
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// View descriptor `[B, T, F]` → unit-length temporal mean `[B, F]`.
pub fn view_embedding<T: Scalar>(g: &mut Graph<T>, descriptor: Var) -> Result<Var> {
    let pooled = g.mean(descriptor, 1)?;
    g.l2_normalize(pooled, 1, NORM_EPS)
}

/// Mean over view pairs `(a, b)`, `a` before `b`, of the row-wise
/// cross-entropy of `f_a · f_bᵀ / τ` against the diagonal.
///
/// Every embedding row must have unit norm. With fewer than two views there
/// are no pairs and the loss is zero.
pub fn alignment_loss<T: Scalar>(g: &mut Graph<T>, embeddings: &[Var], tau: f64) -> Result<Var> {
    for (i, &e) in embeddings.iter().enumerate() {
        let v = g.value(e);
        if v.rank() != 2 {
            return Err(MavrError::shape("alignment_loss", "rank", format!("{:?}", v.shape())));
        }
        let width = v.shape()[1];
        for (r, row) in v.data().chunks(width).enumerate() {
            let norm = row.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(MavrError::Contract(format!(
                    "alignment embedding {i} row {r} has norm {norm}, expected 1"
                )));
            }
        }
    }
    let batch = match embeddings.first() {
        Some(&e) => g.shape(e)[0],
        None => 0,
    };
    if embeddings.iter().any(|&e| g.shape(e)[0] != batch) {
        return Err(MavrError::shape("alignment_loss", "B", "embeddings disagree on batch size"));
    }
    let targets: Vec<usize> = (0..batch).collect();
    let mut pair_losses = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let fb_t = g.transpose(embeddings[j])?;
            let sim = g.matmul(embeddings[i], fb_t)?;
            let sim = g.scale(sim, 1.0 / tau);
            pair_losses.push(g.cross_entropy(sim, &targets)?);
        }
    }
    if pair_losses.is_empty() {
        return Ok(g.constant(crate::numerics::Tensor::scalar(T::ZERO)));
    }
    let n = pair_losses.len();
    let mut total = pair_losses[0];
    for &l in &pair_losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Mean over batch and heads of `(1/T) Σ_i Σ_j a_ij log a_ij` for weights `[B, h, T, T]`.
pub fn attention_entropy_loss<T: Scalar>(g: &mut Graph<T>, weights: Var) -> Result<Var> {
    let s = g.shape(weights).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(MavrError::shape("attention_entropy_loss", "rank", format!("expected [B,h,T,T], got {s:?}")));
    }
    let maps = s[0] * s[1];
    let logs = g.log(weights, LOG_EPS);
    let terms = g.mul(weights, logs)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / (maps * s[2]) as f64))
}

/// Scalar values of each objective after a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub align: f64,
    pub att: f64,
}

/// `cls + λ1·align + λ2·att`, rejecting non-finite components by name.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    cls: Var,
    align: Var,
    att: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let parts = [("l_cls", cls), ("l_align", align), ("l_att", att)];
    for (name, v) in parts {
        if !g.value(v).item().is_finite() {
            return Err(MavrError::NonFinite { component: name.into() });
        }
    }
    let a = g.scale(align, weights.lambda1);
    let b = g.scale(att, weights.lambda2);
    let t = g.add(cls, a)?;
    let t = g.add(t, b)?;
    let breakdown = LossBreakdown {
        total: g.value(t).item().to_f64(),
        cls: g.value(cls).item().to_f64(),
        align: g.value(align).item().to_f64(),
        att: g.value(att).item().to_f64(),
    };
    Ok((t, breakdown))
}

/// Plain-number form of the weighted total.
pub fn combine(cls: f64, align: f64, att: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_cls", cls), ("l_align", align), ("l_att", att)] {
        if !v.is_finite() {
            return Err(MavrError::NonFinite { component: name.into() });
        }
    }
    Ok(cls + weights.lambda1 * align + weights.lambda2 * att)
}
