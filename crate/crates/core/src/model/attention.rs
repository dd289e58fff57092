//! Multi-head self-attention over the fused per-frame sequence, followed by
//! temporal averaging and a two-layer classifier.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::error::{MavrError, Result};
use crate::numerics::{Scalar, Var};
use crate::params::{Binder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        let cfg = Self { model_dim, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Largest head count not above `preferred` that divides `model_dim`.
    pub fn for_width(model_dim: usize, preferred: usize) -> Self {
        let heads = (1..=preferred.max(1)).rev().find(|h| model_dim % h == 0).unwrap_or(1);
        Self { model_dim, heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(MavrError::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct CrossViewAttention {
    pub config: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Attention output: context `[B, T, D]` and row-stochastic weights `[B, h, T, T]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub context: Var,
    pub weights: Var,
}

impl CrossViewAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(Self {
            config,
            query: Linear::new(store, rng, &format!("{name}.query"), d, d),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d),
            output: Linear::new(store, rng, &format!("{name}.output"), d, d),
        })
    }

    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, fused: Var) -> Result<AttentionOutput> {
        let s = bx.graph.shape(fused).to_vec();
        let AttentionConfig { model_dim, heads } = self.config;
        if s.len() != 3 || s[2] != model_dim {
            return Err(MavrError::shape(
                "cross_view_attention",
                "D",
                format!("expected [B,T,{model_dim}], got {s:?}"),
            ));
        }
        let (b, t, hd) = (s[0], s[1], self.config.head_dim());
        let split = |bx: &mut Binder<T>, x: Var| -> Result<Var> {
            let x = bx.graph.reshape(x, &[b, t, heads, hd])?;
            bx.graph.permute(x, &[0, 2, 1, 3])
        };
        let q = self.query.forward(bx, fused)?;
        let q = split(bx, q)?;
        let k = self.key.forward(bx, fused)?;
        let k = split(bx, k)?;
        let v = self.value.forward(bx, fused)?;
        let v = split(bx, v)?;
        let kt = bx.graph.transpose(k)?;
        let scores = bx.graph.matmul(q, kt)?;
        let scores = bx.graph.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = bx.graph.softmax(scores, 3)?;
        let ctx = bx.graph.matmul(weights, v)?;
        let ctx = bx.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = bx.graph.reshape(ctx, &[b, t, model_dim])?;
        let context = self.output.forward(bx, ctx)?;
        Ok(AttentionOutput { context, weights })
    }
}

/// Temporal mean → linear D→D/2 → relu → linear D/2→classes.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, model_dim: usize, classes: usize) -> Self {
        let hidden = (model_dim / 2).max(1);
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), model_dim, hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, classes),
        }
    }

    /// `context` is `[B, T, D]`; `dropout` is an optional `[B, D/2]` keep-mask
    /// already scaled by the inverse keep probability.
    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, context: Var, dropout: Option<Var>) -> Result<Var> {
        let pooled = bx.graph.mean(context, 1)?;
        let h = self.hidden.forward(bx, pooled)?;
        let mut h = bx.graph.relu(h);
        if let Some(mask) = dropout {
            h = bx.graph.mul(h, mask)?;
        }
        self.out.forward(bx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_count_selection() {
        assert_eq!(AttentionConfig::for_width(768, 12).heads, 12);
        assert_eq!(AttentionConfig::for_width(3072, 12).heads, 12);
        assert_eq!(AttentionConfig::for_width(256, 12).heads, 8);
        assert!(AttentionConfig::new(10, 4).is_err());
        assert_eq!(AttentionConfig::new(12, 2).unwrap().head_dim(), 6);
    }
}
