//! Per-view 3D residual encoder (basic blocks, depth 2-2-2-2).
//!
//! Temporal stride is 1 everywhere, so every stage keeps the clip length T.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, GroupNorm};
use crate::error::{MavrError, Result};
use crate::numerics::{PoolKind, Scalar, Var};
use crate::params::{Binder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub temporal_stride: usize,
    pub norm_groups: usize,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            base_width,
            temporal_stride: 1,
            norm_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 || self.base_width % self.norm_groups != 0 {
            return Err(MavrError::Config(format!(
                "base width {} must be >= 4 and divisible by {} norm groups",
                self.base_width, self.norm_groups
            )));
        }
        if self.temporal_stride != 1 {
            return Err(MavrError::Config("temporal stride must be 1".into()));
        }
        if self.in_channels == 0 {
            return Err(MavrError::Config("encoder needs at least one input channel".into()));
        }
        Ok(())
    }

    /// Channel widths of C2..C5.
    pub fn stage_widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    /// Closed-form learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let norm = |c: usize| 2 * c;
        let w = self.base_width;
        let mut n = conv(self.in_channels, w, 3 * 7 * 7) + norm(w);
        let mut cin = w;
        for cout in self.stage_widths() {
            for block in 0..2 {
                let c_in = if block == 0 { cin } else { cout };
                n += conv(c_in, cout, 27) + norm(cout) + conv(cout, cout, 27) + norm(cout);
                if block == 0 && c_in != cout {
                    n += conv(c_in, cout, 1) + norm(cout);
                }
            }
            cin = cout;
        }
        n
    }
}

/// Stage outputs C2..C5, each `[B, C_k, T, H_k, W_k]`.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

impl StageFeatures {
    pub fn as_array(&self) -> [Var; 4] {
        [self.c2, self.c3, self.c4, self.c5]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    shortcut: Option<(Conv, GroupNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        groups: usize,
    ) -> Self {
        let shortcut = (cin != cout || stride != [1, 1, 1]).then(|| {
            (
                Conv::new(store, rng, &format!("{name}.proj"), cin, cout, [1, 1, 1], stride, [0, 0, 0]),
                GroupNorm::new(store, &format!("{name}.proj_norm"), cout, groups),
            )
        });
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, [3, 3, 3], stride, [1, 1, 1]),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cout, groups),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            shortcut,
        }
    }

    fn forward<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(bx, x)?;
        let h = self.norm1.forward(bx, h)?;
        let h = bx.graph.relu(h);
        let h = self.conv2.forward(bx, h)?;
        let h = self.norm2.forward(bx, h)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(bx, x)?;
                norm.forward(bx, s)?
            }
            None => x,
        };
        let sum = bx.graph.add(h, skip)?;
        Ok(bx.graph.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<[BasicBlock; 2]>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let g = config.norm_groups;
        let stem = Conv::new(store, rng, &format!("{name}.stem"), config.in_channels, w, [3, 7, 7], [1, 2, 2], [1, 3, 3]);
        let stem_norm = GroupNorm::new(store, &format!("{name}.stem_norm"), w, g);
        let strides = [[1, 1, 1], [1, 2, 2], [1, 2, 2], [1, 2, 2]];
        let mut stages = Vec::new();
        let mut cin = w;
        for (s, (&cout, &stride)) in config.stage_widths().iter().zip(&strides).enumerate() {
            let prefix = format!("{name}.stage{}", s + 1);
            stages.push([
                BasicBlock::new(store, rng, &format!("{prefix}.block1"), cin, cout, stride, g),
                BasicBlock::new(store, rng, &format!("{prefix}.block2"), cout, cout, [1, 1, 1], g),
            ]);
            cin = cout;
        }
        Ok(Self {
            config,
            stem,
            stem_norm,
            stages,
        })
    }

    /// `x` is `[B, C_in, T, H, W]` with H and W divisible by 32.
    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<StageFeatures> {
        let s = bx.graph.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(MavrError::shape(
                "encoder",
                "C_in",
                format!("expected [B,{},T,H,W], got {s:?}", self.config.in_channels),
            ));
        }
        if s[3] % 32 != 0 || s[4] % 32 != 0 {
            return Err(MavrError::Config(format!(
                "encoder input {}x{} is not divisible by 32",
                s[3], s[4]
            )));
        }
        let h = self.stem.forward(bx, x)?;
        let h = self.stem_norm.forward(bx, h)?;
        let h = bx.graph.relu(h);
        let mut h = bx.graph.pool3d(h, PoolKind::Max, [1, 2, 2], [1, 2, 2])?;
        let mut taps = Vec::with_capacity(4);
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(bx, h)?;
            }
            taps.push(h);
        }
        Ok(StageFeatures {
            c2: taps[0],
            c3: taps[1],
            c4: taps[2],
            c5: taps[3],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};
    use rand::SeedableRng;

    fn build(in_channels: usize, w: usize) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, &mut rng, "rgb", EncoderConfig::new(in_channels, w)).unwrap();
        (store, enc)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (c, w) in [(3, 16), (2, 16), (1, 8), (3, 64)] {
            let (store, enc) = build(c, w);
            assert_eq!(store.count(), enc.config.parameter_count());
        }
    }

    #[test]
    fn rejects_bad_width_and_extent() {
        assert!(EncoderConfig::new(3, 12).validate().is_err());
        let (store, enc) = build(1, 8);
        let mut g = Graph::new();
        let mut bx = Binder::new(&mut g, &store);
        let x = bx.graph.constant(Tensor::zeros(&[1, 1, 2, 48, 64]));
        assert!(matches!(enc.forward(&mut bx, x), Err(MavrError::Config(_))));
    }

    #[test]
    fn stage_shapes_keep_time() {
        let (store, enc) = build(2, 8);
        let mut g = Graph::new();
        let mut bx = Binder::new(&mut g, &store);
        let x = bx.graph.constant(Tensor::zeros(&[1, 2, 3, 64, 32]));
        let f = enc.forward(&mut bx, x).unwrap();
        assert_eq!(g.shape(f.c2), &[1, 8, 3, 16, 8]);
        assert_eq!(g.shape(f.c5), &[1, 64, 3, 2, 1]);
    }
}
