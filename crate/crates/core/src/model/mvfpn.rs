//! Per-view feature pyramid: lateral 1×1×1 projections, nearest top-down
//! merging, 3×3×3 refinement, and per-frame global spatial pooling of each
//! level into a `[T, 4d]` view descriptor.

use rand_chacha::ChaCha8Rng;

use super::encoder::StageFeatures;
use super::layers::Conv;
use crate::error::{MavrError, Result};
use crate::numerics::{Scalar, Var};
use crate::params::{Binder, ParamStore};

/// Pyramid levels P2..P5 (`[B, d, T, H_k, W_k]`) and the pooled descriptor `[B, T, 4d]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: Option<[Var; 4]>,
    pub descriptor: Var,
}

#[derive(Debug, Clone)]
pub struct PyramidModule {
    pub width: usize,
    pub laterals: [Conv; 4],
    pub refines: [Conv; 4],
}

impl PyramidModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        stage_widths: [usize; 4],
        width: usize,
    ) -> Self {
        let laterals = std::array::from_fn(|k| {
            Conv::new(store, rng, &format!("{name}.lateral{}", k + 2), stage_widths[k], width, [1, 1, 1], [1, 1, 1], [0, 0, 0])
        });
        let refines = std::array::from_fn(|k| {
            Conv::new(store, rng, &format!("{name}.refine{}", k + 2), width, width, [3, 3, 3], [1, 1, 1], [1, 1, 1])
        });
        Self {
            width,
            laterals,
            refines,
        }
    }

    /// Top-down merge: M5 = L5, M_k = L_k + up2(M_{k+1}).
    fn merged<T: Scalar>(&self, bx: &mut Binder<T>, stages: &StageFeatures) -> Result<[Var; 4]> {
        let c = stages.as_array();
        for k in 0..3 {
            let (hi, lo) = (bx.graph.shape(c[k]).to_vec(), bx.graph.shape(c[k + 1]).to_vec());
            if hi.len() != 5 || lo.len() != 5 || hi[3] != 2 * lo[3] || hi[4] != 2 * lo[4] || hi[2] != lo[2] {
                return Err(MavrError::shape(
                    "build_pyramid",
                    format!("C{}/C{}", k + 2, k + 3),
                    format!("{hi:?} is not exactly twice {lo:?} spatially"),
                ));
            }
        }
        let mut m = [c[3]; 4];
        m[3] = self.laterals[3].forward(bx, c[3])?;
        for k in (0..3).rev() {
            let lateral = self.laterals[k].forward(bx, c[k])?;
            let up = bx.graph.upsample_nearest2d(m[k + 1], 2)?;
            m[k] = bx.graph.add(lateral, up)?;
        }
        Ok(m)
    }

    /// Full pyramid including the materialised P-levels.
    pub fn build<T: Scalar>(&self, bx: &mut Binder<T>, stages: &StageFeatures) -> Result<FeaturePyramid> {
        let m = self.merged(bx, stages)?;
        let mut levels = [m[0]; 4];
        let mut pooled = Vec::with_capacity(4);
        for k in 0..4 {
            levels[k] = self.refines[k].forward(bx, m[k])?;
            pooled.push(spatial_mean(bx, levels[k])?);
        }
        let descriptor = descriptor_from_pooled(bx, &pooled)?;
        Ok(FeaturePyramid {
            levels: Some(levels),
            descriptor,
        })
    }

    /// Descriptor only; the refine convolution and its spatial pooling are
    /// evaluated jointly, never materialising the P-levels.
    pub fn descriptor<T: Scalar>(&self, bx: &mut Binder<T>, stages: &StageFeatures) -> Result<FeaturePyramid> {
        let m = self.merged(bx, stages)?;
        let mut pooled = Vec::with_capacity(4);
        for k in 0..4 {
            pooled.push(self.refines[k].forward_spatial_mean(bx, m[k])?);
        }
        let descriptor = descriptor_from_pooled(bx, &pooled)?;
        Ok(FeaturePyramid {
            levels: None,
            descriptor,
        })
    }
}

/// `[B, C, T, H, W]` → `[B, C, T]` mean over H and W.
pub fn spatial_mean<T: Scalar>(bx: &mut Binder<T>, x: Var) -> Result<Var> {
    let s = bx.graph.shape(x).to_vec();
    let flat = bx.graph.reshape(x, &[s[0], s[1], s[2], s[3] * s[4]])?;
    bx.graph.mean(flat, 3)
}

/// Four `[B, d, T]` level summaries → `[B, T, 4d]` (P2 block first).
fn descriptor_from_pooled<T: Scalar>(bx: &mut Binder<T>, pooled: &[Var]) -> Result<Var> {
    let cat = bx.graph.concat(pooled, 1)?;
    bx.graph.permute(cat, &[0, 2, 1])
}

/// Per-frame concatenation of view descriptors in the given order.
pub fn fuse_views<T: Scalar>(bx: &mut Binder<T>, descriptors: &[Var]) -> Result<Var> {
    let first = bx
        .graph
        .shape(*descriptors.first().ok_or_else(|| MavrError::Config("no views to fuse".into()))?)
        .to_vec();
    for &d in descriptors {
        let s = bx.graph.shape(d);
        if s.len() != 3 || s[..2] != first[..2] || s[2] != first[2] {
            return Err(MavrError::shape(
                "fuse_views",
                "width",
                format!("{s:?} vs {first:?}"),
            ));
        }
    }
    bx.graph.concat(descriptors, 2)
}
