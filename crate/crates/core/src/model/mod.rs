//! The three-branch network: per-view encoders and pyramids, fusion,
//! cross-view attention, and the classifier head.

pub mod attention;
pub mod encoder;
pub mod layers;
pub mod mvfpn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionConfig, AttentionOutput, Classifier, CrossViewAttention};
pub use encoder::{Encoder, EncoderConfig, StageFeatures};
pub use mvfpn::{fuse_views, FeaturePyramid, PyramidModule};

use crate::error::{MavrError, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Binder, ParamStore};
use layers::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Rgb,
    Flow,
    Mask,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Rgb, ViewKind::Flow, ViewKind::Mask];

    pub fn channels(self) -> usize {
        match self {
            ViewKind::Rgb => 3,
            ViewKind::Flow => 2,
            ViewKind::Mask => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Rgb => "rgb",
            ViewKind::Flow => "flow",
            ViewKind::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub pyramid_width: usize,
    pub heads: usize,
    pub classes: usize,
    pub norm_groups: usize,
    pub views: Vec<ViewKind>,
    /// Feature-pyramid fusion; when off, each view is summarised by a
    /// projection of its pooled C5 only.
    pub use_pyramid: bool,
    pub use_attention: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            pyramid_width: 64,
            heads: 12,
            classes: 4,
            norm_groups: 8,
            views: ViewKind::ALL.to_vec(),
            use_pyramid: true,
            use_attention: true,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Width of the per-view descriptor (4 pyramid levels × d).
    pub fn descriptor_width(&self) -> usize {
        4 * self.pyramid_width
    }

    /// Width of the fused per-frame sequence.
    pub fn fused_width(&self) -> usize {
        self.views.len() * self.descriptor_width()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::for_width(self.fused_width(), self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(MavrError::Config("at least one view must be enabled".into()));
        }
        let mut sorted = self.views.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.views.len() {
            return Err(MavrError::Config("duplicate view in view list".into()));
        }
        if self.classes < 2 {
            return Err(MavrError::Config("need at least two classes".into()));
        }
        if self.pyramid_width == 0 {
            return Err(MavrError::Config("pyramid width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MavrError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        EncoderConfig {
            norm_groups: self.norm_groups,
            ..EncoderConfig::new(1, self.base_width)
        }
        .validate()
    }
}

#[derive(Debug, Clone)]
struct Branch {
    view: ViewKind,
    encoder: Encoder,
    pyramid: Option<PyramidModule>,
    vanilla: Option<Linear>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    /// Per-view descriptors `[B, T, 4d]`, in configured view order.
    pub descriptors: Vec<Var>,
    pub fused: Var,
    /// Attention weights `[B, h, T, T]` when attention is enabled.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    branches: Vec<Branch>,
    attention: Option<CrossViewAttention>,
    classifier: Classifier,
}

impl Model {
    /// Builds the network and its freshly initialised parameters.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branches = Vec::new();
        for &view in &config.views {
            let name = view.name();
            let enc_cfg = EncoderConfig {
                norm_groups: config.norm_groups,
                ..EncoderConfig::new(view.channels(), config.base_width)
            };
            let encoder = Encoder::new(&mut store, &mut rng, &format!("{name}.encoder"), enc_cfg)?;
            let (pyramid, vanilla) = if config.use_pyramid {
                let p = PyramidModule::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.pyramid"),
                    enc_cfg.stage_widths(),
                    config.pyramid_width,
                );
                (Some(p), None)
            } else {
                let l = Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.vanilla_proj"),
                    enc_cfg.stage_widths()[3],
                    config.descriptor_width(),
                );
                (None, Some(l))
            };
            branches.push(Branch {
                view,
                encoder,
                pyramid,
                vanilla,
            });
        }
        let attention = if config.use_attention {
            Some(CrossViewAttention::new(&mut store, &mut rng, "attention", config.attention())?)
        } else {
            None
        };
        let classifier = Classifier::new(&mut store, &mut rng, "classifier", config.fused_width(), config.classes);
        Ok((
            Self {
                config,
                branches,
                attention,
                classifier,
            },
            store,
        ))
    }

    pub fn views(&self) -> Vec<ViewKind> {
        self.branches.iter().map(|b| b.view).collect()
    }

    /// Encoder stage features of one view.
    pub fn encode<T: Scalar>(&self, bx: &mut Binder<T>, view: ViewKind, x: Var) -> Result<StageFeatures> {
        let branch = self
            .branches
            .iter()
            .find(|b| b.view == view)
            .ok_or_else(|| MavrError::Config(format!("view {} is not enabled", view.name())))?;
        branch.encoder.forward(bx, x)
    }

    /// Full pyramid (with materialised P-levels) for one view.
    pub fn pyramid<T: Scalar>(&self, bx: &mut Binder<T>, view: ViewKind, stages: &StageFeatures) -> Result<FeaturePyramid> {
        let branch = self
            .branches
            .iter()
            .find(|b| b.view == view)
            .ok_or_else(|| MavrError::Config(format!("view {} is not enabled", view.name())))?;
        match &branch.pyramid {
            Some(p) => p.build(bx, stages),
            None => Err(MavrError::Config("pyramid fusion is disabled".into())),
        }
    }

    /// `inputs` holds one `[B, C_v, T, H, W]` node per configured view.
    /// `dropout_mask` is used only when the configured dropout is non-zero.
    pub fn forward<T: Scalar>(
        &self,
        bx: &mut Binder<T>,
        inputs: &[Var],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput> {
        if inputs.len() != self.branches.len() {
            return Err(MavrError::Config(format!(
                "model expects {} views, got {}",
                self.branches.len(),
                inputs.len()
            )));
        }
        let mut descriptors = Vec::with_capacity(inputs.len());
        for (branch, &x) in self.branches.iter().zip(inputs) {
            let stages = branch.encoder.forward(bx, x)?;
            let desc = match (&branch.pyramid, &branch.vanilla) {
                (Some(p), _) => p.descriptor(bx, &stages)?.descriptor,
                (None, Some(proj)) => {
                    let pooled = mvfpn::spatial_mean(bx, stages.c5)?;
                    let pooled = bx.graph.permute(pooled, &[0, 2, 1])?;
                    proj.forward(bx, pooled)?
                }
                (None, None) => unreachable!("branch without a descriptor head"),
            };
            descriptors.push(desc);
        }
        let fused = fuse_views(bx, &descriptors)?;
        let (context, attention) = match &self.attention {
            Some(att) => {
                let out = att.forward(bx, fused)?;
                (out.context, Some(out.weights))
            }
            None => (fused, None),
        };
        let dropout = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                use rand::Rng;
                let batch = bx.graph.shape(fused)[0];
                let hidden = (self.config.fused_width() / 2).max(1);
                let keep = 1.0 - self.config.dropout;
                let mask = Tensor::from_fn(&[batch, hidden], |_| {
                    T::from_f64(if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                });
                Some(bx.graph.constant(mask))
            }
            _ => None,
        };
        let logits = self.classifier.forward(bx, context, dropout)?;
        Ok(ModelOutput {
            logits,
            descriptors,
            fused,
            attention,
        })
    }
}
