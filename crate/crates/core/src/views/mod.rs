//! The three synchronized views of a clip: RGB frames, dense optical flow,
//! and a binary motion mask.

pub mod flow;
pub mod mask;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use flow::{FlowConfig, Plane};
pub use mask::MaskConfig;

use crate::error::{MavrError, Result};
use crate::numerics::{mvt, Tensor};

/// Frames per training clip.
pub const CLIP_LEN: usize = 16;

/// Nominal camera rate.
pub const FRAME_RATE_HZ: f64 = 30.0;

/// Apparent-size class, standing in for camera-to-vehicle distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTag {
    Short,
    Medium,
    Long,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 3] = [ScaleTag::Short, ScaleTag::Medium, ScaleTag::Long];

    pub fn name(self) -> &'static str {
        match self {
            ScaleTag::Short => "short",
            ScaleTag::Medium => "medium",
            ScaleTag::Long => "long",
        }
    }
}

/// Frames `[T, H, W, 3]` with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
    pub frame_rate_hz: f64,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(MavrError::shape("FrameSequence", "rank", format!("expected [T,H,W,3], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(MavrError::Config(format!("a frame sequence needs at least 2 frames, got {}", s[0])));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MavrError::Contract("frame values must lie in [0,1]".into()));
        }
        Ok(Self {
            frames,
            frame_rate_hz: FRAME_RATE_HZ,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Luminance of frame `t` (0.299 R + 0.587 G + 0.114 B).
    pub fn gray(&self, t: usize) -> Plane {
        let (h, w) = (self.height(), self.width());
        let px = &self.frames.data()[t * h * w * 3..(t + 1) * h * w * 3];
        let data = px
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect();
        Plane::new(h, w, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewClip {
    /// `[3, T, H, W]`
    pub rgb: Tensor<f32>,
    /// `[2, T, H, W]`, (u, v) in pixels per frame.
    pub flow: Tensor<f32>,
    /// `[1, T, H, W]`, exactly 0 or 1.
    pub mask: Tensor<f32>,
    pub label: usize,
    pub scale: ScaleTag,
}

impl MultiViewClip {
    pub fn view(&self, kind: crate::model::ViewKind) -> &Tensor<f32> {
        use crate::model::ViewKind;
        match kind {
            ViewKind::Rgb => &self.rgb,
            ViewKind::Flow => &self.flow,
            ViewKind::Mask => &self.mask,
        }
    }
}

/// Channel-first transpose `[T,H,W,3] → [3,T,H,W]`.
pub fn extract_rgb(seq: &FrameSequence) -> Tensor<f32> {
    seq.frames.permute(&[3, 0, 1, 2]).expect("rank-4 frames")
}

/// Flow from frame `t−1` to `t` for every `t`; frame 0 gets zero flow.
pub fn dense_flow(seq: &FrameSequence, cfg: &FlowConfig) -> Result<Tensor<f32>> {
    let (t_len, h, w) = (seq.len(), seq.height(), seq.width());
    let plane = h * w;
    let mut out = Tensor::zeros(&[2, t_len, h, w]);
    let mut prev = seq.gray(0);
    for t in 1..t_len {
        let next = seq.gray(t);
        let f = flow::farneback(&prev, &next, cfg)?;
        let d = out.data_mut();
        for i in 0..plane {
            d[t * plane + i] = f[2 * i] as f32;
            d[(t_len + t) * plane + i] = f[2 * i + 1] as f32;
        }
        prev = next;
    }
    Ok(out)
}

pub fn motion_mask(seq: &FrameSequence, cfg: &MaskConfig) -> Result<Tensor<f32>> {
    let (t_len, h, w) = (seq.len(), seq.height(), seq.width());
    let frames: Vec<Vec<f64>> = (0..t_len).map(|t| seq.gray(t).data).collect();
    let masks = mask::segment(&frames, h, w, cfg)?;
    let data = masks.into_iter().flatten().map(|b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, t_len, h, w], data)
}

/// Frame indices kept from a sequence of `t_in` frames: stride
/// `floor(t_in / 16)` from frame 0.
pub fn sample_indices(t_in: usize) -> Result<Vec<usize>> {
    if t_in < CLIP_LEN {
        return Err(MavrError::Config(format!("sequence has {t_in} frames, at least {CLIP_LEN} required")));
    }
    let stride = t_in / CLIP_LEN;
    Ok((0..CLIP_LEN).map(|i| i * stride).collect())
}

/// Keeps `indices` along axis 1 of a `[C, T, H, W]` tensor.
pub fn select_frames(x: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(c * indices.len() * plane);
    for ch in 0..c {
        for &i in indices {
            data.extend_from_slice(&x.data()[(ch * t + i) * plane..][..plane]);
        }
    }
    Tensor::new(vec![c, indices.len(), s[2], s[3]], data).expect("consistent shape")
}

pub const VIEW_FILES: [&str; 3] = ["rgb.mvt", "flow.mvt", "mask.mvt"];

/// Extracts all three views, samples 16 frames, and when `cache` is given
/// writes `rgb.mvt`, `flow.mvt` and `mask.mvt` there.
pub fn assemble_clip(
    seq: &FrameSequence,
    label: usize,
    scale: ScaleTag,
    flow_cfg: &FlowConfig,
    mask_cfg: &MaskConfig,
    cache: Option<&Path>,
) -> Result<MultiViewClip> {
    let idx = sample_indices(seq.len())?;
    let rgb = select_frames(&extract_rgb(seq), &idx);
    let flow = select_frames(&dense_flow(seq, flow_cfg)?, &idx);
    let mask = select_frames(&motion_mask(seq, mask_cfg)?, &idx);
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| MavrError::io(dir, e))?;
        for (name, t) in VIEW_FILES.iter().zip([&rgb, &flow, &mask]) {
            mvt::write(&dir.join(name), t)?;
        }
    }
    Ok(MultiViewClip {
        rgb,
        flow,
        mask,
        label,
        scale,
    })
}

/// Reads cached views written by [`assemble_clip`].
pub fn load_views(dir: &Path, label: usize, scale: ScaleTag) -> Result<MultiViewClip> {
    let [rgb, flow, mask] = VIEW_FILES.map(|name| mvt::read::<f32>(&dir.join(name)));
    let clip = MultiViewClip {
        rgb: rgb?,
        flow: flow?,
        mask: mask?,
        label,
        scale,
    };
    let s = clip.rgb.shape();
    let expect = |c: usize| vec![c, s[1], s[2], s[3]];
    if s.len() != 4 || s[0] != 3 || clip.flow.shape() != expect(2) || clip.mask.shape() != expect(1) {
        return Err(MavrError::Format {
            path: dir.to_path_buf(),
            message: "view tensors disagree in shape".into(),
        });
    }
    Ok(clip)
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.png"))
}

/// Rounds to 8-bit levels, as a PNG round trip would.
pub fn quantize(frames: &Tensor<f32>) -> Tensor<f32> {
    frames.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn write_frames(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MavrError::io(dir, e))?;
    let (h, w) = (seq.height(), seq.width());
    let n = h * w * 3;
    for t in 0..seq.len() {
        let bytes: Vec<u8> = seq.frames.data()[t * n..(t + 1) * n]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = frame_path(dir, t);
        image::save_buffer(&path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| MavrError::Image { path, source })?;
    }
    Ok(())
}

/// Reads `frame_00000.png`, `frame_00001.png`, … until the first gap.
pub fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut t = 0;
    loop {
        let path = frame_path(dir, t);
        if !path.exists() {
            break;
        }
        let img = image::open(&path)
            .map_err(|source| MavrError::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let d = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(d) != d {
            return Err(MavrError::Format {
                path,
                message: "frame size differs from frame 0".into(),
            });
        }
        data.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
        t += 1;
    }
    let (h, w) = dims.ok_or_else(|| MavrError::Format {
        path: dir.to_path_buf(),
        message: "no frame_00000.png".into(),
    })?;
    FrameSequence::new(Tensor::new(vec![t, h, w, 3], data)?)
}
