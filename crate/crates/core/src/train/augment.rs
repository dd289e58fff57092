//! Spatial crop and horizontal flip applied identically to all views.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MavrError, Result};
use crate::numerics::Tensor;
use crate::views::MultiViewClip;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Crop {
    /// Training: random position, mirrored with probability `flip_prob`.
    Random { flip_prob: f64 },
    /// Evaluation: centred, never mirrored.
    Center,
}

/// Crops `[C, T, H, W]` at `(y0, x0)` to `hs × ws`, optionally mirrored.
/// `negate` lists channels whose sign flips with the mirror.
fn crop_view(x: &Tensor<f32>, (y0, x0): (usize, usize), (hs, ws): (usize, usize), flip: bool, negate: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(c * t * hs * ws);
    for ch in 0..c {
        let sign = if flip && negate.contains(&ch) { -1.0 } else { 1.0 };
        for f in 0..t {
            let plane = &x.data()[(ch * t + f) * h * w..][..h * w];
            for y in 0..hs {
                let row = &plane[(y0 + y) * w + x0..][..ws];
                if flip {
                    data.extend(row.iter().rev().map(|&v| sign * v));
                } else {
                    data.extend(row.iter().map(|&v| sign * v));
                }
            }
        }
    }
    Tensor::new(vec![c, t, hs, ws], data).expect("crop shape")
}

/// One crop position and flip decision per clip, shared by every view and
/// frame. Mirroring negates the horizontal flow component.
pub fn augment(clip: &MultiViewClip, size: usize, mode: Crop, rng: Option<&mut ChaCha8Rng>) -> Result<MultiViewClip> {
    let s = clip.rgb.shape();
    let (h, w) = (s[2], s[3]);
    if size > h || size > w {
        return Err(MavrError::Config(format!("crop {size} exceeds frame {h}x{w}")));
    }
    let (y0, x0, flip) = match (mode, rng) {
        (Crop::Random { flip_prob }, Some(rng)) => {
            let y0 = rng.gen_range(0..=h - size);
            let x0 = rng.gen_range(0..=w - size);
            (y0, x0, rng.gen_bool(flip_prob))
        }
        (Crop::Random { .. }, None) => return Err(MavrError::Config("random crop needs an rng".into())),
        (Crop::Center, _) => ((h - size) / 2, (w - size) / 2, false),
    };
    Ok(MultiViewClip {
        rgb: crop_view(&clip.rgb, (y0, x0), (size, size), flip, &[]),
        flow: crop_view(&clip.flow, (y0, x0), (size, size), flip, &[0]),
        mask: crop_view(&clip.mask, (y0, x0), (size, size), flip, &[]),
        label: clip.label,
        scale: clip.scale,
    })
}

/// Horizontal mirror of the whole clip with the flow sign rule.
pub fn mirror(clip: &MultiViewClip) -> MultiViewClip {
    let s = clip.rgb.shape();
    let full = (s[2], s[3]);
    MultiViewClip {
        rgb: crop_view(&clip.rgb, (0, 0), full, true, &[]),
        flow: crop_view(&clip.flow, (0, 0), full, true, &[0]),
        mask: crop_view(&clip.mask, (0, 0), full, true, &[]),
        label: clip.label,
        scale: clip.scale,
    }
}
