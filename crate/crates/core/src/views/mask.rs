//! Motion segmentation against a temporal-median background.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Foreground threshold on |frame − background| in [0,1] units.
    pub threshold: f64,
    /// Side of the square structuring element for opening and closing; 1
    /// disables morphology.
    pub morph_size: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            morph_size: 1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || self.morph_size == 0 || self.morph_size % 2 == 0 {
            return Err(MavrError::Config(format!(
                "mask threshold {} must be non-negative and morphology size {} odd",
                self.threshold, self.morph_size
            )));
        }
        Ok(())
    }
}

/// Per-pixel median over frames; even counts average the two middle values.
pub fn temporal_median(frames: &[Vec<f64>]) -> Vec<f64> {
    let n = frames.len();
    let len = frames.first().map_or(0, Vec::len);
    let mut column = vec![0.0; n];
    (0..len)
        .map(|i| {
            for (c, f) in column.iter_mut().zip(frames) {
                *c = f[i];
            }
            column.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect()
}

/// Binary erosion (`min`) or dilation (`max`) over in-bounds neighbours.
fn morph(mask: &[bool], h: usize, w: usize, size: usize, dilate: bool) -> Vec<bool> {
    let r = (size / 2) as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = !dilate;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let v = mask[(yy * w as isize + xx) as usize];
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

pub fn open_close(mask: &[bool], h: usize, w: usize, size: usize) -> Vec<bool> {
    let opened = morph(&morph(mask, h, w, size, false), h, w, size, true);
    morph(&morph(&opened, h, w, size, true), h, w, size, false)
}

/// Binary foreground per frame for grayscale `frames` of `h × w`.
pub fn segment(frames: &[Vec<f64>], h: usize, w: usize, cfg: &MaskConfig) -> Result<Vec<Vec<bool>>> {
    cfg.validate()?;
    if frames.len() < 3 {
        return Err(MavrError::Config(format!("motion mask needs at least 3 frames, got {}", frames.len())));
    }
    let background = temporal_median(frames);
    Ok(frames
        .iter()
        .map(|f| {
            let raw: Vec<bool> = f.iter().zip(&background).map(|(a, b)| (a - b).abs() > cfg.threshold).collect();
            open_close(&raw, h, w, cfg.morph_size)
        })
        .collect())
}
