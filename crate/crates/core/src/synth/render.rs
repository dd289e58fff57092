//! Frame rendering: a cross-shaped quadrotor silhouette over a background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trajectory::{TrajectorySpec, PATH_MARGIN_PX};
use crate::error::{MavrError, Result};
use crate::numerics::Tensor;
use crate::views::{FrameSequence, ScaleTag};

/// Rotor disk radius as a fraction of the arm length.
pub const DISK_FRACTION: f64 = 0.4;
/// Supersampling factor per axis for anti-aliasing.
const SUPERSAMPLE: usize = 4;
const OBJECT_RGB: [f64; 3] = [0.95, 0.85, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    TexturedNoise,
    /// Textured noise plus static shapes and small moving distractors.
    Clutter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// `[H, W]`
    pub frame_size: [usize; 2],
    /// Arm length of the cross; rotor disks have radius 0.4 of it.
    pub object_radius_px: f64,
    pub background: Background,
    pub illumination_jitter: f64,
    pub pixel_noise_sigma: f64,
    pub seed: u64,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_size;
        if h < 32 || w < 32 {
            return Err(MavrError::Config(format!("frame size {h}x{w} below 32x32")));
        }
        if !(self.object_radius_px >= 2.0) {
            return Err(MavrError::Config(format!("object radius {} below 2 px", self.object_radius_px)));
        }
        if !(0.0..=0.2).contains(&self.illumination_jitter) {
            return Err(MavrError::Config(format!("illumination jitter {} outside [0,0.2]", self.illumination_jitter)));
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return Err(MavrError::Config("pixel noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Arm length for a scale class, proportional to frame width (8/6/4 px at 64).
pub fn radius_for(scale: ScaleTag, width: usize) -> f64 {
    let base = match scale {
        ScaleTag::Short => 8.0,
        ScaleTag::Medium => 6.0,
        ScaleTag::Long => 4.0,
    };
    base * width as f64 / 64.0
}

/// Distance from the centre to the outermost silhouette point.
pub fn silhouette_extent(radius: f64) -> f64 {
    radius * (1.0 + DISK_FRACTION)
}

fn disk_centres(cx: f64, cy: f64, r: f64) -> [(f64, f64); 5] {
    [(cx, cy), (cx + r, cy), (cx - r, cy), (cx, cy + r), (cx, cy - r)]
}

fn inside_cross(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let rr = (DISK_FRACTION * r).powi(2);
    disk_centres(cx, cy, r)
        .iter()
        .any(|&(dx, dy)| (x - dx).powi(2) + (y - dy).powi(2) <= rr)
}

/// Exact area of the five-disk union. Arm disks can overlap only the centre
/// disk.
pub fn cross_area(radius: f64) -> f64 {
    let r = DISK_FRACTION * radius;
    let d = radius;
    let lens = if d >= 2.0 * r {
        0.0
    } else {
        2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt()
    };
    5.0 * std::f64::consts::PI * r * r - 4.0 * lens
}

/// Smooth value noise: random lattice values blended with a cubic fade.
#[derive(Debug, Clone)]
pub struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
    /// Lattice origin offset so negative coordinates stay in range.
    pad: f64,
}

impl ValueNoise {
    pub fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: f64, pad: f64) -> Self {
        let cols = ((width as f64 + 2.0 * pad) / cell).ceil() as usize + 2;
        let rows = ((height as f64 + 2.0 * pad) / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        Self { cell, cols, lattice, pad }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let gx = (x + self.pad) / self.cell;
        let gy = (y + self.pad) / self.cell;
        let (ix, iy) = (gx.floor().max(0.0) as usize, gy.floor().max(0.0) as usize);
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (fade(gx - ix as f64), fade(gy - iy as f64));
        let v = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - fx) + v(iy, ix + 1) * fx;
        let bottom = v(iy + 1, ix) * (1.0 - fx) + v(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Two-octave texture with luminance in roughly [0.1, 0.5].
#[derive(Debug, Clone)]
pub struct Texture {
    coarse: ValueNoise,
    fine: ValueNoise,
}

impl Texture {
    pub fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, pad: f64) -> Self {
        Self {
            coarse: ValueNoise::new(rng, height, width, 8.0, pad),
            fine: ValueNoise::new(rng, height, width, 4.0, pad),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        0.1 + 0.4 * (0.6 * self.coarse.eval(x, y) + 0.4 * self.fine.eval(x, y))
    }
}

#[derive(Debug, Clone)]
struct Distractor {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    level: f64,
}

fn background_image(cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<Distractor>) {
    let [h, w] = cfg.frame_size;
    let mut img = vec![[0.25; 3]; h * w];
    let mut distractors = Vec::new();
    if cfg.background == Background::Flat {
        return (img, distractors);
    }
    let tex = Texture::new(rng, h, w, 0.0);
    let tint = [1.0, 0.95, 0.9];
    for y in 0..h {
        for x in 0..w {
            let v = tex.eval(x as f64, y as f64);
            img[y * w + x] = tint.map(|t| v * t);
        }
    }
    if cfg.background == Background::Clutter {
        for _ in 0..6 {
            let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let (sx, sy) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0));
            let color = [rng.gen_range(0.1..0.7), rng.gen_range(0.1..0.7), rng.gen_range(0.1..0.7)];
            let round = rng.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = ((x as f64 - cx) / sx, (y as f64 - cy) / sy);
                    let hit = if round { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                    if hit {
                        img[y * w + x] = color;
                    }
                }
            }
        }
        for _ in 0..2 {
            distractors.push(Distractor {
                x: rng.gen_range(0.0..w as f64),
                y: rng.gen_range(0.0..h as f64),
                vx: rng.gen_range(-1.5..1.5),
                vy: rng.gen_range(-1.5..1.5),
                radius: rng.gen_range(1.5..3.0),
                level: rng.gen_range(0.6..0.9),
            });
        }
    }
    (img, distractors)
}

/// Fraction of `SUPERSAMPLE²` sub-pixel samples of pixel `(x, y)` inside the cross.
fn coverage(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> f64 {
    let n = SUPERSAMPLE;
    let mut hits = 0;
    for sy in 0..n {
        for sx in 0..n {
            let px = x as f64 - 0.5 + (sx as f64 + 0.5) / n as f64;
            let py = y as f64 - 0.5 + (sy as f64 + 0.5) / n as f64;
            if inside_cross(px, py, cx, cy, r) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

/// Renders the trajectory and returns frames `[T,H,W,3]` and ground-truth
/// silhouettes `[1,T,H,W]` (pixels at least half covered).
pub fn render_clip(spec: &TrajectorySpec, cfg: &RenderConfig) -> Result<(FrameSequence, Tensor<f32>)> {
    cfg.validate()?;
    let [h, w] = cfg.frame_size;
    spec.validate(h, w, PATH_MARGIN_PX)?;
    let r = cfg.object_radius_px;
    let extent = silhouette_extent(r);
    let points = spec.points();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (bg, mut distractors) = background_image(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let t_len = points.len();
    let mut frames = vec![0f32; t_len * h * w * 3];
    let mut truth = vec![0f32; t_len * h * w];
    for (t, &(cx, cy)) in points.iter().enumerate() {
        let gain = 1.0 + if cfg.illumination_jitter > 0.0 { rng.gen_range(-cfg.illumination_jitter..=cfg.illumination_jitter) } else { 0.0 };
        let mut img = bg.clone();
        for d in &distractors {
            for y in 0..h {
                for x in 0..w {
                    if (x as f64 - d.x).powi(2) + (y as f64 - d.y).powi(2) <= d.radius * d.radius {
                        img[y * w + x] = [d.level; 3];
                    }
                }
            }
        }
        let (x0, x1) = ((cx - extent - 1.0).floor().max(0.0) as usize, ((cx + extent + 1.0).ceil() as usize).min(w - 1));
        let (y0, y1) = ((cy - extent - 1.0).floor().max(0.0) as usize, ((cy + extent + 1.0).ceil() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = coverage(x, y, cx, cy, r);
                if a > 0.0 {
                    let p = &mut img[y * w + x];
                    for c in 0..3 {
                        p[c] = (1.0 - a) * p[c] + a * OBJECT_RGB[c];
                    }
                }
                if a >= 0.5 {
                    truth[(t * h + y) * w + x] = 1.0;
                }
            }
        }
        let frame = &mut frames[t * h * w * 3..(t + 1) * h * w * 3];
        for (dst, p) in frame.chunks_exact_mut(3).zip(&img) {
            for c in 0..3 {
                let n = if cfg.pixel_noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                dst[c] = (gain * p[c] + n).clamp(0.0, 1.0) as f32;
            }
        }
        for d in &mut distractors {
            d.x += d.vx;
            d.y += d.vy;
        }
    }
    let seq = FrameSequence::new(Tensor::new(vec![t_len, h, w, 3], frames)?)?;
    Ok((seq, Tensor::new(vec![1, t_len, h, w], truth)?))
}
