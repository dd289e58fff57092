//! Dense optical flow by polynomial expansion (Farneback), coarse to fine.
//!
//! Follows the structure of the widely used OpenCV implementation: a
//! Gaussian-weighted quadratic fit per pixel, displacement estimates from
//! the change of the linear coefficient, box-filtered normal equations, and a
//! pyramid whose coarsest level is at least [`MIN_LEVEL_SIZE`] pixels.
//! Everything runs in f64. Samples of the second expansion are taken with
//! clamped bilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};

/// Smallest pyramid level extent; smaller frames are rejected.
pub const MIN_LEVEL_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub levels: usize,
    pub pyr_scale: f64,
    pub window: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            pyr_scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyr_scale > 0.0 && self.pyr_scale < 1.0) {
            return Err(MavrError::Config(format!("pyramid scale {} outside (0,1)", self.pyr_scale)));
        }
        if self.window == 0 || self.poly_n == 0 || self.iterations == 0 {
            return Err(MavrError::Config("flow window, poly_n and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Normalised 1D Gaussian of odd length `size`; sigma ≤ 0 picks the
/// conventional size-derived default.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let sigma = if sigma > 0.0 { sigma } else { 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8 };
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Reflect-101 index into `0..n`.
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn gaussian_blur(img: &Plane, size: usize, sigma: f64) -> Plane {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            let mut s = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                s += kv * img.at(y, reflect101(x as isize + j as isize - r, img.w));
            }
            tmp[y * img.w + x] = s;
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            let mut s = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                s += kv * tmp[reflect101(y as isize + j as isize - r, img.h) * img.w + x];
            }
            out[y * img.w + x] = s;
        }
    }
    Plane::new(img.h, img.w, out)
}

/// Bilinear sample with clamped coordinates.
fn sample(data: &[f64], h: usize, w: usize, stride: usize, ch: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| data[(yy * w + xx) * stride + ch];
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// Bilinear resize of interleaved `channels`-plane data, half-pixel centres.
fn resize(data: &[f64], h: usize, w: usize, channels: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = vec![0.0; nh * nw * channels];
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            for c in 0..channels {
                out[(y * nw + x) * channels + c] = sample(data, h, w, channels, c, fy, fx);
            }
        }
    }
    out
}

/// Per-pixel quadratic fit `I ≈ xᵀAx + bᵀx + c` over a Gaussian-weighted
/// `(2n+1)²` neighbourhood. Output channels per pixel: b_y, b_x, A_yy, A_xx, A_xy.
fn poly_expansion(img: &Plane, n: usize, sigma: f64) -> Vec<f64> {
    let sigma = if sigma < f64::EPSILON { n as f64 * 0.3 } else { sigma };
    let len = 2 * n + 1;
    let mut g: Vec<f64> = (0..len)
        .map(|i| {
            let x = i as f64 - n as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let xs = |i: usize| i as f64 - n as f64;
    let xg: Vec<f64> = (0..len).map(|i| xs(i) * g[i]).collect();
    let xxg: Vec<f64> = (0..len).map(|i| xs(i) * xs(i) * g[i]).collect();

    // moments of the separable weight; only the inverse entries that the
    // solution uses are needed
    let (mut g00, mut g11, mut g33, mut g55) = (0.0, 0.0, 0.0, 0.0);
    for (iy, &gy) in g.iter().enumerate() {
        for (ix, &gx) in g.iter().enumerate() {
            let (x, y) = (xs(ix), xs(iy));
            let w = gy * gx;
            g00 += w;
            g11 += w * x * x;
            g33 += w * x.powi(4);
            g55 += w * x * x * y * y;
        }
    }
    // the 3x3 block over (1, x², y²) is [[g00, g11, g11], [g11, g33, g55], [g11, g55, g33]]
    let ig11 = 1.0 / g11;
    let ig55 = 1.0 / g55;
    let det = g00 * (g33 + g55) - 2.0 * g11 * g11;
    let ig03 = -g11 / det;
    let ig33 = (g00 * g33 - g11 * g11) / ((g33 - g55) * det);
    let ig33_cross = (g11 * g11 - g00 * g55) / ((g33 - g55) * det);

    let (h, w) = (img.h, img.w);
    let mut out = vec![0.0; h * w * 5];
    let mut row = vec![[0.0f64; 3]; w];
    for y in 0..h {
        // vertical pass: weights g, x·g, x²·g along y
        for (x, r) in row.iter_mut().enumerate() {
            let mut acc = [img.at(y, x) * g[n], 0.0, 0.0];
            for k in 1..=n {
                let up = img.at(y.saturating_sub(k), x);
                let down = img.at((y + k).min(h - 1), x);
                acc[0] += g[n + k] * (up + down);
                acc[1] += xg[n + k] * (down - up);
                acc[2] += xxg[n + k] * (up + down);
            }
            *r = acc;
        }
        for x in 0..w {
            let at = |dx: isize| row[(x as isize + dx).clamp(0, w as isize - 1) as usize];
            let c = at(0);
            let (mut b1, mut b2, mut b3, mut b4, mut b5, mut b6) = (c[0] * g[n], 0.0, c[1] * g[n], 0.0, c[2] * g[n], 0.0);
            for k in 1..=n {
                let (r, l) = (at(k as isize), at(-(k as isize)));
                b1 += (r[0] + l[0]) * g[n + k];
                b4 += (r[0] + l[0]) * xxg[n + k];
                b2 += (r[0] - l[0]) * xg[n + k];
                b3 += (r[1] + l[1]) * g[n + k];
                b6 += (r[1] - l[1]) * xg[n + k];
                b5 += (r[2] + l[2]) * g[n + k];
            }
            let o = &mut out[(y * w + x) * 5..][..5];
            o[0] = b3 * ig11;
            o[1] = b2 * ig11;
            o[2] = b1 * ig03 + b5 * ig33 + b4 * ig33_cross;
            o[3] = b1 * ig03 + b4 * ig33 + b5 * ig33_cross;
            o[4] = b6 * ig55;
        }
    }
    out
}

const BORDER: [f64; 5] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

/// Per-pixel normal-equation terms `[G_yy, G_xy, G_xx, h_y, h_x]` for the
/// current flow estimate.
fn update_matrices(r0: &[f64], r1: &[f64], flow: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w * 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow[2 * i], flow[2 * i + 1]);
            let (fy, fx) = (y as f64 + dy, x as f64 + dx);
            let s = |c: usize| sample(r1, h, w, 5, c, fy, fx);
            let p = &r0[i * 5..i * 5 + 5];
            let ayy = (p[2] + s(2)) * 0.5;
            let axx = (p[3] + s(3)) * 0.5;
            let axy = (p[4] + s(4)) * 0.25;
            let mut by = (p[0] - s(0)) * 0.5 + ayy * dy + axy * dx;
            let mut bx = (p[1] - s(1)) * 0.5 + axy * dy + axx * dx;
            let mut a = [ayy, axx, axy];
            let edge = |v: usize, n: usize| {
                if v < BORDER.len() {
                    BORDER[v]
                } else if v + BORDER.len() >= n {
                    BORDER[n - 1 - v]
                } else {
                    1.0
                }
            };
            let scale = edge(x, w) * edge(y, h);
            if scale != 1.0 {
                by *= scale;
                bx *= scale;
                a.iter_mut().for_each(|v| *v *= scale);
            }
            let [ayy, axx, axy] = a;
            let o = &mut m[i * 5..i * 5 + 5];
            o[0] = ayy * ayy + axy * axy;
            o[1] = (ayy + axx) * axy;
            o[2] = axx * axx + axy * axy;
            o[3] = ayy * by + axy * bx;
            o[4] = axy * by + axx * bx;
        }
    }
    m
}

/// Box filter of side `size` with replicated borders, per channel.
fn box_filter(data: &[f64], h: usize, w: usize, channels: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut s = 0.0;
                for d in -r..=r {
                    s += data[(y * w + clamp(x as isize + d, w)) * channels + c];
                }
                tmp[(y * w + x) * channels + c] = s;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut s = 0.0;
                for d in -r..=r {
                    s += tmp[(clamp(y as isize + d, h) * w + x) * channels + c];
                }
                out[(y * w + x) * channels + c] = s * norm;
            }
        }
    }
    out
}

fn solve_flow(m: &[f64], flow: &mut [f64]) {
    for (f, g) in flow.chunks_exact_mut(2).zip(m.chunks_exact(5)) {
        let (g11, g12, g22, h1, h2) = (g[0], g[1], g[2], g[3], g[4]);
        let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
        f[0] = (g11 * h2 - g12 * h1) * idet;
        f[1] = (g22 * h1 - g12 * h2) * idet;
    }
}

fn round_half_even(v: f64) -> i64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && (r as i64) % 2 != 0 {
        (r - v.signum()) as i64
    } else {
        r as i64
    }
}

/// Displacement field from `prev` to `next` (intensities in [0,1]) as
/// interleaved `(u, v)` pairs.
pub fn farneback(prev: &Plane, next: &Plane, cfg: &FlowConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if prev.h != next.h || prev.w != next.w {
        return Err(MavrError::shape("dense_flow", "H,W", "frames differ in size"));
    }
    let (h, w) = (prev.h, prev.w);
    if h < MIN_LEVEL_SIZE || w < MIN_LEVEL_SIZE {
        return Err(MavrError::Config(format!(
            "frame {h}x{w} is below the smallest pyramid level {MIN_LEVEL_SIZE}"
        )));
    }
    let mut levels = 0;
    let mut scale = 1.0;
    while levels < cfg.levels {
        scale *= cfg.pyr_scale;
        if (w as f64) * scale < MIN_LEVEL_SIZE as f64 || (h as f64) * scale < MIN_LEVEL_SIZE as f64 {
            break;
        }
        levels += 1;
    }
    // the solver's regularizer is tuned for 8-bit intensities
    let to_8bit = |p: &Plane| Plane::new(h, w, p.data.iter().map(|v| v * 255.0).collect());
    let (prev, next) = (&to_8bit(prev), &to_8bit(next));
    let mut flow: Vec<f64> = Vec::new();
    let (mut fh, mut fw) = (0, 0);
    for k in (0..=levels).rev() {
        let scale = cfg.pyr_scale.powi(k as i32);
        let sigma = (1.0 / scale - 1.0) * 0.5;
        let size = ((round_half_even(sigma * 5.0) | 1) as usize).max(3);
        let lw = ((w as f64 * scale).round() as usize).max(1);
        let lh = ((h as f64 * scale).round() as usize).max(1);
        flow = if flow.is_empty() {
            vec![0.0; lh * lw * 2]
        } else {
            let mut up = resize(&flow, fh, fw, 2, lh, lw);
            up.iter_mut().for_each(|v| *v /= cfg.pyr_scale);
            up
        };
        (fh, fw) = (lh, lw);
        let expand = |img: &Plane| {
            let blurred = gaussian_blur(img, size, sigma);
            let small = Plane::new(lh, lw, resize(&blurred.data, h, w, 1, lh, lw));
            poly_expansion(&small, cfg.poly_n, cfg.poly_sigma)
        };
        let (r0, r1) = (expand(prev), expand(next));
        for _ in 0..cfg.iterations {
            let m = update_matrices(&r0, &r1, &flow, lh, lw);
            let m = box_filter(&m, lh, lw, 5, cfg.window);
            solve_flow(&m, &mut flow);
        }
    }
    Ok(flow)
}
