//! WebAssembly bindings for the static demo page in `www/`.

use mavr_core::numerics::Tensor;
use mavr_core::synth::render::radius_for;
use mavr_core::synth::{render_clip, sample_spec, ActionKind, Background, RenderConfig};
use mavr_core::views::{dense_flow, motion_mask, FlowConfig, FrameSequence, MaskConfig, ScaleTag};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 64;
pub const FRAMES: usize = 16;

/// A rendered clip plus whichever views have been extracted so far.
#[wasm_bindgen]
pub struct Scene {
    seq: FrameSequence,
    truth: Tensor<f32>,
    flow: Option<Tensor<f32>>,
    mask: Option<Tensor<f32>>,
}

impl Scene {
    pub fn render(class: usize, scale: usize, seed: u64, noisy: bool) -> Result<Scene, String> {
        let kind = ActionKind::from_label(class).ok_or_else(|| format!("unknown class {class}"))?;
        let tag = *ScaleTag::ALL.get(scale).ok_or_else(|| format!("unknown scale {scale}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radius = radius_for(tag, SIZE);
        let spec = sample_spec(kind, radius, SIZE, FRAMES, &mut rng);
        let cfg = RenderConfig {
            frame_size: [SIZE, SIZE],
            object_radius_px: radius,
            background: if noisy { Background::Clutter } else { Background::TexturedNoise },
            illumination_jitter: if noisy { 0.1 } else { 0.05 },
            pixel_noise_sigma: if noisy { 0.06 } else { 0.02 },
            seed: rng.next_u64(),
        };
        let (seq, truth) = render_clip(&spec, &cfg).map_err(|e| e.to_string())?;
        Ok(Scene {
            seq,
            truth,
            flow: None,
            mask: None,
        })
    }

    pub fn extract_flow(&mut self) -> Result<(), String> {
        self.flow = Some(dense_flow(&self.seq, &FlowConfig::default()).map_err(|e| e.to_string())?);
        Ok(())
    }

    /// Segments with `threshold` and returns the mean IoU against the
    /// rendered silhouettes.
    pub fn extract_mask(&mut self, threshold: f64) -> Result<f64, String> {
        let cfg = MaskConfig {
            threshold,
            ..MaskConfig::default()
        };
        let mask = motion_mask(&self.seq, &cfg).map_err(|e| e.to_string())?;
        let plane = SIZE * SIZE;
        let mut total = 0.0;
        for t in 0..FRAMES {
            let a = &mask.data()[t * plane..][..plane];
            let b = &self.truth.data()[t * plane..][..plane];
            let inter = a.iter().zip(b).filter(|(x, y)| **x > 0.5 && **y > 0.5).count();
            let union = a.iter().zip(b).filter(|(x, y)| **x > 0.5 || **y > 0.5).count();
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        self.mask = Some(mask);
        Ok(total / FRAMES as f64)
    }

    pub fn flow(&self) -> Option<&Tensor<f32>> {
        self.flow.as_ref()
    }

    pub fn mask(&self) -> Option<&Tensor<f32>> {
        self.mask.as_ref()
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Hue from direction, value from magnitude relative to `max`.
fn flow_color(u: f32, v: f32, max: f32) -> [u8; 3] {
    let mag = (u * u + v * v).sqrt() / max.max(1e-6);
    let hue = (v.atan2(u) / std::f32::consts::TAU).rem_euclid(1.0) * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let m = mag.min(1.0);
    [to_byte(r * m), to_byte(g * m), to_byte(b * m)]
}

#[wasm_bindgen]
impl Scene {
    /// Renders a clip; `class` indexes vShape, inv_vShape, left_right,
    /// up_down and `scale` indexes short, medium, long.
    #[wasm_bindgen(constructor)]
    pub fn new(class: usize, scale: usize, seed: u32, noisy: bool) -> Result<Scene, JsValue> {
        Scene::render(class, scale, seed as u64, noisy).map_err(|e| JsValue::from_str(&e))
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    pub fn frames(&self) -> usize {
        FRAMES
    }

    #[wasm_bindgen(js_name = computeFlow)]
    pub fn compute_flow(&mut self) -> Result<(), JsValue> {
        self.extract_flow().map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = computeMask)]
    pub fn compute_mask(&mut self, threshold: f64) -> Result<f64, JsValue> {
        self.extract_mask(threshold).map_err(|e| JsValue::from_str(&e))
    }

    /// RGBA bytes of frame `t`.
    #[wasm_bindgen(js_name = rgbFrame)]
    pub fn rgb_frame(&self, t: usize) -> Vec<u8> {
        let plane = SIZE * SIZE * 3;
        let px = &self.seq.frames.data()[t * plane..][..plane];
        px.chunks(3).flat_map(|c| [to_byte(c[0]), to_byte(c[1]), to_byte(c[2]), 255]).collect()
    }

    /// RGBA colour-wheel rendering of the flow into frame `t`; empty before
    /// `computeFlow`.
    #[wasm_bindgen(js_name = flowFrame)]
    pub fn flow_frame(&self, t: usize) -> Vec<u8> {
        let Some(flow) = &self.flow else { return Vec::new() };
        let plane = SIZE * SIZE;
        let d = flow.data();
        let max = (0..FRAMES * plane)
            .map(|i| (d[i] * d[i] + d[FRAMES * plane + i].powi(2)).sqrt())
            .fold(0.0f32, f32::max);
        (0..plane)
            .flat_map(|i| {
                let [r, g, b] = flow_color(d[t * plane + i], d[(FRAMES + t) * plane + i], max);
                [r, g, b, 255]
            })
            .collect()
    }

    /// Mean (u, v) over the frame, in pixels per frame.
    #[wasm_bindgen(js_name = meanFlow)]
    pub fn mean_flow(&self, t: usize) -> Vec<f32> {
        let Some(flow) = &self.flow else { return Vec::new() };
        let plane = SIZE * SIZE;
        let mean = |c: usize| flow.data()[(c * FRAMES + t) * plane..][..plane].iter().sum::<f32>() / plane as f32;
        vec![mean(0), mean(1)]
    }

    /// RGBA overlay: white where the mask and silhouette agree, red for
    /// false positives, blue for misses. Empty before `computeMask`.
    #[wasm_bindgen(js_name = maskFrame)]
    pub fn mask_frame(&self, t: usize) -> Vec<u8> {
        let Some(mask) = &self.mask else { return Vec::new() };
        let plane = SIZE * SIZE;
        let m = &mask.data()[t * plane..][..plane];
        let g = &self.truth.data()[t * plane..][..plane];
        m.iter()
            .zip(g)
            .flat_map(|(&a, &b)| match (a > 0.5, b > 0.5) {
                (true, true) => [255, 255, 255, 255],
                (true, false) => [230, 60, 60, 255],
                (false, true) => [60, 90, 230, 255],
                (false, false) => [0, 0, 0, 255],
            })
            .collect()
    }
}
