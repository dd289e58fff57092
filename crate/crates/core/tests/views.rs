use mavr_core::numerics::Tensor;
use mavr_core::synth::render::Texture;
use mavr_core::synth::{plan_dataset, render_clip, Background, DatasetConfig};
use mavr_core::views::{self, FlowConfig, FrameSequence, MaskConfig, ScaleTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const N: usize = 64;

pub fn iou(a: &[f32], b: &[f32]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x > 0.5 && **y > 0.5).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x > 0.5 || **y > 0.5).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Gray frames built from `f(t, x, y)`.
pub fn sequence(t_len: usize, f: impl Fn(usize, f64, f64) -> f64) -> FrameSequence {
    let mut data = Vec::with_capacity(t_len * N * N * 3);
    for t in 0..t_len {
        for y in 0..N {
            for x in 0..N {
                let v = f(t, x as f64, y as f64).clamp(0.0, 1.0) as f32;
                data.extend([v; 3]);
            }
        }
    }
    FrameSequence::new(Tensor::new(vec![t_len, N, N, 3], data).unwrap()).unwrap()
}

pub fn texture(seed: u64) -> Texture {
    Texture::new(&mut ChaCha8Rng::seed_from_u64(seed), N, N, 16.0)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Interior pixels of flow frame `t`, as (u, v).
pub fn interior(flow: &Tensor<f32>, t: usize, border: usize) -> Vec<(f64, f64)> {
    let t_len = flow.shape()[1];
    let d = flow.data();
    let mut out = Vec::new();
    for y in border..N - border {
        for x in border..N - border {
            let i = y * N + x;
            out.push((d[t * N * N + i] as f64, d[(t_len + t) * N * N + i] as f64));
        }
    }
    out
}

#[test]
fn translating_texture_gives_two_pixel_flow() {
    for seed in 0..3 {
        let tex = texture(seed);
        let seq = sequence(3, |t, x, y| tex.eval(x - 2.0 * t as f64, y));
        let flow = views::dense_flow(&seq, &FlowConfig::default()).unwrap();
        for t in 1..3 {
            let err: Vec<f64> = interior(&flow, t, 8).iter().map(|&(u, v)| ((u - 2.0).powi(2) + v * v).sqrt()).collect();
            let m = median(err);
            assert!(m <= 0.25, "seed {seed} frame {t}: median error {m}");
        }
        assert!(flow.data()[..N * N].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn static_scene_has_no_flow_and_no_mask() {
    let tex = texture(7);
    let seq = sequence(16, |_, x, y| tex.eval(x, y));
    let flow = views::dense_flow(&seq, &FlowConfig::default()).unwrap();
    assert!(flow.data().iter().all(|v| v.abs() <= 1e-3));
    let mask = views::motion_mask(&seq, &MaskConfig::default()).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mirrored_input_mirrors_horizontal_flow() {
    let tex = texture(3);
    let f = |t: usize, x: f64, y: f64| tex.eval(x - 1.5 * t as f64, y + 0.5 * t as f64);
    let seq = sequence(2, f);
    let mirrored = sequence(2, |t, x, y| f(t, (N - 1) as f64 - x, y));
    let cfg = FlowConfig::default();
    let a = views::dense_flow(&seq, &cfg).unwrap();
    let b = views::dense_flow(&mirrored, &cfg).unwrap();
    let mut worst = 0f64;
    for y in 0..N {
        for x in 0..N {
            let i = N * N + y * N + x;
            let j = N * N + y * N + (N - 1 - x);
            worst = worst.max((a.data()[i] + b.data()[j]).abs() as f64);
            worst = worst.max((a.data()[3 * N * N + y * N + x] - b.data()[3 * N * N + y * N + (N - 1 - x)]).abs() as f64);
        }
    }
    assert!(worst <= 1e-3, "mirror mismatch {worst}");
}

#[test]
fn reversed_sequence_negates_flow() {
    let tex = texture(11);
    let seq = sequence(2, |t, x, y| tex.eval(x - 1.0 * t as f64, y - 1.0 * t as f64));
    let rev = sequence(2, |t, x, y| tex.eval(x - 1.0 * (1 - t) as f64, y - 1.0 * (1 - t) as f64));
    let cfg = FlowConfig::default();
    let fwd = interior(&views::dense_flow(&seq, &cfg).unwrap(), 1, 8);
    let bwd = interior(&views::dense_flow(&rev, &cfg).unwrap(), 1, 8);
    let mu = |v: &[(f64, f64)]| {
        let n = v.len() as f64;
        (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n)
    };
    let (f, b) = (mu(&fwd), mu(&bwd));
    for (p, q) in [(f.0, b.0), (f.1, b.1)] {
        assert!((p + q).abs() <= 0.1 * p.abs(), "forward {p} backward {q}");
    }
}

#[test]
fn tiny_frames_are_rejected() {
    let seq = FrameSequence::new(Tensor::zeros(&[2, 16, 16, 3])).unwrap();
    assert!(views::dense_flow(&seq, &FlowConfig::default()).is_err());
}

#[test]
fn moving_square_mask() {
    let seq = sequence(16, |t, x, y| {
        let x0 = 4.0 + 3.0 * t as f64;
        if x >= x0 && x < x0 + 8.0 && (20.0..28.0).contains(&y) { 0.9 } else { 0.1 }
    });
    let mask = views::motion_mask(&seq, &MaskConfig::default()).unwrap();
    for t in 0..16 {
        let x0 = 4 + 3 * t;
        let truth: Vec<f32> = (0..N * N)
            .map(|i| {
                let (y, x) = (i / N, i % N);
                (x >= x0 && x < x0 + 8 && (20..28).contains(&y)) as u8 as f32
            })
            .collect();
        let v = iou(&mask.data()[t * N * N..(t + 1) * N * N], &truth);
        assert!(v >= 0.7, "frame {t}: IoU {v}");
    }
}

#[test]
fn mask_is_polarity_invariant() {
    let tex = texture(5);
    let f = |t: usize, x: f64, y: f64| {
        let cx = 10.0 + 2.5 * t as f64;
        if (x - cx).powi(2) + (y - 30.0).powi(2) <= 25.0 { 0.9 } else { tex.eval(x, y) }
    };
    let a = views::motion_mask(&sequence(16, f), &MaskConfig::default()).unwrap();
    let b = views::motion_mask(&sequence(16, |t, x, y| 1.0 - f(t, x, y)), &MaskConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rendered_clips_segment_with_high_iou() {
    for bg in [Background::Flat, Background::TexturedNoise] {
        let cfg = DatasetConfig {
            n_per_class_per_scale: 3,
            background: bg,
            ..DatasetConfig::default()
        };
        let mut total = 0.0;
        let plan = plan_dataset(&cfg).unwrap();
        for m in &plan {
            let (seq, truth) = render_clip(&m.spec, &m.render).unwrap();
            let seq = FrameSequence::new(views::quantize(&seq.frames)).unwrap();
            let mask = views::motion_mask(&seq, &cfg.mask).unwrap();
            let v = iou(mask.data(), truth.data());
            assert!(v >= 0.7, "{bg:?} {}: IoU {v}", m.clip_id);
            total += v;
        }
        assert!(total / plan.len() as f64 >= 0.8);
    }
}

#[test]
fn cached_views_read_back_bit_identical() {
    let tex = texture(9);
    let seq = sequence(48, |t, x, y| tex.eval(x - 0.5 * t as f64, y));
    let dir = tempfile::tempdir().unwrap();
    let clip = views::assemble_clip(&seq, 2, ScaleTag::Medium, &FlowConfig::default(), &MaskConfig::default(), Some(dir.path())).unwrap();
    assert_eq!(clip.rgb.shape(), &[3, 16, N, N]);
    assert_eq!(clip.flow.shape(), &[2, 16, N, N]);
    assert_eq!(clip.mask.shape(), &[1, 16, N, N]);
    assert!(clip.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let back = views::load_views(dir.path(), 2, ScaleTag::Medium).unwrap();
    assert_eq!(back, clip);
    // 48 input frames are sampled with stride 3.
    let rgb = views::extract_rgb(&seq);
    assert_eq!(&clip.rgb.data()[N * N..2 * N * N], &rgb.data()[3 * N * N..4 * N * N]);
}

#[test]
fn png_round_trip_matches_quantization() {
    let tex = texture(2);
    let seq = sequence(3, |t, x, y| tex.eval(x + t as f64, y) * 1.3);
    let dir = tempfile::tempdir().unwrap();
    views::write_frames(dir.path(), &seq).unwrap();
    let back = views::read_frames(dir.path()).unwrap();
    assert_eq!(back.frames, views::quantize(&seq.frames));
}

