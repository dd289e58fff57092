//! Synthetic labelled corpus: random flight paths rendered at three apparent
//! scales, run through view extraction, and written to disk with a manifest.

pub mod render;
pub mod trajectory;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{render_clip, Background, RenderConfig};
pub use trajectory::{ActionKind, TrajectorySpec};

use crate::error::{MavrError, Result};
use crate::numerics::mvt;
use crate::views::{self, FlowConfig, MaskConfig, MultiViewClip, ScaleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Everything that determines a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_per_class_per_scale: usize,
    pub frame_size: usize,
    pub frames: usize,
    pub background: Background,
    pub illumination_jitter: f64,
    pub pixel_noise_sigma: f64,
    pub seed: u64,
    pub flow: FlowConfig,
    pub mask: MaskConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_per_class_per_scale: 50,
            frame_size: 64,
            frames: 16,
            background: Background::TexturedNoise,
            illumination_jitter: 0.05,
            pixel_noise_sigma: 0.02,
            seed: 0,
            flow: FlowConfig::default(),
            mask: MaskConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// The harder corpus used for ablations: clutter and heavier noise.
    pub fn noisy() -> Self {
        Self {
            background: Background::Clutter,
            illumination_jitter: 0.1,
            pixel_noise_sigma: 0.06,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class_per_scale < 3 {
            return Err(MavrError::Config(format!(
                "need at least 3 clips per class and scale, got {}",
                self.n_per_class_per_scale
            )));
        }
        if self.frames < views::CLIP_LEN {
            return Err(MavrError::Config(format!("clips need at least {} frames", views::CLIP_LEN)));
        }
        self.flow.validate()?;
        self.mask.validate()
    }

    /// Test clips per (class, scale) cell for a 2:1 split.
    pub fn test_per_cell(&self) -> usize {
        (self.n_per_class_per_scale as f64 / 3.0).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub clip_id: String,
    pub class: ActionKind,
    pub label: usize,
    pub scale_tag: ScaleTag,
    pub split: Split,
    pub seed: u64,
    pub spec: TrajectorySpec,
    pub render: RenderConfig,
}

impl ClipMeta {
    /// Directory relative to the dataset root.
    pub fn rel_dir(&self) -> PathBuf {
        Path::new(self.split.name()).join(self.class.name()).join(&self.clip_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub classes: Vec<String>,
    pub clips: Vec<ClipMeta>,
}

/// Minimum sweep amplitude in silhouette extents.
pub const SWEEP_EXTENT_RATIO: f64 = 4.2;

/// Random path of `kind` keeping the path point 4 px inside the frame.
///
/// A temporal-median background only recovers pixels the object covers in
/// fewer than half the frames, so back-and-forth sweeps get an amplitude of
/// at least [`SWEEP_EXTENT_RATIO`] silhouette extents where the frame allows.
pub fn sample_spec(kind: ActionKind, radius: f64, size: usize, frames: usize, rng: &mut ChaCha8Rng) -> TrajectorySpec {
    let lo = trajectory::PATH_MARGIN_PX;
    let hi = size as f64 - 1.0 - lo;
    let avail = hi - lo;
    let floor = (SWEEP_EXTENT_RATIO * render::silhouette_extent(radius) / avail).clamp(0.5, 0.9);
    let sweep_amp = rng.gen_range(floor..1.0) * avail;
    let amplitude = rng.gen_range(0.5..1.0) * avail;
    let sweep = rng.gen_range(0.5..1.0) * avail;
    let mut start_in = |span: f64| lo + rng.gen_range(0.0..1.0) * (avail - span);
    let last = (frames - 1) as f64;
    match kind {
        ActionKind::LeftRight => {
            let x = start_in(sweep_amp);
            let y = start_in(0.0);
            TrajectorySpec {
                kind,
                amplitude_px: sweep_amp,
                speed_px_per_frame: 2.0 * sweep_amp / frames as f64,
                start: (x, y),
                duration_frames: frames,
            }
        }
        ActionKind::UpDown => {
            let x = start_in(0.0);
            let y = start_in(sweep_amp);
            TrajectorySpec {
                kind,
                amplitude_px: sweep_amp,
                speed_px_per_frame: 2.0 * sweep_amp / frames as f64,
                start: (x, y),
                duration_frames: frames,
            }
        }
        ActionKind::VShape | ActionKind::InvVShape => {
            let x = start_in(sweep);
            let y = start_in(amplitude);
            let y = if kind == ActionKind::InvVShape { y + amplitude } else { y };
            TrajectorySpec {
                kind,
                amplitude_px: amplitude,
                speed_px_per_frame: sweep / last,
                start: (x, y),
                duration_frames: frames,
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| MavrError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text + "\n").map_err(|e| MavrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| MavrError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MavrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| MavrError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-clip metadata for the whole corpus, without rendering anything.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<ClipMeta>> {
    cfg.validate()?;
    let n = cfg.n_per_class_per_scale;
    let n_test = cfg.test_per_cell();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(u64::MAX);
    let mut clips = Vec::new();
    let mut cell = 0u64;
    for kind in ActionKind::ALL {
        for scale in ScaleTag::ALL {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut split_rng);
            let test: Vec<bool> = {
                let mut t = vec![false; n];
                for &i in &order[..n_test] {
                    t[i] = true;
                }
                t
            };
            for i in 0..n {
                let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed);
                stream.set_stream(cell * n as u64 + i as u64);
                let seed = stream.next_u64();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let radius = render::radius_for(scale, cfg.frame_size);
                let spec = sample_spec(kind, radius, cfg.frame_size, cfg.frames, &mut rng);
                let render = RenderConfig {
                    frame_size: [cfg.frame_size, cfg.frame_size],
                    object_radius_px: radius,
                    background: cfg.background,
                    illumination_jitter: cfg.illumination_jitter,
                    pixel_noise_sigma: cfg.pixel_noise_sigma,
                    seed: rng.next_u64(),
                };
                clips.push(ClipMeta {
                    clip_id: format!("{}_{}_{i:03}", kind.name(), scale.name()),
                    class: kind,
                    label: kind.label(),
                    scale_tag: scale,
                    split: if test[i] { Split::Test } else { Split::Train },
                    seed,
                    spec,
                    render,
                });
            }
            cell += 1;
        }
    }
    Ok(clips)
}

/// Renders one clip and writes its frames, views, ground truth and metadata.
pub fn generate_clip(root: &Path, meta: &ClipMeta, cfg: &DatasetConfig) -> Result<MultiViewClip> {
    let dir = root.join(meta.rel_dir());
    fs::create_dir_all(&dir).map_err(|e| MavrError::io(&dir, e))?;
    let (seq, truth) = render_clip(&meta.spec, &meta.render)?;
    // views are computed from the 8-bit frames so they can be rebuilt from the PNGs
    let seq = views::FrameSequence::new(views::quantize(&seq.frames))?;
    views::write_frames(&dir, &seq)?;
    let clip = views::assemble_clip(&seq, meta.label, meta.scale_tag, &cfg.flow, &cfg.mask, Some(&dir))?;
    let idx = views::sample_indices(seq.len())?;
    mvt::write(&dir.join("truth_mask.mvt"), &views::select_frames(&truth, &idx))?;
    write_json(&dir.join("meta.json"), meta)?;
    Ok(clip)
}

/// Generates the corpus under `root` using up to `threads` workers. Output is
/// identical for any thread count.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig, threads: usize) -> Result<Manifest> {
    let clips = plan_dataset(cfg)?;
    fs::create_dir_all(root).map_err(|e| MavrError::io(root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| MavrError::Config(format!("thread pool: {e}")))?;
    pool.install(|| clips.par_iter().try_for_each(|m| generate_clip(root, m, cfg).map(|_| ())))?;
    let manifest = Manifest {
        config: cfg.clone(),
        classes: ActionKind::names().iter().map(|s| s.to_string()).collect(),
        clips,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn split(&self, split: Split) -> Vec<&ClipMeta> {
        self.manifest.clips.iter().filter(|c| c.split == split).collect()
    }

    pub fn load(&self, meta: &ClipMeta) -> Result<MultiViewClip> {
        views::load_views(&self.root.join(meta.rel_dir()), meta.label, meta.scale_tag)
    }

    pub fn truth_mask(&self, meta: &ClipMeta) -> Result<crate::numerics::Tensor<f32>> {
        mvt::read(&self.root.join(meta.rel_dir()).join("truth_mask.mvt"))
    }
}
