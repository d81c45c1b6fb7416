//! Deterministic synthetic saliency dataset.
//!
//! Each video shows a bright blob drifting across a flat background, bouncing
//! off the borders, plus a static dimmer distractor blob of another colour.
//! The density map is the moving blob's Gaussian kernel and fixations are
//! sampled from that density, so the moving object is the only thing worth
//! predicting. Everything is derived from the seed: video `v` draws its
//! scene from ChaCha8 stream `2v` and its fixations from stream `2v + 1`.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_file_name, Split, Standardization, FIXATIONS_DIR, FRAMES_DIR, MAPS_DIR};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Training videos.
    pub videos: usize,
    /// Validation videos, numbered after the training ones.
    pub val_videos: usize,
    pub frames: usize,
    /// Square frame side in pixels.
    pub resolution: usize,
    pub seed: u64,
    pub fixations_per_frame: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { videos: 2, val_videos: 1, frames: 20, resolution: 64, seed: 7, fixations_per_frame: 12 }
    }
}

impl SynthSpec {
    /// Blob standard deviation in pixels.
    pub fn sigma(&self) -> f64 {
        self.resolution as f64 / 10.0
    }

    /// Blob displacement per frame in pixels.
    pub fn speed(&self) -> f64 {
        self.resolution as f64 * 0.04
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.videos == 0 {
            problems.push("synth: videos must be >= 1".to_string());
        }
        if self.frames == 0 {
            problems.push("synth: frames must be >= 1".to_string());
        }
        if self.resolution < 8 {
            problems.push("synth: resolution must be >= 8".to_string());
        }
        if self.fixations_per_frame == 0 {
            problems.push("synth: fixations_per_frame must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }
}

/// Contents of the `meta.toml` written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub generator: String,
    pub spec: SynthSpec,
    pub blob_sigma: f64,
    pub blob_speed: f64,
    /// Statistics of the training frames.
    pub standardization: Standardization,
}

impl SynthMeta {
    /// Reads `<root>/meta.toml` if present.
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let path = root.join(META_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map(Some).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Scene parameters of one synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    /// Moving-blob centre `(y, x)` per frame, in pixel coordinates where
    /// pixel `(r, c)` has its centre at `(r + 0.5, c + 0.5)`.
    pub centers: Vec<(f64, f64)>,
    pub distractor: (f64, f64),
    pub background: f32,
}

const BLOB_COLOR: [f32; 3] = [0.95, 0.75, 0.2];
const DISTRACTOR_COLOR: [f32; 3] = [0.2, 0.4, 0.95];
const DISTRACTOR_GAIN: f32 = 0.6;

impl VideoPlan {
    /// Plan of video number `video` (0-based over train then val videos).
    pub fn new(spec: &SynthSpec, video: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2 * video as u64);
        let res = spec.resolution as f64;
        let margin = 1.5 * spec.sigma();
        let (lo, hi) = (margin, res - margin);
        let mut y = rng.random_range(lo..hi);
        let mut x = rng.random_range(lo..hi);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (mut vy, mut vx) = (spec.speed() * angle.sin(), spec.speed() * angle.cos());
        let mut centers = Vec::with_capacity(spec.frames);
        for _ in 0..spec.frames {
            centers.push((y, x));
            (y, vy) = bounce(y + vy, vy, lo, hi);
            (x, vx) = bounce(x + vx, vx, lo, hi);
        }
        let distractor = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let background = rng.random_range(0.1..0.3);
        Self { centers, distractor, background }
    }
}

fn bounce(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if p < lo {
        (2.0 * lo - p, -v)
    } else if p > hi {
        (2.0 * hi - p, -v)
    } else {
        (p, v)
    }
}

fn kernel(r: usize, c: usize, center: (f64, f64), sigma: f64) -> f64 {
    let dy = r as f64 + 0.5 - center.0;
    let dx = c as f64 + 0.5 - center.1;
    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
}

fn render_frame(spec: &SynthSpec, plan: &VideoPlan, k: usize) -> RgbImage {
    let n = spec.resolution as u32;
    RgbImage::from_fn(n, n, |c, r| {
        let m = kernel(r as usize, c as usize, plan.centers[k], spec.sigma()) as f32;
        let d = DISTRACTOR_GAIN * kernel(r as usize, c as usize, plan.distractor, spec.sigma()) as f32;
        let px = |ch: usize| {
            let v = plan.background + m * BLOB_COLOR[ch] + d * DISTRACTOR_COLOR[ch];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn render_density(spec: &SynthSpec, plan: &VideoPlan, k: usize) -> GrayImage {
    let n = spec.resolution as u32;
    GrayImage::from_fn(n, n, |c, r| {
        image::Luma([(kernel(r as usize, c as usize, plan.centers[k], spec.sigma()) * 255.0).round() as u8])
    })
}

fn sample_fixations(density: &GrayImage, count: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let weights: Vec<u32> = density.as_raw().iter().map(|v| *v as u32).collect();
    let dist = WeightedIndex::new(&weights).expect("density has a positive peak");
    let mut out = GrayImage::new(density.width(), density.height());
    for _ in 0..count {
        let i = dist.sample(rng) as u32;
        out.put_pixel(i % density.width(), i / density.width(), image::Luma([255]));
    }
    out
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Video directory name of video number `video`.
pub fn video_id(video: usize) -> String {
    format!("{:03}", video + 1)
}

/// Writes the dataset under `root` (`train/` and, when requested, `val/`)
/// together with `meta.toml`. Output is byte-identical for equal specs.
pub fn synth_dataset(spec: &SynthSpec, root: &Path) -> Result<SynthMeta> {
    spec.validate()?;
    let mut train_pixels: Vec<Vec<f32>> = Vec::new();
    for video in 0..spec.videos + spec.val_videos {
        let split = if video < spec.videos { Split::Train } else { Split::Val };
        let vdir = root.join(split.dir_name()).join(video_id(video));
        for sub in [FRAMES_DIR, MAPS_DIR, FIXATIONS_DIR] {
            let d = vdir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let plan = VideoPlan::new(spec, video);
        let mut fix_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        fix_rng.set_stream(2 * video as u64 + 1);
        for k in 0..spec.frames {
            let name = frame_file_name(k + 1);
            let frame = render_frame(spec, &plan, k);
            let density = render_density(spec, &plan, k);
            let fixations = sample_fixations(&density, spec.fixations_per_frame, &mut fix_rng);
            if split == Split::Train {
                train_pixels.push(frame.as_raw().iter().map(|v| *v as f32 / 255.0).collect());
            }
            let p = vdir.join(FRAMES_DIR).join(&name);
            save(|p| frame.save(p), &p)?;
            let p = vdir.join(MAPS_DIR).join(&name);
            save(|p| density.save(p), &p)?;
            let p = vdir.join(FIXATIONS_DIR).join(&name);
            save(|p| fixations.save(p), &p)?;
        }
    }
    let meta = SynthMeta {
        generator: "moving-blob v1".into(),
        spec: spec.clone(),
        blob_sigma: spec.sigma(),
        blob_speed: spec.speed(),
        standardization: Standardization::from_frames(train_pixels.iter().map(|f| f.as_slice())),
    };
    let path = root.join(META_FILE);
    let text = toml::to_string(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}
