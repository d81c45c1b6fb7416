//! Spatio-temporal feature encoder.
//!
//! A small joint space-time vision transformer: frames are cut into
//! non-overlapping patches, projected to `embed_dim` channels, tagged with
//! factorised (spatial + temporal) learned positions and passed through
//! `depth` pre-norm transformer blocks in which every token attends to every
//! other token of the clip. Time is never downsampled, so the output volume
//! is `[T, H/patch, W/patch, embed_dim]`.
//!
//! Features from a stronger, externally trained encoder can be substituted
//! through [`features::import_features`].

pub mod features;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};
use crate::resample;

pub use features::{export_features, import_features, read_features};

/// A window of RGB frames, `[T, H, W, 3]`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Tensor,
    frame_indices: Vec<usize>,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_indices: Vec<usize>) -> Result<Self> {
        let dims = frames.dims();
        if dims.len() != 4 || dims[3] != 3 {
            return Err(Error::ShapeMismatch(format!("clip must be [T, H, W, 3], got {dims:?}")));
        }
        if dims[0] == 0 || dims[1] == 0 || dims[2] == 0 {
            return Err(Error::ShapeMismatch(format!("clip has an empty axis: {dims:?}")));
        }
        if frame_indices.len() != dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} frame indices for {} frames",
                frame_indices.len(),
                dims[0]
            )));
        }
        let frames = frames.to_dtype(DType::F32)?;
        let flat = frames.flatten_all()?.to_vec1::<f32>()?;
        if let Some(bad) = flat.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Precondition(format!("clip value {bad} outside [0, 1]")));
        }
        Ok(Self { frames, frame_indices })
    }

    pub fn from_vec(data: Vec<f32>, frames: usize, height: usize, width: usize, frame_indices: Vec<usize>) -> Result<Self> {
        let expected = frames * height * width * 3;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!("{} values for a {frames}x{height}x{width}x3 clip", data.len())));
        }
        Self::new(Tensor::from_vec(data, (frames, height, width, 3), &Device::Cpu)?, frame_indices)
    }

    /// Constant-valued clip, mostly useful in tests.
    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_vec(vec![value; frames * height * width * 3], frames, height, width, (0..frames).collect())
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    /// `(T, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.frames.dims();
        (d[0], d[1], d[2])
    }
}

/// Where a feature volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Encoded,
    Imported,
    BranchInternal,
}

/// A dense channels-last activation volume `[T, h, w, c]`.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    data: Tensor,
    provenance: Provenance,
}

impl FeatureVolume {
    pub fn new(data: Tensor, provenance: Provenance) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("feature volume must be rank 4, got {:?}", data.dims())));
        }
        Ok(Self { data, provenance })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `(T, h, w, c)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn with_provenance(self, provenance: Provenance) -> Self {
        Self { provenance, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Frames per input window; also the size of the temporal position table.
    pub window_frames: usize,
    /// Patch grid `(h, w)` the spatial position table is laid out for. Other
    /// grids are served by bilinearly resampling the table.
    pub grid: [usize; 2],
    pub mlp_ratio: usize,
    /// Per-channel standardisation applied to `[0, 1]` pixels on entry.
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            window_frames: 16,
            grid: [14, 14],
            mlp_ratio: 4,
            pixel_mean: [0.0; 3],
            pixel_std: [1.0; 3],
        }
    }
}

impl EncoderConfig {
    /// Width and depth of the large pretrained encoder the model was designed around.
    pub fn large_scale() -> Self {
        Self { embed_dim: 1024, depth: 24, heads: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 {
            problems.push("encoder.patch_size must be >= 1".to_string());
        }
        if self.window_frames == 0 {
            problems.push("encoder.window_frames must be >= 1".to_string());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            problems.push(format!("encoder.embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.grid.contains(&0) {
            problems.push("encoder.grid entries must be >= 1".to_string());
        }
        if self.mlp_ratio == 0 {
            problems.push("encoder.mlp_ratio must be >= 1".to_string());
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            problems.push("encoder.pixel_std entries must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }

    /// Output patch grid for an `H x W` input.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.patch_size) || !width.is_multiple_of(self.patch_size) {
            return Err(Error::ShapeMismatch(format!(
                "frame size {height}x{width} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), cfg.embed_dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), cfg.embed_dim, cfg.heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), cfg.embed_dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, None)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Joint space-time transformer encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_proj: Linear,
    pos_spatial: Tensor,
    pos_temporal: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let blocks = (0..cfg.depth).map(|i| Block::new(&pb.pp(format!("blocks.{i}")), cfg)).collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj: Linear::new(&pb.pp("patch_embed"), patch_dim, e, true)?,
            pos_spatial: pb.trunc_normal("pos_spatial", (cfg.grid[0], cfg.grid[1], e), nn::PROJ_INIT_STD)?,
            pos_temporal: pb.trunc_normal("pos_temporal", (cfg.window_frames, e), nn::PROJ_INIT_STD)?,
            blocks,
            norm: LayerNorm::new(&pb.pp("norm"), e)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Per-frame non-overlapping patch projection, `[T, H/p, W/p, embed_dim]`.
    pub fn patch_embed(&self, clip: &VideoClip) -> Result<FeatureVolume> {
        let (t, hh, ww) = clip.dims();
        let (h, w) = self.cfg.grid_for(hh, ww)?;
        let p = self.cfg.patch_size;
        let dtype = self.pos_temporal.dtype();
        let device = self.pos_temporal.device();
        let mean = Tensor::new(&self.cfg.pixel_mean, device)?.to_dtype(dtype)?;
        let std = Tensor::new(&self.cfg.pixel_std, device)?.to_dtype(dtype)?;
        let x = clip.frames().to_device(device)?.to_dtype(dtype)?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let patches = x
            .reshape((t, h, p, w, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((t, h, w, p * p * 3))?;
        FeatureVolume::new(self.patch_proj.forward(&patches)?, Provenance::BranchInternal)
    }

    fn positions(&self, t: usize, h: usize, w: usize) -> Result<Tensor> {
        if t > self.cfg.window_frames {
            return Err(Error::ShapeMismatch(format!(
                "clip has {t} frames but the encoder window holds {}",
                self.cfg.window_frames
            )));
        }
        let e = self.cfg.embed_dim;
        let spatial = if [h, w] == self.cfg.grid {
            self.pos_spatial.clone()
        } else {
            let table = self.pos_spatial.permute((2, 0, 1))?;
            resample::resize_bilinear(&table, h, w)?.permute((1, 2, 0))?
        };
        let temporal = self.pos_temporal.narrow(0, 0, t)?.reshape((t, 1, 1, e))?;
        Ok(temporal.broadcast_add(&spatial.reshape((1, h, w, e))?)?)
    }

    /// Full forward pass; output provenance is [`Provenance::Encoded`].
    pub fn encode(&self, clip: &VideoClip) -> Result<FeatureVolume> {
        let tokens = self.patch_embed(clip)?.into_data();
        let (t, h, w, e) = tokens.dims4()?;
        let mut x = tokens.broadcast_add(&self.positions(t, h, w)?)?.reshape((1, t * h * w, e))?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?.reshape((t, h, w, e))?;
        nn::ensure_finite(&x, "encoder activations")?;
        FeatureVolume::new(x, Provenance::Encoded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(cfg: &EncoderConfig, dtype: DType) -> Encoder {
        let pb = ParamBuilder::new(11, dtype, &Device::Cpu);
        Encoder::new(&pb, cfg).unwrap()
    }

    fn ramp_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let n = t * h * w * 3;
        let data = (0..n).map(|i| (i % 97) as f32 / 96.0).collect();
        VideoClip::from_vec(data, t, h, w, (0..t).collect()).unwrap()
    }

    #[test]
    fn clip_rejects_out_of_range_values() {
        let err = VideoClip::from_vec(vec![1.5; 3 * 16 * 16], 1, 16, 16, vec![0]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(VideoClip::from_vec(vec![0.5; 3 * 16 * 16], 1, 16, 16, vec![0, 1]).is_err());
    }

    #[test]
    fn single_patch_clip() {
        let enc = encoder(&EncoderConfig { embed_dim: 8, heads: 2, depth: 1, ..Default::default() }, DType::F32);
        let v = enc.patch_embed(&VideoClip::filled(1, 16, 16, 0.3).unwrap()).unwrap();
        assert_eq!(v.dims(), (1, 1, 1, 8));
    }

    #[test]
    fn patch_grid_follows_patch_size() {
        let cfg = EncoderConfig { patch_size: 8, embed_dim: 16, heads: 2, depth: 1, window_frames: 4, ..Default::default() };
        let enc = encoder(&cfg, DType::F32);
        let v = enc.patch_embed(&ramp_clip(4, 32, 32)).unwrap();
        assert_eq!(v.dims(), (4, 32 / 8, 32 / 8, 16));
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        let enc = encoder(&EncoderConfig { embed_dim: 8, heads: 2, depth: 1, ..Default::default() }, DType::F32);
        let err = enc.encode(&VideoClip::filled(1, 24, 16, 0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn too_many_frames_are_rejected() {
        let cfg = EncoderConfig { embed_dim: 8, heads: 2, depth: 1, window_frames: 2, ..Default::default() };
        let err = encoder(&cfg, DType::F32).encode(&VideoClip::filled(3, 16, 16, 0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn patch_embedding_uses_row_major_patches() {
        // With a 2x2 patch, token (t, i, j) must see exactly the pixels of
        // patch (i, j) in frame t.
        let cfg = EncoderConfig { patch_size: 2, embed_dim: 4, heads: 1, depth: 1, window_frames: 2, grid: [2, 2], ..Default::default() };
        let enc = encoder(&cfg, DType::F64);
        let clip = ramp_clip(2, 4, 4);
        let got = enc.patch_embed(&clip).unwrap().into_data();
        let px = clip.frames().to_dtype(DType::F64).unwrap();
        let patch = px.get(1).unwrap().narrow(0, 2, 2).unwrap().narrow(1, 0, 2).unwrap().flatten_all().unwrap();
        let expected = enc.patch_proj.forward(&patch.unsqueeze(0).unwrap()).unwrap().squeeze(0).unwrap();
        let token = got.get(1).unwrap().get(1).unwrap().get(0).unwrap();
        let d = (token - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn zero_clip_is_finite_and_deterministic() {
        let cfg = EncoderConfig { embed_dim: 16, heads: 2, depth: 1, window_frames: 2, ..Default::default() };
        let enc = encoder(&cfg, DType::F32);
        let clip = VideoClip::filled(2, 32, 32, 0.0).unwrap();
        let a = enc.encode(&clip).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = enc.encode(&clip).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }
}
