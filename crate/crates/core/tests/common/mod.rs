#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use salfom::data::{index_dataset, load_videos, synth_dataset, Split, SynthSpec, Video};
use salfom::decoder::DecoderConfig;
use salfom::encoder::{EncoderConfig, VideoClip};
use salfom::model::ModelConfig;
use salfom::decoder::BranchSet;

/// Depth-1 encoder and width-8 decoder on 16x16 inputs.
pub fn tiny_config(window_frames: usize, layers: usize) -> ModelConfig {
    let mut decoder = DecoderConfig::with_layers(layers, window_frames);
    decoder.tcfe_channels = vec![8; layers];
    decoder.dfd_channels = vec![8; layers];
    decoder.sfd_channels = vec![8; layers];
    decoder.sfd_stem_channels = 8;
    decoder.fusion_channels = 8;
    decoder.window_size = [1, 2, 2];
    decoder.tcfe_heads = 2;
    ModelConfig {
        input_size: [16, 16],
        branches: BranchSet::FULL,
        encoder: EncoderConfig { patch_size: 4, embed_dim: 8, depth: 1, heads: 2, window_frames, grid: [4, 4], ..Default::default() },
        decoder,
    }
}

pub fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoClip {
    let data = (0..t * h * w * 3).map(|_| rng.random::<f32>()).collect();
    VideoClip::from_vec(data, t, h, w, (0..t).collect()).unwrap()
}

/// Strictly positive random map.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, dtype: DType) -> Tensor {
    let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.05..1.0)).collect();
    Tensor::from_vec(v, (h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn synth(root: &Path, videos: usize, val_videos: usize, frames: usize, resolution: usize) -> SynthSpec {
    let spec = SynthSpec { videos, val_videos, frames, resolution, seed: 7, fixations_per_frame: 12 };
    synth_dataset(&spec, root).unwrap();
    spec
}

pub fn load(root: &Path, split: Split, size: (usize, usize)) -> Vec<Video> {
    load_videos(&index_dataset(root, split).unwrap(), size).unwrap()
}

pub fn tensor_bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
}
