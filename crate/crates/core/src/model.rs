//! The full model: encoder + decoder over one parameter store, and its
//! checkpoint format.
//!
//! A checkpoint is a single file:
//!
//! ```text
//! b"SFOMCKPT" | version u32 | config length u32 | config (TOML, UTF-8)
//! | tensor count u32 | { name length u32 | name | tensor record }*
//! ```
//!
//! where a tensor record is `rank u32 | dims u32* | dtype tag u32 |
//! little-endian payload`, the same encoding as feature files. All integers
//! are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::tcfe::WindowPlan;
use crate::decoder::{BranchFeatures, BranchSet, Decoder, DecoderConfig, SaliencyMap};
use crate::encoder::{Encoder, EncoderConfig, FeatureVolume, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamStore};
use crate::tensor_io;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFOMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Every architectural hyperparameter; the single source of truth for shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input frame size `(H, W)`.
    pub input_size: [usize; 2],
    /// Branches the decoder is built with.
    pub branches: BranchSet,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: [224, 224], branches: BranchSet::FULL, encoder: EncoderConfig::default(), decoder: DecoderConfig::default() }
    }
}

impl ModelConfig {
    /// Checks each part and that the parts fit together: the encoder grid
    /// must be tiled by the attention window and every DFD layer must reach
    /// its frame count.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.encoder.validate(), self.decoder.validate()] {
            match r {
                Err(Error::Itemized(p)) => problems.extend(p),
                Err(e) => problems.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Itemized(problems));
        }
        let [h, w] = self.input_size;
        let (gh, gw) = match self.encoder.grid_for(h, w) {
            Ok(g) => g,
            Err(e) => return Err(Error::Itemized(vec![e.to_string()])),
        };
        let t = self.encoder.window_frames;
        if self.branches.contains(crate::decoder::Branch::Tcfe) {
            for shifted in [false, true] {
                if let Err(e) = WindowPlan::new([t, gh, gw], self.decoder.window_size, shifted) {
                    problems.push(e.to_string());
                    break;
                }
            }
        }
        if self.branches.contains(crate::decoder::Branch::Dfd) {
            let mut prev = (t, gh, gw);
            for i in 0..self.decoder.num_layers {
                match self.decoder.dfd_step(i, prev) {
                    Ok(s) => prev = (s.frames, s.height, s.width),
                    Err(e) => {
                        problems.push(e.to_string());
                        break;
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// `(H, W)`.
    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_size[0], self.input_size[1])
    }
}

/// Encoder and decoder sharing one [`ParamStore`]. Encoder parameters are
/// named `encoder.*`, decoder parameters `decoder.*`.
#[derive(Debug, Clone)]
pub struct SalFoM {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl SalFoM {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32, &Device::Cpu)
    }

    /// Parameters are drawn from one ChaCha8 stream seeded with `seed`.
    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let pb = ParamBuilder::new(seed, dtype, device);
        let encoder = Encoder::new(&pb.pp("encoder"), &cfg.encoder)?;
        let decoder = Decoder::new(&pb.pp("decoder"), &cfg.decoder, cfg.encoder.embed_dim, cfg.branches)?;
        Ok(Self { cfg: cfg.clone(), params: pb.into_store(), encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let (t, h, w) = clip.dims();
        if (h, w) != self.cfg.input_hw() || t != self.cfg.encoder.window_frames {
            return Err(Error::ShapeMismatch(format!(
                "model takes {}x{:?} clips, got {t}x[{h}, {w}]",
                self.cfg.encoder.window_frames, self.cfg.input_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<FeatureVolume> {
        self.check_clip(clip)?;
        self.encoder.encode(clip)
    }

    /// Saliency map for the clip's last frame, at input resolution.
    pub fn forward(&self, clip: &VideoClip) -> Result<SaliencyMap> {
        Ok(self.forward_with_features(clip)?.0)
    }

    pub fn forward_with_features(&self, clip: &VideoClip) -> Result<(SaliencyMap, BranchFeatures)> {
        let f = self.encode(clip)?;
        self.decoder.decode(&f, self.cfg.input_hw())
    }

    /// Decodes features produced elsewhere (e.g. imported from disk).
    pub fn decode_features(&self, f: &FeatureVolume) -> Result<SaliencyMap> {
        Ok(self.decoder.decode(f, self.cfg.input_hw())?.0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let text = self.cfg.to_toml()?;
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        tensor_io::write_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
        tensor_io::write_u32(&mut w, text.len() as u32).map_err(io)?;
        w.write_all(text.as_bytes()).map_err(io)?;
        tensor_io::write_u32(&mut w, self.params.len() as u32).map_err(io)?;
        for (name, var) in self.params.iter() {
            tensor_io::write_u32(&mut w, name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            tensor_io::write_record(&mut w, var.as_tensor())?;
        }
        w.flush().map_err(io)
    }

    /// Loads a checkpoint, rebuilding the model from its embedded config and
    /// checking that every stored tensor matches the shape that config implies.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        tensor_io::read_exact(&mut r, &mut magic, path)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = tensor_io::read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = tensor_io::read_u32(&mut r, path)? as usize;
        let mut text = vec![0u8; len];
        tensor_io::read_exact(&mut r, &mut text, path)?;
        let text = String::from_utf8(text).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let cfg = ModelConfig::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;

        let count = tensor_io::read_u32(&mut r, path)? as usize;
        let mut tensors = BTreeMap::new();
        let mut dtype = None;
        for _ in 0..count {
            let n = tensor_io::read_u32(&mut r, path)? as usize;
            let mut name = vec![0u8; n];
            tensor_io::read_exact(&mut r, &mut name, path)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let t = tensor_io::read_record(&mut r, path)?;
            dtype.get_or_insert(t.dtype());
            tensors.insert(name, t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
        }
        let model = Self::with_dtype(&cfg, 0, dtype.unwrap_or(DType::F32), &Device::Cpu)?;
        model.params.restore(&tensors).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }

    /// Copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params.snapshot()
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params.restore(values)
    }
}
