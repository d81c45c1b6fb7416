//! Feature files: a fixed header followed by a row-major payload.
//!
//! ```text
//! magic    "SFOMFEAT"        8 bytes
//! version  u32 LE            currently 1
//! dims     4 x u32 LE        T, h, w, c
//! dtype    u32 LE            0 = f32
//! payload  T*h*w*c x f32 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device};

use super::{EncoderConfig, FeatureVolume, Provenance};
use crate::error::{Error, Result};
use crate::tensor_io::{self, read_exact, read_u32, write_u32};

pub const MAGIC: &[u8; 8] = b"SFOMFEAT";
pub const VERSION: u32 = 1;

/// Writes `vol` as f32. Non-finite volumes are refused.
pub fn export_features(vol: &FeatureVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data = vol.data().to_device(&Device::Cpu)?.to_dtype(DType::F32)?;
    if data.flatten_all()?.to_vec1::<f32>()?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("feature volume contains non-finite values".into()));
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, VERSION).map_err(io)?;
    for d in data.dims() {
        write_u32(&mut w, *d as u32).map_err(io)?;
    }
    tensor_io::write_payload(&mut w, &data)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a feature file without checking it against a configuration.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dims = (0..4).map(|_| read_u32(&mut r, path).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::format(path, format!("empty axis in header {dims:?}")));
    }
    let data = tensor_io::read_payload(&mut r, &dims, path)?;
    if data.dtype() != DType::F32 {
        return Err(Error::format(path, "feature payload must be f32"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    FeatureVolume::new(data, Provenance::Imported)
}

/// Reads a feature file and checks its temporal length and width against
/// the encoder configuration it stands in for.
pub fn import_features(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<FeatureVolume> {
    let vol = read_features(path.as_ref())?;
    let (t, _, _, c) = vol.dims();
    if c != expected.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "{}: feature width {c}, expected {}",
            path.as_ref().display(),
            expected.embed_dim
        )));
    }
    if t != expected.window_frames {
        return Err(Error::ShapeMismatch(format!(
            "{}: {t} frames, expected {}",
            path.as_ref().display(),
            expected.window_frames
        )));
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    fn volume(dims: (usize, usize, usize, usize)) -> FeatureVolume {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        FeatureVolume::new(Tensor::from_vec(data, dims, &Device::Cpu).unwrap(), Provenance::Encoded).unwrap()
    }

    #[test]
    fn sequential_payload_rereads_in_index_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sfeat");
        export_features(&volume((2, 2, 2, 4)), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 16 + 4 + 32 * 4);
        let payload = &bytes[32..];
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            assert_eq!(f32::from_le_bytes(chunk.try_into().unwrap()), i as f32);
        }
        let back = read_features(&path).unwrap();
        assert_eq!(back.provenance(), Provenance::Imported);
        assert_eq!(back.dims(), (2, 2, 2, 4));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sfeat");
        export_features(&volume((16, 2, 2, 8)), &path).unwrap();
        let cfg = EncoderConfig { embed_dim: 16, ..Default::default() };
        assert!(matches!(import_features(&path, &cfg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sfeat");
        export_features(&volume((2, 2, 2, 4)), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sfeat");
        export_features(&volume((1, 1, 1, 2)), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_volume_is_refused() {
        let t = Tensor::from_vec(vec![1f32, f32::NAN], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let v = FeatureVolume::new(t, Provenance::Encoded).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_features(&v, dir.path().join("x")), Err(Error::Precondition(_))));
    }
}
