//! Resampling kernels shared by the model (as differentiable tensor ops) and
//! by the host-side image code (resizing frames and predictions).
//!
//! Spatial resampling is bilinear with half-pixel centers; temporal
//! resampling is nearest-neighbour.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::Result;

/// One output tap of a 1-D bilinear kernel: `out[o] = (1-frac)*in[lo] + frac*in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(len_in: usize, len_out: usize) -> Vec<Tap> {
    assert!(len_in > 0 && len_out > 0, "resampling needs non-empty axes");
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len_in - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Dense `[len_out, len_in]` interpolation matrix.
pub fn bilinear_matrix(len_in: usize, len_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; len_out * len_in];
    for (o, tap) in bilinear_taps(len_in, len_out).into_iter().enumerate() {
        m[o * len_in + tap.lo] += 1.0 - tap.frac;
        m[o * len_in + tap.hi] += tap.frac;
    }
    m
}

fn matrix_tensor(len_in: usize, len_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = bilinear_matrix(len_in, len_out);
    Ok(Tensor::from_vec(m, (len_out, len_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resize over the two trailing axes of `x` (`[..., H, W]`).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mut y = x.clone();
    if w != out_w {
        let rx = matrix_tensor(w, out_w, x.dtype(), x.device())?;
        y = y.broadcast_matmul(&rx.t()?)?;
    }
    if h != out_h {
        let ry = matrix_tensor(h, out_h, x.dtype(), x.device())?;
        y = ry.broadcast_matmul(&y)?;
    }
    Ok(y)
}

/// Source index for each output slot of a nearest-neighbour resample.
pub fn nearest_indices(len_in: usize, len_out: usize) -> Vec<u32> {
    assert!(len_in > 0 && len_out > 0, "resampling needs non-empty axes");
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * len_in as f64 / len_out as f64).floor() as usize;
            src.min(len_in - 1) as u32
        })
        .collect()
}

/// Nearest-neighbour resample of axis `dim` to length `len_out`.
pub fn resample_nearest(x: &Tensor, dim: usize, len_out: usize) -> Result<Tensor> {
    let len_in = x.dim(dim)?;
    if len_in == len_out {
        return Ok(x.clone());
    }
    let idx = Tensor::new(nearest_indices(len_in, len_out), x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Host-side bilinear resize of a single-channel map.
pub fn resize_map(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (a, b) = (ty[y], tx[x]);
        let top = map[[a.lo, b.lo]] * (1.0 - b.frac) + map[[a.lo, b.hi]] * b.frac;
        let bot = map[[a.hi, b.lo]] * (1.0 - b.frac) + map[[a.hi, b.hi]] * b.frac;
        top * (1.0 - a.frac) + bot * a.frac
    })
}

/// Host-side bilinear resize of an interleaved `[H, W, C]` f32 image.
pub fn resize_hwc(data: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return data.to_vec();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let at = |y: usize, x: usize, ch: usize| data[(y * w + x) * c + ch] as f64;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for a in &ty {
        for b in &tx {
            for ch in 0..c {
                let top = at(a.lo, b.lo, ch) * (1.0 - b.frac) + at(a.lo, b.hi, ch) * b.frac;
                let bot = at(a.hi, b.lo, ch) * (1.0 - b.frac) + at(a.hi, b.hi, ch) * b.frac;
                out.push((top * (1.0 - a.frac) + bot * a.frac) as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let m = bilinear_matrix(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        for (a, b) in [(3, 7), (7, 3), (14, 224), (1, 4), (4, 1)] {
            let m = bilinear_matrix(a, b);
            for row in m.chunks(a) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_by_two_matches_half_pixel_convention() {
        // in = [0, 1] -> out positions -0.25, 0.25, 0.75, 1.25 clamped
        let x = Tensor::new(&[[0f64, 1.0]], &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y[0], vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_picks_centres() {
        assert_eq!(nearest_indices(16, 8), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(nearest_indices(4, 1), vec![2]);
        assert_eq!(nearest_indices(2, 4), vec![0, 0, 1, 1]);
    }

    #[test]
    fn host_and_tensor_resize_agree() {
        let data: Vec<f64> = (0..12).map(|v| (v * v) as f64 * 0.1).collect();
        let host = resize_map(&Array2::from_shape_vec((3, 4), data.clone()).unwrap(), 5, 7);
        let t = Tensor::from_vec(data, (3, 4), &Device::Cpu).unwrap();
        let dev = resize_bilinear(&t, 5, 7).unwrap().to_vec2::<f64>().unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert!((host[[y, x]] - dev[y][x]).abs() < 1e-12);
            }
        }
    }
}
