//! Transformer-based complementary feature extraction: windowed
//! spatio-temporal self-attention at the encoder's resolution, followed by a
//! channel reduction.

use candle_core::{Device, DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};

/// Large negative logit that masks attention across shifted-window seams.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct TcfeLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    proj: Linear,
    window: [usize; 3],
    shifted: bool,
}

/// Placement of windows over a `(T, h, w)` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub extent: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowPlan {
    pub fn new(extent: [usize; 3], window: [usize; 3], shifted: bool) -> Result<Self> {
        for d in 0..3 {
            if window[d] == 0 || window[d] > extent[d] {
                return Err(Error::Config(format!(
                    "attention window {window:?} does not fit feature extent {extent:?}"
                )));
            }
            if !extent[d].is_multiple_of(window[d]) {
                return Err(Error::Config(format!(
                    "feature extent {extent:?} is not tiled by attention window {window:?}"
                )));
            }
        }
        let shift = std::array::from_fn(|d| if shifted && window[d] < extent[d] { window[d] / 2 } else { 0 });
        Ok(Self { extent, window, shift })
    }

    pub fn num_windows(&self) -> usize {
        (0..3).map(|d| self.extent[d] / self.window[d]).product()
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    /// `[T, h, w, C]` -> `[num_windows, window_len, C]`.
    pub fn partition(&self, x: &Tensor) -> Result<Tensor> {
        let [t, h, w] = self.extent;
        let [wt, wh, ww] = self.window;
        let c = x.dim(3)?;
        Ok(x.reshape(vec![t / wt, wt, h / wh, wh, w / ww, ww, c])?
            .permute([0, 2, 4, 1, 3, 5, 6])?
            .contiguous()?
            .reshape((self.num_windows(), self.window_len(), c))?)
    }

    /// Inverse of [`WindowPlan::partition`].
    pub fn merge(&self, x: &Tensor) -> Result<Tensor> {
        let [t, h, w] = self.extent;
        let [wt, wh, ww] = self.window;
        let c = x.dim(2)?;
        Ok(x.reshape(vec![t / wt, h / wh, w / ww, wt, wh, ww, c])?
            .permute([0, 3, 1, 4, 2, 5, 6])?
            .contiguous()?
            .reshape((t, h, w, c))?)
    }

    pub fn roll_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for d in 0..3 {
            if self.shift[d] > 0 {
                y = y.roll(-(self.shift[d] as i32), d)?;
            }
        }
        Ok(y)
    }

    pub fn roll_back(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for d in 0..3 {
            if self.shift[d] > 0 {
                y = y.roll(self.shift[d] as i32, d)?;
            }
        }
        Ok(y)
    }

    /// Region label of each position of the rolled volume; tokens with
    /// different labels were not neighbours before the roll.
    fn region_labels(&self) -> Vec<usize> {
        let label = |d: usize, i: usize| -> usize {
            let (n, w, s) = (self.extent[d], self.window[d], self.shift[d]);
            if s == 0 || i < n - w {
                0
            } else if i < n - s {
                1
            } else {
                2
            }
        };
        let [t, h, w] = self.extent;
        let mut out = Vec::with_capacity(t * h * w);
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    out.push(label(0, it) * 9 + label(1, ih) * 3 + label(2, iw));
                }
            }
        }
        out
    }

    /// Additive attention mask `[num_windows, window_len, window_len]`.
    pub fn mask(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let labels = self.region_labels();
        let [t, h, w] = self.extent;
        let as_tensor = Tensor::from_vec(labels.iter().map(|&l| l as f64).collect::<Vec<_>>(), (t, h, w, 1), &Device::Cpu)?;
        let windows = self.partition(&as_tensor)?.squeeze(2)?.to_vec2::<f64>()?;
        let n = self.window_len();
        let mut m = Vec::with_capacity(windows.len() * n * n);
        for win in &windows {
            for a in win {
                for b in win {
                    m.push(if a == b { 0.0 } else { MASKED });
                }
            }
        }
        Ok(Tensor::from_vec(m, (windows.len(), n, n), device)?.to_dtype(dtype)?)
    }
}

impl TcfeLayer {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        heads: usize,
        mlp_ratio: usize,
        window: [usize; 3],
        shifted: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), c_in)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), c_in, heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), c_in)?,
            mlp: Mlp::new(&pb.pp("mlp"), c_in, c_in * mlp_ratio)?,
            proj: Linear::new(&pb.pp("proj"), c_in, c_out, true)?,
            window,
            shifted,
        })
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    /// `[T, h, w, c_in]` -> `[T, h, w, c_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, h, w, _) = x.dims4()?;
        let plan = WindowPlan::new([t, h, w], self.window, self.shifted)?;
        let mask = if plan.is_shifted() { Some(plan.mask(x.dtype(), x.device())?) } else { None };
        let normed = plan.roll_forward(&self.norm1.forward(x)?)?;
        let attended = self.attn.forward(&plan.partition(&normed)?, mask.as_ref())?;
        let attended = plan.roll_back(&plan.merge(&attended)?)?;
        let x = (x + attended)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        self.proj.forward(&x)
    }

    /// The same layer evaluated with every token attending only to itself.
    pub fn forward_pointwise(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.value_path(&self.norm1.forward(x)?)?)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        self.proj.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn partition_merge_roundtrip() {
        let plan = WindowPlan::new([4, 6, 6], [2, 3, 3], true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 6, 6, 5), &Device::Cpu).unwrap();
        let y = plan.merge(&plan.partition(&x).unwrap()).unwrap();
        assert_eq!(max_diff(&x, &y), 0.0);
        let z = plan.roll_back(&plan.roll_forward(&x).unwrap()).unwrap();
        assert_eq!(max_diff(&x, &z), 0.0);
    }

    #[test]
    fn partition_groups_contiguous_blocks() {
        let plan = WindowPlan::new([2, 4, 4], [1, 2, 2], false).unwrap();
        let vals: Vec<f32> = (0..32).map(|v| v as f32).collect();
        let x = Tensor::from_vec(vals, (2, 4, 4, 1), &Device::Cpu).unwrap();
        let p = plan.partition(&x).unwrap().squeeze(2).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p[4], vec![16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn shift_only_on_axes_larger_than_window() {
        let plan = WindowPlan::new([2, 8, 8], [2, 4, 4], true).unwrap();
        assert_eq!(plan.shift, [0, 2, 2]);
        assert!(!WindowPlan::new([2, 4, 4], [2, 4, 4], true).unwrap().is_shifted());
    }

    #[test]
    fn oversized_window_is_a_config_error() {
        assert!(matches!(WindowPlan::new([2, 4, 4], [4, 2, 2], false), Err(Error::Config(_))));
        assert!(matches!(WindowPlan::new([2, 6, 6], [1, 4, 4], false), Err(Error::Config(_))));
    }

    #[test]
    fn mask_blocks_wrapped_neighbours() {
        let plan = WindowPlan::new([1, 4, 4], [1, 2, 2], true).unwrap();
        let m = plan.mask(DType::F64, &Device::Cpu).unwrap().to_vec3::<f64>().unwrap();
        // first window lies fully inside the original interior
        assert!(m[0].iter().flatten().all(|&v| v == 0.0));
        // last window mixes four original regions: only the diagonal is open
        let last = &m[3];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(last[i][j] == 0.0, i == j, "({i},{j})");
            }
        }
    }

    #[test]
    fn unit_window_reduces_to_pointwise_path() {
        let pb = ParamBuilder::new(5, DType::F64, &Device::Cpu);
        let layer = TcfeLayer::new(&pb, 8, 4, 2, 2, [1, 1, 1], false).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 3, 8), &Device::Cpu).unwrap();
        let a = layer.forward(&x).unwrap();
        let b = layer.forward_pointwise(&x).unwrap();
        assert_eq!(a.dims(), &[2, 3, 3, 4]);
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn shifted_layer_keeps_shape_and_is_deterministic() {
        let pb = ParamBuilder::new(5, DType::F32, &Device::Cpu);
        let layer = TcfeLayer::new(&pb, 8, 6, 2, 2, [2, 2, 2], true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 4, 4, 8), &Device::Cpu).unwrap();
        let a = layer.forward(&x).unwrap();
        let b = layer.forward(&x).unwrap();
        assert_eq!(a.dims(), &[4, 4, 4, 6]);
        assert_eq!(max_diff(&a, &b), 0.0);
    }
}
