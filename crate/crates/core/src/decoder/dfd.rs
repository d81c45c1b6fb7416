//! Dynamic feature decoding: local 3-D convolutions that raise spatial
//! resolution while shrinking time, with the attention branch's features
//! added in after resampling.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, Conv3d, GroupNorm, Linear, ParamBuilder};
use crate::resample;

/// Shape targets for one DFD layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DfdStep {
    pub frames: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct DfdLayer {
    conv: Conv3d,
    norm: GroupNorm,
    /// Channel projection of the incoming attention-branch features; absent
    /// when that branch is not built or for the first layer.
    sigma: Option<Linear>,
    channels: usize,
}

impl DfdLayer {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, theta_channels: Option<usize>, groups: usize) -> Result<Self> {
        let sigma = match theta_channels {
            Some(c) => Some(Linear::new(&pb.pp("sigma"), c, c_out, false)?),
            None => None,
        };
        Ok(Self {
            conv: Conv3d::new(&pb.pp("conv"), c_in, c_out)?,
            norm: GroupNorm::new(&pb.pp("norm"), groups, c_out)?,
            sigma,
            channels: c_out,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn has_fusion(&self) -> bool {
        self.sigma.is_some()
    }

    /// Local transform of the previous DFD output (channels-last in and out).
    pub fn transform(&self, prev: &Tensor, step: DfdStep) -> Result<Tensor> {
        let x = nn::to_channels_first(prev)?;
        let x = resample::resize_bilinear(&x, step.height, step.width)?;
        let x = self.conv.forward(&x, step.stride)?;
        let x = self.norm.forward(&x)?.gelu()?;
        nn::to_channels_last(&x)
    }

    /// Resamples attention-branch features onto this layer's grid: nearest
    /// in time, bilinear in space, then a bias-free channel projection.
    pub fn resample_theta(&self, theta: &Tensor, step: DfdStep) -> Result<Tensor> {
        let sigma = self
            .sigma
            .as_ref()
            .ok_or_else(|| Error::Config("this DFD layer has no attention-branch input".into()))?;
        let x = sigma.forward(&resample::resample_nearest(theta, 0, step.frames)?)?;
        let x = resample::resize_bilinear(&nn::to_channels_first(&x)?, step.height, step.width)?;
        nn::to_channels_last(&x)
    }

    /// `f(prev) (+) sigma(theta)`, the fusion term only when `theta` is given.
    pub fn forward(&self, prev: &Tensor, theta: Option<&Tensor>, step: DfdStep) -> Result<Tensor> {
        let local = self.transform(prev, step)?;
        let Some(theta) = theta else { return Ok(local) };
        let fused = self.resample_theta(theta, step)?;
        if fused.dims() != local.dims() {
            return Err(Error::ShapeMismatch(format!(
                "resampled attention features {:?} do not align with DFD features {:?}",
                fused.dims(),
                local.dims()
            )));
        }
        Ok((local + fused)?)
    }
}
