//! Static feature decoding: single-slice 2-D features, fed at every layer by
//! a learned temporal collapse of the matching DFD output.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, CollapseKind, Conv2d, GroupNorm, Linear, ParamBuilder, TemporalCollapse};
use crate::resample;

/// Learned collapse of a volume's time axis followed by a bias-free channel
/// projection: `[T, h, w, c_in]` -> `[1, h, w, c_out]`.
#[derive(Debug, Clone)]
pub struct CollapseProject {
    collapse: TemporalCollapse,
    proj: Linear,
}

impl CollapseProject {
    pub fn new(pb: &ParamBuilder, kind: CollapseKind, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            collapse: TemporalCollapse::new(&pb.pp("collapse"), kind, c_in)?,
            proj: Linear::new(&pb.pp("proj"), c_in, c_out, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.collapse.forward(x)?)
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct SfdLayer {
    conv: Conv2d,
    norm: GroupNorm,
    /// Collapse of the DFD feature at this depth; absent when DFD is not built.
    tau: Option<CollapseProject>,
}

impl SfdLayer {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        phi_channels: Option<usize>,
        kind: CollapseKind,
        groups: usize,
    ) -> Result<Self> {
        let tau = match phi_channels {
            Some(c) => Some(CollapseProject::new(&pb.pp("tau"), kind, c, c_out)?),
            None => None,
        };
        Ok(Self { conv: Conv2d::new(&pb.pp("conv"), c_in, c_out, 3, true)?, norm: GroupNorm::new(&pb.pp("norm"), groups, c_out)?, tau })
    }

    pub fn tau(&self) -> Option<&CollapseProject> {
        self.tau.as_ref()
    }

    /// 2-D block: bilinear upsample to `(height, width)`, conv, norm, GELU.
    pub fn transform(&self, prev: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let x = nn::to_channels_first(prev)?;
        let x = resample::resize_bilinear(&x, height, width)?;
        let x = self.norm.forward(&self.conv.forward(&x)?)?.gelu()?;
        nn::to_channels_last(&x)
    }

    /// `g(prev) (+) tau(phi)`, the fusion term only when `phi` is given.
    pub fn forward(&self, prev: &Tensor, phi: Option<&Tensor>, height: usize, width: usize) -> Result<Tensor> {
        if prev.dim(0)? != 1 {
            return Err(Error::Precondition(format!(
                "static branch input must have a single time step, got {}",
                prev.dim(0)?
            )));
        }
        let local = self.transform(prev, height, width)?;
        let Some(phi) = phi else { return Ok(local) };
        let tau = self.tau.as_ref().ok_or_else(|| Error::Config("this SFD layer has no DFD input".into()))?;
        let collapsed = tau.forward(phi)?;
        if collapsed.dims() != local.dims() {
            return Err(Error::ShapeMismatch(format!(
                "collapsed DFD features {:?} do not align with SFD features {:?}",
                collapsed.dims(),
                local.dims()
            )));
        }
        Ok((local + collapsed)?)
    }
}
