//! Late fusion head.
//!
//! The last feature of each active branch is reduced to one time step and
//! brought to the static branch's grid, the results are concatenated along
//! channels and run through a small 2-D conv stack. The first convolution
//! over the concatenation is stored as one kernel slice per branch, which is
//! the same linear map and lets a subset of branches be fused by dropping
//! their slices.

use candle_core::Tensor;

use super::Branch;
use crate::error::{Error, Result};
use crate::nn::{self, CollapseKind, Conv2d, GroupNorm, ParamBuilder, TemporalCollapse};
use crate::resample;

#[derive(Debug, Clone)]
struct BranchInput {
    collapse: Option<TemporalCollapse>,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    inputs: Vec<(Branch, BranchInput)>,
    bias: Tensor,
    norm: GroupNorm,
    out: Conv2d,
}

impl FusionHead {
    /// `branch_channels` lists each built branch with its final width.
    pub fn new(
        pb: &ParamBuilder,
        branch_channels: &[(Branch, usize)],
        width: usize,
        kind: CollapseKind,
        groups: usize,
    ) -> Result<Self> {
        let mut inputs = Vec::new();
        for &(branch, c) in branch_channels {
            let bp = pb.pp(branch.name().to_lowercase());
            let collapse = match branch {
                Branch::Sfd => None,
                _ => Some(TemporalCollapse::new(&bp.pp("collapse"), kind, c)?),
            };
            inputs.push((branch, BranchInput { collapse, conv: Conv2d::new(&bp.pp("conv"), c, width, 3, false)? }));
        }
        Ok(Self {
            inputs,
            bias: pb.zeros("bias", width)?,
            norm: GroupNorm::new(&pb.pp("norm"), groups, width)?,
            out: Conv2d::new(&pb.pp("out"), width, 1, 1, true)?,
        })
    }

    /// Fuses `(branch, feature)` pairs into an `[H, W]` map in `(0, 1)`.
    /// Features are channels-last; the fusion grid is `(grid_h, grid_w)`.
    pub fn forward(&self, features: &[(Branch, &Tensor)], grid: (usize, usize), out_hw: (usize, usize)) -> Result<Tensor> {
        if features.is_empty() {
            return Err(Error::Config("fusion needs at least one branch".into()));
        }
        let mut acc: Option<Tensor> = None;
        for (branch, feat) in features {
            let (_, input) = self
                .inputs
                .iter()
                .find(|(b, _)| b == branch)
                .ok_or_else(|| Error::Config(format!("fusion head has no input for {}", branch.name())))?;
            let x = match &input.collapse {
                Some(c) => c.forward(feat)?,
                None => (*feat).clone(),
            };
            if x.dim(0)? != 1 {
                return Err(Error::ShapeMismatch(format!("{} feature is not single-step", branch.name())));
            }
            let x = resample::resize_bilinear(&nn::to_channels_first(&x)?, grid.0, grid.1)?;
            let y = input.conv.forward(&x)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let width = self.bias.dim(0)?;
        let x = acc.unwrap().broadcast_add(&self.bias.reshape((1, width, 1, 1))?)?;
        let x = self.norm.forward(&x)?.gelu()?;
        let logits = self.out.forward(&x)?;
        let logits = resample::resize_bilinear(&logits, out_hw.0, out_hw.1)?;
        nn::sigmoid(&logits.reshape(out_hw)?)
    }
}
