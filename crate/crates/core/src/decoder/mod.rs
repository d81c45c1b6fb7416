//! Three-branch heterogeneous decoder.
//!
//! * **TCFE** refines encoder features with windowed spatio-temporal
//!   attention at the encoder's `T x h x w` resolution, only narrowing
//!   channels: `theta_i = tcfe_i(theta_{i-1})`, `theta_0 = F`.
//! * **DFD** runs local 3-D convolutions that upsample space and shrink time
//!   along a schedule, adding resampled TCFE features from layer 2 on:
//!   `phi_i = f_i(phi_{i-1}) + sigma_i(theta_i)`, `phi_0 = F`.
//! * **SFD** works on single-step 2-D features, collapsing the DFD feature
//!   of each depth into it: `gamma_i = g_i(gamma_{i-1}) + tau_i(phi_i)`,
//!   with `gamma_0` a learned collapse of `F`.
//!
//! The fusion head concatenates the final feature of every active branch and
//! maps it to a full-resolution map in `(0, 1)`.

pub mod dfd;
pub mod fusion;
pub mod sfd;
pub mod tcfe;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureVolume, Provenance};
use crate::error::{Error, Result};
use crate::nn::{CollapseKind, Conv3d, ParamBuilder};

use dfd::{DfdLayer, DfdStep};
use fusion::FusionHead;
use sfd::{CollapseProject, SfdLayer};
use tcfe::TcfeLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "TCFE")]
    Tcfe,
    #[serde(rename = "DFD")]
    Dfd,
    #[serde(rename = "SFD")]
    Sfd,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Tcfe, Branch::Dfd, Branch::Sfd];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Tcfe => "TCFE",
            Branch::Dfd => "DFD",
            Branch::Sfd => "SFD",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TCFE" => Ok(Branch::Tcfe),
            "DFD" => Ok(Branch::Dfd),
            "SFD" => Ok(Branch::Sfd),
            other => Err(Error::Config(format!("unknown decoder branch `{other}`"))),
        }
    }
}

/// A set of decoder branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Branch>", into = "Vec<Branch>")]
pub struct BranchSet {
    mask: u8,
}

impl BranchSet {
    pub const FULL: BranchSet = BranchSet { mask: 0b111 };

    fn bit(b: Branch) -> u8 {
        match b {
            Branch::Tcfe => 1,
            Branch::Dfd => 2,
            Branch::Sfd => 4,
        }
    }

    pub fn new(branches: impl IntoIterator<Item = Branch>) -> Result<Self> {
        let mask = branches.into_iter().fold(0, |m, b| m | Self::bit(b));
        if mask == 0 {
            return Err(Error::Config("at least one decoder branch must be active".into()));
        }
        Ok(Self { mask })
    }

    pub fn contains(self, b: Branch) -> bool {
        self.mask & Self::bit(b) != 0
    }

    pub fn is_subset_of(self, other: BranchSet) -> bool {
        self.mask & !other.mask == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Branch> {
        Branch::ALL.into_iter().filter(move |b| self.contains(*b))
    }

    pub fn len(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.mask == 0
    }

    /// Every non-empty subset, ordered: full set, singles, pairs.
    pub fn ablation_matrix() -> Vec<BranchSet> {
        use Branch::*;
        [vec![Tcfe, Dfd, Sfd], vec![Tcfe], vec![Dfd], vec![Sfd], vec![Tcfe, Dfd], vec![Tcfe, Sfd], vec![Dfd, Sfd]]
            .into_iter()
            .map(|v| BranchSet::new(v).unwrap())
            .collect()
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Branch::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    /// Accepts `TCFE`, `TCFE+DFD`, `dfd,sfd`, ...
    fn from_str(s: &str) -> Result<Self> {
        let parts = s.split(['+', ',']).filter(|p| !p.trim().is_empty()).map(Branch::from_str).collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }
}

impl TryFrom<Vec<Branch>> for BranchSet {
    type Error = Error;

    fn try_from(v: Vec<Branch>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BranchSet> for Vec<Branch> {
    fn from(s: BranchSet) -> Self {
        s.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Layers per branch.
    pub num_layers: usize,
    /// Output width of each TCFE layer; non-increasing.
    pub tcfe_channels: Vec<usize>,
    pub tcfe_heads: usize,
    pub tcfe_mlp_ratio: usize,
    /// TCFE attention window `(t, h, w)`.
    pub window_size: [usize; 3],
    pub dfd_channels: Vec<usize>,
    /// Spatial upsampling factor of each DFD layer.
    pub dfd_spatial_scale: Vec<usize>,
    /// Output frame count of each DFD layer; non-increasing.
    pub dfd_temporal_schedule: Vec<usize>,
    /// Width of the collapsed encoder features entering SFD.
    pub sfd_stem_channels: usize,
    pub sfd_channels: Vec<usize>,
    pub fusion_channels: usize,
    pub collapse: CollapseKind,
    pub norm_groups: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::with_layers(3, 16)
    }
}

const TCFE_WIDTHS: [usize; 6] = [32, 32, 16, 16, 8, 8];
const DFD_WIDTHS: [usize; 6] = [32, 16, 8, 8, 8, 8];

impl DecoderConfig {
    /// Default widths for `n` layers over `frames`-frame windows; time is
    /// halved per layer and collapsed to one step at the last layer.
    pub fn with_layers(n: usize, frames: usize) -> Self {
        let pick = |table: &[usize; 6], i: usize| table[i.min(5)];
        Self {
            num_layers: n,
            tcfe_channels: (0..n).map(|i| pick(&TCFE_WIDTHS, i)).collect(),
            tcfe_heads: 4,
            tcfe_mlp_ratio: 2,
            window_size: [2, 7, 7],
            dfd_channels: (0..n).map(|i| pick(&DFD_WIDTHS, i)).collect(),
            dfd_spatial_scale: vec![2; n],
            dfd_temporal_schedule: Self::halving_schedule(n, frames),
            sfd_stem_channels: 32,
            sfd_channels: (0..n).map(|i| pick(&DFD_WIDTHS, i)).collect(),
            fusion_channels: 16,
            collapse: CollapseKind::Attention,
            norm_groups: 4,
        }
    }

    pub fn halving_schedule(n: usize, frames: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        let mut t = frames.max(1);
        for i in 0..n {
            if i + 1 == n {
                out.push(1);
            } else {
                t = (t / 2).max(1);
                out.push(t);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_layers;
        let mut problems = Vec::new();
        if n == 0 {
            problems.push("decoder.num_layers must be >= 1".to_string());
        }
        for (name, list) in [
            ("tcfe_channels", &self.tcfe_channels),
            ("dfd_channels", &self.dfd_channels),
            ("dfd_spatial_scale", &self.dfd_spatial_scale),
            ("dfd_temporal_schedule", &self.dfd_temporal_schedule),
            ("sfd_channels", &self.sfd_channels),
        ] {
            if list.len() != n {
                problems.push(format!("decoder.{name} has {} entries, expected {n}", list.len()));
            }
            if list.contains(&0) {
                problems.push(format!("decoder.{name} entries must be >= 1"));
            }
        }
        if self.dfd_temporal_schedule.windows(2).any(|w| w[1] > w[0]) {
            problems.push("decoder.dfd_temporal_schedule must be non-increasing".to_string());
        }
        if self.tcfe_channels.windows(2).any(|w| w[1] > w[0]) {
            problems.push("decoder.tcfe_channels must be non-increasing".to_string());
        }
        if self.window_size.contains(&0) {
            problems.push("decoder.window_size entries must be >= 1".to_string());
        }
        if self.tcfe_heads == 0 || self.tcfe_mlp_ratio == 0 || self.sfd_stem_channels == 0 || self.fusion_channels == 0 {
            problems.push("decoder widths, heads and ratios must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }

    /// Spatial grid of the last decoder level for encoder grid `(h, w)`.
    pub fn output_grid(&self, h: usize, w: usize) -> (usize, usize) {
        let s: usize = self.dfd_spatial_scale.iter().product();
        (h * s, w * s)
    }

    /// Shape targets of DFD layer `i` given the previous feature's `(T, h, w)`.
    pub fn dfd_step(&self, i: usize, prev: (usize, usize, usize)) -> Result<DfdStep> {
        let frames = self.dfd_temporal_schedule[i];
        let stride = Conv3d::stride_for(prev.0, frames).ok_or_else(|| {
            Error::Config(format!(
                "DFD layer {}: no temporal stride takes {} frames to {frames}",
                i + 1,
                prev.0
            ))
        })?;
        let s = self.dfd_spatial_scale[i];
        Ok(DfdStep { frames, stride, height: prev.1 * s, width: prev.2 * s })
    }
}

/// Intermediate features of every branch, channels-last. Lists of inactive
/// branches are empty.
#[derive(Debug, Clone, Default)]
pub struct BranchFeatures {
    pub theta: Vec<FeatureVolume>,
    pub phi: Vec<FeatureVolume>,
    pub gamma: Vec<FeatureVolume>,
}

/// A predicted saliency map `[H, W]`.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    data: Tensor,
    normalized: bool,
}

impl SaliencyMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("saliency map must be [H, W], got {:?}", data.dims())));
        }
        Ok(Self { data, normalized: false })
    }

    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (h, w) = a.dim();
        let v: Vec<f64> = a.iter().copied().collect();
        Self::new(Tensor::from_vec(v, (h, w), &candle_core::Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[0], d[1])
    }

    /// Copy scaled to unit sum.
    pub fn normalized(&self) -> Result<Self> {
        let data = crate::losses::normalize_to_distribution(&self.data)?;
        Ok(Self { data, normalized: true })
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let (h, w) = self.dims();
        let v = self.data.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array2::from_shape_vec((h, w), v).expect("dims match"))
    }
}

/// The decoder with parameters for a fixed set of branches.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    feature_dim: usize,
    branches: BranchSet,
    tcfe: Vec<TcfeLayer>,
    dfd: Vec<DfdLayer>,
    sfd_stem: Option<CollapseProject>,
    sfd: Vec<SfdLayer>,
    fusion: FusionHead,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig, feature_dim: usize, branches: BranchSet) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_layers;
        let groups = cfg.norm_groups;
        let has_tcfe = branches.contains(Branch::Tcfe);
        let has_dfd = branches.contains(Branch::Dfd);
        let has_sfd = branches.contains(Branch::Sfd);

        let mut tcfe = Vec::new();
        if has_tcfe {
            let mut c_in = feature_dim;
            for i in 0..n {
                let c_out = cfg.tcfe_channels[i];
                let heads = gcd(cfg.tcfe_heads, c_in);
                tcfe.push(TcfeLayer::new(&pb.pp(format!("tcfe.{i}")), c_in, c_out, heads, cfg.tcfe_mlp_ratio, cfg.window_size, i % 2 == 1)?);
                c_in = c_out;
            }
        }
        let mut dfd = Vec::new();
        if has_dfd {
            let mut c_in = feature_dim;
            for i in 0..n {
                let theta = (has_tcfe && i > 0).then(|| cfg.tcfe_channels[i]);
                dfd.push(DfdLayer::new(&pb.pp(format!("dfd.{i}")), c_in, cfg.dfd_channels[i], theta, groups)?);
                c_in = cfg.dfd_channels[i];
            }
        }
        let mut sfd = Vec::new();
        let mut sfd_stem = None;
        if has_sfd {
            sfd_stem = Some(CollapseProject::new(&pb.pp("sfd.stem"), cfg.collapse, feature_dim, cfg.sfd_stem_channels)?);
            let mut c_in = cfg.sfd_stem_channels;
            for i in 0..n {
                let phi = has_dfd.then(|| cfg.dfd_channels[i]);
                sfd.push(SfdLayer::new(&pb.pp(format!("sfd.{i}")), c_in, cfg.sfd_channels[i], phi, cfg.collapse, groups)?);
                c_in = cfg.sfd_channels[i];
            }
        }
        let mut finals = Vec::new();
        if has_tcfe {
            finals.push((Branch::Tcfe, cfg.tcfe_channels[n - 1]));
        }
        if has_dfd {
            finals.push((Branch::Dfd, cfg.dfd_channels[n - 1]));
        }
        if has_sfd {
            finals.push((Branch::Sfd, cfg.sfd_channels[n - 1]));
        }
        let fusion = FusionHead::new(&pb.pp("fusion"), &finals, cfg.fusion_channels, cfg.collapse, groups)?;
        Ok(Self { cfg: cfg.clone(), feature_dim, branches, tcfe, dfd, sfd_stem, sfd, fusion })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn branches(&self) -> BranchSet {
        self.branches
    }

    fn check_input(&self, f: &FeatureVolume) -> Result<()> {
        let (_, _, _, c) = f.dims();
        if c != self.feature_dim {
            return Err(Error::ShapeMismatch(format!("decoder expects {}-channel features, got {c}", self.feature_dim)));
        }
        Ok(())
    }

    /// TCFE layer `i` (0-based).
    pub fn tcfe_layer(&self, input: &FeatureVolume, i: usize) -> Result<FeatureVolume> {
        let layer = self.tcfe.get(i).ok_or_else(|| Error::Config(format!("no TCFE layer {i}")))?;
        FeatureVolume::new(layer.forward(input.data())?, Provenance::BranchInternal)
    }

    /// DFD layer `i` (0-based). `theta` is fused for `i >= 1` when given;
    /// layer 0 takes no attention-branch input.
    pub fn dfd_layer(&self, prev: &FeatureVolume, theta: Option<&FeatureVolume>, i: usize) -> Result<FeatureVolume> {
        let layer = self.dfd.get(i).ok_or_else(|| Error::Config(format!("no DFD layer {i}")))?;
        let (t, h, w, _) = prev.dims();
        let step = self.cfg.dfd_step(i, (t, h, w))?;
        let theta = match theta {
            Some(_) if !layer.has_fusion() => {
                return Err(Error::Config(format!("DFD layer {i} takes no attention-branch input")));
            }
            other => other.map(|v| v.data()),
        };
        FeatureVolume::new(layer.forward(prev.data(), theta, step)?, Provenance::BranchInternal)
    }

    /// Collapsed encoder features entering the static branch.
    pub fn sfd_stem(&self, f: &FeatureVolume) -> Result<FeatureVolume> {
        let stem = self.sfd_stem.as_ref().ok_or_else(|| Error::Config("SFD branch not built".into()))?;
        FeatureVolume::new(stem.forward(f.data())?, Provenance::BranchInternal)
    }

    /// SFD layer `i` (0-based); output grid is the input grid times the
    /// layer's spatial scale.
    pub fn sfd_layer(&self, prev: &FeatureVolume, phi: Option<&FeatureVolume>, i: usize) -> Result<FeatureVolume> {
        let layer = self.sfd.get(i).ok_or_else(|| Error::Config(format!("no SFD layer {i}")))?;
        let (_, h, w, _) = prev.dims();
        let s = self.cfg.dfd_spatial_scale[i];
        FeatureVolume::new(layer.forward(prev.data(), phi.map(|p| p.data()), h * s, w * s)?, Provenance::BranchInternal)
    }

    /// Late fusion of the last feature of each given branch.
    pub fn fuse(
        &self,
        theta_n: Option<&FeatureVolume>,
        phi_n: Option<&FeatureVolume>,
        gamma_n: Option<&FeatureVolume>,
        grid: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<SaliencyMap> {
        let mut parts = Vec::new();
        if let Some(t) = theta_n {
            parts.push((Branch::Tcfe, t.data()));
        }
        if let Some(p) = phi_n {
            parts.push((Branch::Dfd, p.data()));
        }
        if let Some(g) = gamma_n {
            parts.push((Branch::Sfd, g.data()));
        }
        SaliencyMap::new(self.fusion.forward(&parts, grid, out_hw)?)
    }

    /// Runs every built branch and fuses them into an `out_hw` map.
    pub fn decode(&self, f: &FeatureVolume, out_hw: (usize, usize)) -> Result<(SaliencyMap, BranchFeatures)> {
        self.decode_branches(f, self.branches, out_hw)
    }

    /// Decodes with only `active` branches; cross-branch terms whose source
    /// is inactive are dropped.
    pub fn ablation_decode(&self, f: &FeatureVolume, active: BranchSet, out_hw: (usize, usize)) -> Result<SaliencyMap> {
        Ok(self.decode_branches(f, active, out_hw)?.0)
    }

    fn decode_branches(&self, f: &FeatureVolume, active: BranchSet, out_hw: (usize, usize)) -> Result<(SaliencyMap, BranchFeatures)> {
        if active.is_empty() {
            return Err(Error::Config("at least one decoder branch must be active".into()));
        }
        if !active.is_subset_of(self.branches) {
            return Err(Error::Config(format!("branches {active} requested but decoder holds only {}", self.branches)));
        }
        self.check_input(f)?;
        let n = self.cfg.num_layers;
        let (_, h, w, _) = f.dims();
        let mut feats = BranchFeatures::default();

        if active.contains(Branch::Tcfe) {
            let mut prev = f.clone();
            for i in 0..n {
                let next = self.tcfe_layer(&prev, i)?;
                feats.theta.push(next.clone());
                prev = next;
            }
        }
        if active.contains(Branch::Dfd) {
            let mut prev = f.clone();
            for i in 0..n {
                let theta = if i > 0 { feats.theta.get(i) } else { None };
                let next = self.dfd_layer(&prev, theta, i)?;
                feats.phi.push(next.clone());
                prev = next;
            }
        }
        if active.contains(Branch::Sfd) {
            let mut prev = self.sfd_stem(f)?;
            for i in 0..n {
                let next = self.sfd_layer(&prev, feats.phi.get(i), i)?;
                feats.gamma.push(next.clone());
                prev = next;
            }
        }
        let grid = self.cfg.output_grid(h, w);
        let map = self.fuse(feats.theta.last(), feats.phi.last(), feats.gamma.last(), grid, out_hw)?;
        Ok((map, feats))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny_cfg(n: usize, frames: usize) -> DecoderConfig {
        DecoderConfig {
            tcfe_channels: vec![8; n],
            tcfe_heads: 2,
            window_size: [1, 2, 2],
            dfd_channels: vec![4; n],
            sfd_stem_channels: 4,
            sfd_channels: vec![4; n],
            fusion_channels: 4,
            norm_groups: 2,
            ..DecoderConfig::with_layers(n, frames)
        }
    }

    fn features(t: usize, h: usize, w: usize, c: usize, dtype: DType) -> FeatureVolume {
        let x = Tensor::randn(0f64, 1.0, (t, h, w, c), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        FeatureVolume::new(x, Provenance::Encoded).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn branch_set_parsing_and_labels() {
        let s: BranchSet = "dfd+SFD".parse().unwrap();
        assert_eq!(s.to_string(), "DFD+SFD");
        assert_eq!(BranchSet::FULL.to_string(), "TCFE+DFD+SFD");
        assert!("".parse::<BranchSet>().is_err());
        assert!("TCFE,XYZ".parse::<BranchSet>().is_err());
        assert_eq!(BranchSet::ablation_matrix().len(), 7);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = DecoderConfig::default();
        cfg.validate().unwrap();
        cfg.dfd_temporal_schedule = vec![4, 8, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = DecoderConfig::default();
        cfg.tcfe_channels = vec![16, 32, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = DecoderConfig::default();
        cfg.sfd_channels.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_schedule_matches_sixteen_frames() {
        assert_eq!(DecoderConfig::halving_schedule(3, 16), vec![8, 4, 1]);
        assert_eq!(DecoderConfig::halving_schedule(1, 16), vec![1]);
        assert_eq!(DecoderConfig::halving_schedule(2, 8), vec![4, 1]);
    }

    #[test]
    fn first_dfd_layer_shape() {
        let cfg = DecoderConfig { dfd_channels: vec![8, 4, 4], ..tiny_cfg(3, 16) };
        let pb = ParamBuilder::new(1, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 16, BranchSet::FULL).unwrap();
        let f = features(16, 4, 4, 16, DType::F32);
        let phi1 = dec.dfd_layer(&f, None, 0).unwrap();
        assert_eq!(phi1.dims(), (8, 8, 8, 8));
    }

    #[test]
    fn zero_theta_leaves_local_transform_unchanged() {
        let cfg = tiny_cfg(2, 4);
        let pb = ParamBuilder::new(2, DType::F64, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let f = features(4, 2, 2, 8, DType::F64);
        let phi1 = dec.dfd_layer(&f, None, 0).unwrap();
        let zero = FeatureVolume::new(Tensor::zeros((4, 2, 2, 8), DType::F64, &Device::Cpu).unwrap(), Provenance::BranchInternal).unwrap();
        let with_zero = dec.dfd_layer(&phi1, Some(&zero), 1).unwrap();
        let local = dec.dfd_layer(&phi1, None, 1).unwrap();
        assert_eq!(max_diff(with_zero.data(), local.data()), 0.0);
        let theta = features(4, 2, 2, 8, DType::F64);
        let with_theta = dec.dfd_layer(&phi1, Some(&theta), 1).unwrap();
        assert!(max_diff(with_theta.data(), local.data()) > 0.0);
    }

    #[test]
    fn first_dfd_layer_refuses_theta() {
        let cfg = tiny_cfg(2, 4);
        let pb = ParamBuilder::new(2, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let f = features(4, 2, 2, 8, DType::F32);
        assert!(dec.dfd_layer(&f, Some(&f), 0).is_err());
    }

    #[test]
    fn unreachable_schedule_is_a_config_error() {
        let cfg = DecoderConfig { dfd_temporal_schedule: vec![4, 1], ..tiny_cfg(2, 9) };
        let pb = ParamBuilder::new(2, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let f = features(9, 2, 2, 8, DType::F32);
        assert!(matches!(dec.decode(&f, (8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn sfd_requires_single_step_input() {
        let cfg = tiny_cfg(1, 2);
        let pb = ParamBuilder::new(2, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let bad = features(2, 2, 2, 4, DType::F32);
        assert!(matches!(dec.sfd_layer(&bad, None, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn time_constant_phi_collapses_to_projection_of_a_slice() {
        let cfg = tiny_cfg(1, 4);
        let pb = ParamBuilder::new(4, DType::F64, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let slice = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let phi = Tensor::cat(&[&slice; 3], 0).unwrap();
        let tau = dec.sfd[0].tau().unwrap();
        let collapsed = tau.forward(&phi).unwrap();
        let projected = tau.project(&slice).unwrap();
        assert!(max_diff(&collapsed, &projected) < 1e-12);
    }

    #[test]
    fn decode_shapes_and_range() {
        for n in 1..=3 {
            let cfg = tiny_cfg(n, 4);
            let pb = ParamBuilder::new(7, DType::F32, &Device::Cpu);
            let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
            let f = features(4, 2, 2, 8, DType::F32);
            let (map, feats) = dec.decode(&f, (32, 32)).unwrap();
            assert_eq!(map.dims(), (32, 32));
            assert_eq!((feats.theta.len(), feats.phi.len(), feats.gamma.len()), (n, n, n));
            for th in &feats.theta {
                let (t, h, w, _) = th.dims();
                assert_eq!((t, h, w), (4, 2, 2));
            }
            let v = map.to_array().unwrap();
            assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
    }

    #[test]
    fn full_ablation_equals_decode() {
        let cfg = tiny_cfg(2, 4);
        let pb = ParamBuilder::new(9, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let f = features(4, 2, 2, 8, DType::F32);
        let (a, _) = dec.decode(&f, (16, 16)).unwrap();
        let b = dec.ablation_decode(&f, BranchSet::FULL, (16, 16)).unwrap();
        assert_eq!(max_diff(a.tensor(), b.tensor()), 0.0);
        let single = dec.ablation_decode(&f, "TCFE".parse().unwrap(), (16, 16)).unwrap();
        assert_eq!(single.dims(), (16, 16));
    }

    #[test]
    fn ablation_outside_built_branches_fails() {
        let cfg = tiny_cfg(1, 4);
        let pb = ParamBuilder::new(9, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, "DFD".parse().unwrap()).unwrap();
        let f = features(4, 2, 2, 8, DType::F32);
        assert!(dec.ablation_decode(&f, BranchSet::FULL, (8, 8)).is_err());
        assert!(dec.ablation_decode(&f, "DFD".parse().unwrap(), (8, 8)).is_ok());
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let cfg = tiny_cfg(1, 4);
        let pb = ParamBuilder::new(9, DType::F32, &Device::Cpu);
        let dec = Decoder::new(&pb, &cfg, 8, BranchSet::FULL).unwrap();
        let f = features(4, 2, 2, 6, DType::F32);
        assert!(matches!(dec.decode(&f, (8, 8)), Err(Error::ShapeMismatch(_))));
    }
}
