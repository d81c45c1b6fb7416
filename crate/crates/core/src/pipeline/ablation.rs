use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, FeatureSource};
use crate::config::AppConfig;
use crate::data::{Split, Video};
use crate::decoder::{BranchSet, DecoderConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::model::{ModelConfig, SalFoM};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// The configured encoder, trained jointly.
    #[default]
    ToyDefault,
    /// The configured encoder on windows of half the length.
    ReducedFrames,
    /// Features read from disk; only the decoder trains.
    ImportedFeatures,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::ToyDefault => "toy-default",
            EncoderVariant::ReducedFrames => "reduced-frames",
            EncoderVariant::ImportedFeatures => "imported-features",
        }
    }
}

/// One model variant of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub encoder: EncoderVariant,
    pub branches: BranchSet,
}

impl AblationSpec {
    pub fn branches(branches: BranchSet) -> Self {
        Self { encoder: EncoderVariant::ToyDefault, branches }
    }

    /// Full model, the three single branches and the three pairs.
    pub fn decoder_matrix() -> Vec<Self> {
        BranchSet::ablation_matrix().into_iter().map(Self::branches).collect()
    }

    /// Row label: the branch set, prefixed by the encoder variant unless it
    /// is the default one.
    pub fn label(&self) -> String {
        match self.encoder {
            EncoderVariant::ToyDefault => self.branches.to_string(),
            e => format!("{} / {}", e.name(), self.branches),
        }
    }

    /// Model configuration of this variant, derived from `base`.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.branches = self.branches;
        if self.encoder == EncoderVariant::ReducedFrames {
            let frames = (base.encoder.window_frames / 2).max(1);
            cfg.encoder.window_frames = frames;
            cfg.decoder.dfd_temporal_schedule = DecoderConfig::halving_schedule(base.decoder.num_layers, frames);
            cfg.decoder.window_size[0] = base.decoder.window_size[0].min(frames);
        }
        cfg
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    /// Root of pre-extracted features for the imported-features variant.
    pub features_root: Option<PathBuf>,
    /// Validation frame stride used when scoring.
    pub eval_stride: usize,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub spec: AblationSpec,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub sim: Option<f64>,
    pub auc_j: Option<f64>,
    /// Why the variant produced no scores.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn failed(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        writeln!(f, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}", "Variant", "CC", "NSS", "SIM", "AUC-J")?;
        for r in &self.rows {
            match &r.error {
                Some(e) => writeln!(f, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  failed: {e}", r.label, "x", "x", "x", "x")?,
                None => writeln!(
                    f,
                    "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                    r.label,
                    cell(r.cc),
                    cell(r.nss),
                    cell(r.sim),
                    cell(r.auc_j)
                )?,
            }
        }
        Ok(())
    }
}

fn run_variant(spec: &AblationSpec, base: &AppConfig, train_videos: &[Video], val_videos: &[Video], opts: &AblationOptions) -> Result<AblationRow> {
    let cfg = spec.model_config(&base.model());
    let source = match spec.encoder {
        EncoderVariant::ImportedFeatures => FeatureSource::Imported(
            opts.features_root.clone().ok_or_else(|| Error::Config("imported-features variant needs a feature directory".into()))?,
        ),
        _ => FeatureSource::Encoder,
    };
    let model = SalFoM::new(&cfg, base.train.seed)?;
    train(&model, train_videos, val_videos, &base.train, &source)?;
    let report = evaluate_model(&model, &source, Split::Val, val_videos, opts.eval_stride, &opts.eval)?;
    if report.frames.is_empty() {
        return Err(Error::Precondition("no validation frames were scored".into()));
    }
    let m = report.dataset;
    Ok(AblationRow { label: spec.label(), spec: *spec, cc: m.cc, nss: m.nss, sim: m.sim, auc_j: m.auc_j, error: None })
}

/// Trains every variant from the same seed and budget and scores it on the
/// validation videos. A failing variant becomes a row marked as failed; the
/// others are unaffected.
pub fn run_ablation(
    specs: &[AblationSpec],
    base: &AppConfig,
    train_videos: &[Video],
    val_videos: &[Video],
    opts: &AblationOptions,
) -> AblationTable {
    let rows = specs
        .iter()
        .map(|spec| {
            log::info!("ablation: training {}", spec.label());
            run_variant(spec, base, train_videos, val_videos, opts).unwrap_or_else(|e| {
                log::warn!("ablation variant {} failed: {e}", spec.label());
                AblationRow { label: spec.label(), spec: *spec, cc: None, nss: None, sim: None, auc_j: None, error: Some(e.to_string()) }
            })
        })
        .collect();
    AblationTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Branch;

    #[test]
    fn labels_and_matrix() {
        let m = AblationSpec::decoder_matrix();
        assert_eq!(m.len(), 7);
        assert_eq!(m[0].label(), "TCFE+DFD+SFD");
        assert_eq!(m[1].label(), "TCFE");
        let s = AblationSpec { encoder: EncoderVariant::ReducedFrames, branches: BranchSet::new([Branch::Dfd]).unwrap() };
        assert_eq!(s.label(), "reduced-frames / DFD");
    }

    #[test]
    fn reduced_frames_halves_window_and_schedule() {
        let base = ModelConfig::default();
        let s = AblationSpec { encoder: EncoderVariant::ReducedFrames, branches: BranchSet::FULL };
        let cfg = s.model_config(&base);
        assert_eq!(cfg.encoder.window_frames, 8);
        assert_eq!(cfg.decoder.dfd_temporal_schedule, vec![4, 2, 1]);
        cfg.validate().unwrap();
    }

    #[test]
    fn spec_parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            v: Vec<AblationSpec>,
        }
        let w: W = toml::from_str("v = [{ branches = [\"SFD\", \"DFD\"] }, { encoder = \"reduced-frames\", branches = [\"TCFE\"] }]").unwrap();
        assert_eq!(w.v[0].label(), "DFD+SFD");
        assert_eq!(w.v[1].encoder, EncoderVariant::ReducedFrames);
    }

    #[test]
    fn empty_spec_list_is_empty_table() {
        let t = run_ablation(&[], &AppConfig::default(), &[], &[], &AblationOptions::default());
        assert!(t.rows.is_empty());
        assert_eq!(t.to_string().lines().count(), 1);
    }

    #[test]
    fn failures_are_isolated_rows() {
        let specs = [AblationSpec { encoder: EncoderVariant::ImportedFeatures, branches: BranchSet::FULL }];
        let t = run_ablation(&specs, &AppConfig::desk_scale(), &[], &[], &AblationOptions::default());
        assert_eq!(t.failed().count(), 1);
        assert!(t.to_string().contains("failed"));
    }
}
