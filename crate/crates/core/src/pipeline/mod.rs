//! Training, sliding-window inference, in-memory evaluation and the
//! ablation runner.

mod ablation;
mod train;

use std::path::{Path, PathBuf};

use crate::data::{Split, Video};
use crate::decoder::SaliencyMap;
use crate::encoder::import_features;
use crate::error::{Error, Result};
use crate::metrics::report::score_frame;
use crate::metrics::{EvalOptions, MetricsReport, PoolSpec, ShufflePool};
use crate::model::SalFoM;
use crate::resample;

pub use ablation::{run_ablation, AblationOptions, AblationRow, AblationSpec, AblationTable, EncoderVariant};
pub use train::{train, validation_scores, StepRecord, StopMetric, TrainConfig, TrainLog, ValidationRecord};

/// Extension of per-window feature files.
pub const FEATURE_EXT: &str = "sfeat";

/// Where the decoder's input features come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    /// The model's own encoder, run on the frame window.
    Encoder,
    /// Pre-extracted volumes under `<root>/<split>/<video_id>/%05d.sfeat`,
    /// one per window, numbered by the window's last frame (1-based).
    Imported(PathBuf),
}

pub fn feature_path(root: &Path, split: Split, video_id: &str, end: usize) -> PathBuf {
    root.join(split.dir_name()).join(video_id).join(format!("{:05}.{FEATURE_EXT}", end + 1))
}

/// Map for frame `end` of `video`, predicted from the window ending there.
pub fn predict_frame(model: &SalFoM, source: &FeatureSource, split: Split, video: &Video, end: usize) -> Result<SaliencyMap> {
    match source {
        FeatureSource::Encoder => model.forward(&video.clip(end, model.config().encoder.window_frames)?),
        FeatureSource::Imported(root) => {
            if end >= video.len() {
                return Err(Error::Precondition(format!("frame {end} outside a {}-frame video", video.len())));
            }
            let f = import_features(feature_path(root, split, &video.id, end), &model.config().encoder)?;
            model.decode_features(&f)
        }
    }
}

/// One map per frame; frame `k` is predicted from the window ending at `k`,
/// reversal-padded near the start.
pub fn sliding_window_predict(model: &SalFoM, video: &Video) -> Result<Vec<SaliencyMap>> {
    if video.is_empty() {
        return Err(Error::Precondition(format!("video {} has no frames", video.id)));
    }
    (0..video.len()).map(|k| predict_frame(model, &FeatureSource::Encoder, Split::Test, video, k)).collect()
}

/// Scores the model on every `stride`-th frame of annotated `videos`.
/// Predictions are resized to each annotation's resolution; shuffled-AUC
/// negatives follow `options`.
pub fn evaluate_model(
    model: &SalFoM,
    source: &FeatureSource,
    split: Split,
    videos: &[Video],
    stride: usize,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        if !video.is_annotated() {
            issues.push(format!("video {}: no annotations", video.id));
            continue;
        }
        let others = ShufflePool::from_maps(videos.iter().enumerate().filter(|(j, _)| *j != vi).flat_map(|(_, v)| &v.fixations));
        for end in (0..video.len()).step_by(stride.max(1)) {
            let gt = &video.maps[end];
            let pred = predict_frame(model, source, split, video, end)?.to_array()?;
            let pred = resample::resize_map(&pred, gt.dim().0, gt.dim().1);
            let pool = match options.pool {
                PoolSpec::OtherVideos => others.clone(),
                PoolSpec::OtherFrames => {
                    let mut p = others.clone();
                    video.fixations.iter().enumerate().filter(|(k, _)| *k != end).for_each(|(_, f)| p.extend(f));
                    p
                }
            };
            let seed = options.seed.wrapping_add(records.len() as u64);
            records.push(score_frame(&video.id, end + 1, &pred, gt, &video.fixations[end], &pool, seed, options.n_splits)?);
        }
    }
    Ok(MetricsReport::from_records(records, *options, issues))
}
