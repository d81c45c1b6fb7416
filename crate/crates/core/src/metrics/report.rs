//! Scoring a directory of predicted maps against an annotated dataset.
//!
//! Predictions are laid out as `<pred_root>/<video_id>/%05d.png`, one 8-bit
//! map per frame, matching the dataset's frame numbering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc_judd, cc_metric, nss, shuffled_auc, sim, FixationMap, ShufflePool, DEFAULT_SPLITS};
use crate::data::{frame_file_name, read_density, read_fixations, DatasetIndex};
use crate::error::{Error, Result};
use crate::resample;

/// Where shuffled-AUC negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolSpec {
    /// Fixations of every other video in the evaluated set.
    OtherVideos,
    /// Fixations of every other frame, including the same video's.
    OtherFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pool: PoolSpec,
    pub n_splits: usize,
    /// Frame `i` (in report order) draws its shuffled-AUC negatives with
    /// seed `seed + i`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { pool: PoolSpec::OtherVideos, n_splits: DEFAULT_SPLITS, seed: 0 }
    }
}

/// Scores of one frame. `None` marks a metric that is undefined there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video: String,
    /// 1-based frame number, as in the file name.
    pub frame: usize,
    pub auc_j: Option<f64>,
    pub s_auc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub auc_j: Option<f64>,
    pub s_auc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
    pub sim: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricMeans {
    fn of<'a, T: 'a>(items: &'a [T], get: impl Fn(&'a T) -> MetricMeans) -> Self {
        let all: Vec<MetricMeans> = items.iter().map(get).collect();
        Self {
            auc_j: mean(all.iter().map(|m| m.auc_j)),
            s_auc: mean(all.iter().map(|m| m.s_auc)),
            nss: mean(all.iter().map(|m| m.nss)),
            cc: mean(all.iter().map(|m| m.cc)),
            sim: mean(all.iter().map(|m| m.sim)),
        }
    }
}

impl From<&FrameRecord> for MetricMeans {
    fn from(r: &FrameRecord) -> Self {
        Self { auc_j: r.auc_j, s_auc: r.s_auc, nss: r.nss, cc: r.cc, sim: r.sim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video: String,
    pub frames: usize,
    pub means: MetricMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub options: EvalOptions,
    pub frames: Vec<FrameRecord>,
    pub videos: Vec<VideoSummary>,
    /// Mean over videos of the per-video means.
    pub dataset: MetricMeans,
    /// Problems that caused frames to be skipped.
    pub issues: Vec<String>,
}

impl MetricsReport {
    /// Aggregates frame records, grouping consecutive records by video.
    pub fn from_records(frames: Vec<FrameRecord>, options: EvalOptions, issues: Vec<String>) -> Self {
        let mut videos: Vec<VideoSummary> = Vec::new();
        let mut start = 0;
        for i in 1..=frames.len() {
            if i == frames.len() || frames[i].video != frames[start].video {
                let group = &frames[start..i];
                videos.push(VideoSummary {
                    video: group[0].video.clone(),
                    frames: group.len(),
                    means: MetricMeans::of(group, MetricMeans::from),
                });
                start = i;
            }
        }
        let dataset = MetricMeans::of(&videos, |v| v.means);
        Self { options, frames, videos, dataset, issues }
    }

    /// `true` when frames were scored and nothing was skipped.
    pub fn is_clean(&self) -> bool {
        !self.frames.is_empty() && self.issues.is_empty()
    }

    /// One JSON object per frame.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.frames {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Columns `video, frame, auc_j, s_auc, nss, cc, sim`; undefined values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.frames {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
        }
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}", "video", "frames", "AUC-J", "S-AUC", "NSS", "CC", "SIM");
        let mut row = |name: &str, n: usize, m: &MetricMeans| {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
                name,
                n,
                cell(m.auc_j),
                cell(m.s_auc),
                cell(m.nss),
                cell(m.cc),
                cell(m.sim)
            );
        };
        for v in &self.videos {
            row(&v.video, v.frames, &v.means);
        }
        row("mean of videos", self.frames.len(), &self.dataset);
        for i in &self.issues {
            let _ = writeln!(s, "skipped: {i}");
        }
        s
    }
}

/// Scores one frame against its annotations. `pred` must already be at the
/// annotation's resolution.
#[allow(clippy::too_many_arguments)]
pub fn score_frame(
    video: &str,
    frame: usize,
    pred: &ndarray::Array2<f64>,
    gt: &ndarray::Array2<f64>,
    fix: &FixationMap,
    pool: &ShufflePool,
    seed: u64,
    n_splits: usize,
) -> Result<FrameRecord> {
    let located = fix.fixation_count() > 0;
    let auc_j = if located {
        match auc_judd(pred, fix) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let s_auc = if located && !pool.is_empty() { Some(shuffled_auc(pred, fix, pool, seed, n_splits)?) } else { None };
    let nss = if located { Some(nss(pred, fix)?.value) } else { None };
    let cc = Some(cc_metric(pred, gt)?.value);
    let sim = match sim(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FrameRecord { video: video.to_string(), frame, auc_j, s_auc, nss, cc, sim })
}

fn prediction_numbers(dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_suffix(".png").and_then(|s| s.parse::<usize>().ok()) {
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Scores every prediction under `pred_root` against the annotated `gt`
/// index. Predictions are bilinearly resized to the annotation resolution.
/// Predicted frames without ground truth are skipped and listed in
/// [`MetricsReport::issues`].
pub fn evaluate_directory(pred_root: &Path, gt: &DatasetIndex, options: &EvalOptions) -> Result<MetricsReport> {
    if !pred_root.is_dir() {
        return Err(Error::io(pred_root, std::io::Error::new(std::io::ErrorKind::NotFound, "prediction directory not found")));
    }
    let mut fixations: Vec<Vec<FixationMap>> = Vec::new();
    for v in &gt.videos {
        fixations.push(v.fixations.iter().map(|p| read_fixations(p)).collect::<Result<_>>()?);
    }
    let mut issues = Vec::new();
    let mut pred_videos = Vec::new();
    for entry in fs::read_dir(pred_root).map_err(|e| Error::io(pred_root, e))? {
        let entry = entry.map_err(|e| Error::io(pred_root, e))?;
        if entry.path().is_dir() {
            pred_videos.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    pred_videos.sort();

    let mut records = Vec::new();
    for vid in pred_videos {
        let Some(vi) = gt.videos.iter().position(|v| v.id == vid) else {
            issues.push(format!("video {vid}: no ground truth"));
            continue;
        };
        let entry = &gt.videos[vi];
        if !entry.is_annotated() {
            issues.push(format!("video {vid}: ground truth has no annotations"));
            continue;
        }
        let others = ShufflePool::from_maps(fixations.iter().enumerate().filter(|(j, _)| *j != vi).flat_map(|(_, f)| f));
        for n in prediction_numbers(&pred_root.join(&vid))? {
            if n == 0 || n > entry.frame_count() {
                issues.push(format!("video {vid}: no ground truth for frame {}", frame_file_name(n)));
                continue;
            }
            let gt_map = read_density(&entry.maps[n - 1])?;
            let fix = &fixations[vi][n - 1];
            let pred = read_density(&pred_root.join(&vid).join(frame_file_name(n)))?;
            let pred = resample::resize_map(&pred, gt_map.dim().0, gt_map.dim().1);
            let pool = match options.pool {
                PoolSpec::OtherVideos => others.clone(),
                PoolSpec::OtherFrames => {
                    let mut p = others.clone();
                    for (_, f) in fixations[vi].iter().enumerate().filter(|(k, _)| *k != n - 1) {
                        p.extend(f);
                    }
                    p
                }
            };
            if pool.is_empty() {
                log::warn!("video {vid} frame {n}: shuffle pool is empty, S-AUC left undefined");
            }
            let seed = options.seed.wrapping_add(records.len() as u64);
            records.push(score_frame(&vid, n, &pred, &gt_map, fix, &pool, seed, options.n_splits)?);
        }
    }
    if records.is_empty() {
        issues.push("no predicted frames were scored".into());
    }
    Ok(MetricsReport::from_records(records, *options, issues))
}
