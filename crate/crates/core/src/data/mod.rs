//! Dataset indexing, frame decoding and training-window construction.
//!
//! On-disk layout, one directory per video:
//!
//! ```text
//! <root>/<split>/<video_id>/frames/00001.png
//! <root>/<split>/<video_id>/maps/00001.png       8-bit density map
//! <root>/<split>/<video_id>/fixations/00001.png  binary fixation map
//! ```
//!
//! Frame files are numbered from 1, contiguously. The test split may omit
//! `maps/` and `fixations/`.

pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::VideoClip;
use crate::error::{Error, Result};
use crate::losses::GroundTruthMap;
use crate::metrics::FixationMap;
use crate::resample;

pub use synth::{synth_dataset, SynthMeta, SynthSpec};

pub const FRAMES_DIR: &str = "frames";
pub const MAPS_DIR: &str = "maps";
pub const FIXATIONS_DIR: &str = "fixations";

/// File name of 1-based frame `number`.
pub fn frame_file_name(number: usize) -> String {
    format!("{number:05}.png")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Files of one video. `maps` and `fixations` are empty for unannotated videos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub maps: Vec<PathBuf>,
    pub fixations: Vec<PathBuf>,
}

impl VideoEntry {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn is_annotated(&self) -> bool {
        !self.maps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

impl DatasetIndex {
    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frame_count()).sum()
    }
}

/// Sorted frame numbers of the `%05d.png` files in `dir`, with any
/// non-conforming names reported into `issues`.
fn numbered_files(dir: &Path, issues: &mut Vec<String>) -> Result<BTreeSet<usize>> {
    let mut numbers = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        match name.strip_suffix(".png").filter(|s| s.len() == 5).and_then(|s| s.parse::<usize>().ok()) {
            Some(n) if n >= 1 => {
                numbers.insert(n);
            }
            _ => issues.push(format!("{}: unexpected file name", dir.join(&name).display())),
        }
    }
    Ok(numbers)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Indexes `<root>/<split>`. The result is sorted by video id. Every layout
/// problem (gaps in numbering, annotation counts that disagree with the
/// frames, stray files) is collected and reported together. A split with no
/// videos yields an empty index and a warning.
pub fn index_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::io(&split_dir, std::io::Error::new(std::io::ErrorKind::NotFound, "split directory not found")));
    }
    let mut issues = Vec::new();
    let mut videos = Vec::new();
    for id in sorted_subdirs(&split_dir)? {
        let vdir = split_dir.join(&id);
        let frames_dir = vdir.join(FRAMES_DIR);
        if !frames_dir.is_dir() {
            issues.push(format!("video {id}: missing {FRAMES_DIR}/ directory"));
            continue;
        }
        let frames = numbered_files(&frames_dir, &mut issues)?;
        let n = frames.len();
        if let Some(gap) = (1..=n).find(|k| !frames.contains(k)) {
            issues.push(format!("video {id}: {FRAMES_DIR}/{} is missing", frame_file_name(gap)));
            continue;
        }
        if n == 0 {
            issues.push(format!("video {id}: no frames"));
            continue;
        }
        let mut annotations = Vec::new();
        for sub in [MAPS_DIR, FIXATIONS_DIR] {
            let dir = vdir.join(sub);
            if !dir.is_dir() {
                if split != Split::Test {
                    issues.push(format!("video {id}: missing {sub}/ directory"));
                }
                annotations.push(None);
                continue;
            }
            let have = numbered_files(&dir, &mut issues)?;
            for k in (1..=n).filter(|k| !have.contains(k)) {
                issues.push(format!("video {id}: {sub}/{} is missing", frame_file_name(k)));
            }
            for k in have.iter().filter(|k| **k > n) {
                issues.push(format!("video {id}: {sub}/{} has no matching frame", frame_file_name(*k)));
            }
            annotations.push(Some(dir));
        }
        let paths = |dir: &Path| (1..=n).map(|k| dir.join(frame_file_name(k))).collect::<Vec<_>>();
        let (maps, fixations) = match (&annotations[0], &annotations[1]) {
            (Some(m), Some(f)) => (paths(m), paths(f)),
            (None, None) => (Vec::new(), Vec::new()),
            _ => {
                issues.push(format!("video {id}: has only one of {MAPS_DIR}/ and {FIXATIONS_DIR}/"));
                (Vec::new(), Vec::new())
            }
        };
        videos.push(VideoEntry { id, frames: paths(&frames_dir), maps, fixations });
    }
    if !issues.is_empty() {
        return Err(Error::Itemized(issues));
    }
    if videos.is_empty() {
        log::warn!("no videos found under {}", split_dir.display());
    }
    Ok(DatasetIndex { split, videos })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8())
}

/// 8-bit density map as values in `[0, 1]`.
pub fn read_density(path: &Path) -> Result<Array2<f64>> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0))
}

/// Binary fixation image: any nonzero pixel is a fixation.
pub fn read_fixations(path: &Path) -> Result<FixationMap> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    Ok(FixationMap::new(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32).0[0] > 0)))
}

/// Writes `map` as an 8-bit image after rescaling it to span `[0, 255]`
/// (a constant map is written as zeros).
pub fn write_map_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let q = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 0.0 };
        image::Luma([q as u8])
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Bilinear resize to `size = (H, W)` and scaling to `[0, 1]`, interleaved
/// `[H, W, 3]`.
pub fn preprocess_frame(img: &RgbImage, size: (usize, usize)) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let raw: Vec<f32> = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    resample::resize_hwc(&raw, h as usize, w as usize, 3, size.0, size.1)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Stacks frames into a clip at `size`. Pixel standardisation happens inside
/// the encoder, so clips keep their `[0, 1]` range.
pub fn preprocess(images: &[RgbImage], size: (usize, usize), frame_indices: Vec<usize>) -> Result<VideoClip> {
    let mut data = Vec::with_capacity(images.len() * size.0 * size.1 * 3);
    for img in images {
        data.extend(preprocess_frame(img, size));
    }
    VideoClip::from_vec(data, images.len(), size.0, size.1, frame_indices)
}

/// Per-channel mean and standard deviation of `[0, 1]` pixels over frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Standardization {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Accumulates statistics over every given frame.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let (mut sum, mut sq, mut n) = ([0f64; 3], [0f64; 3], 0usize);
        for f in frames {
            for px in f.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mut out = Self::identity();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / n as f64 - m * m).max(0.0).sqrt() as f32).max(1e-3);
        }
        out
    }
}

/// A video decoded at model resolution, with annotations when available.
#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    pub size: (usize, usize),
    /// Interleaved `[H, W, 3]` frames in `[0, 1]`.
    pub frames: Vec<Vec<f32>>,
    /// Density maps at model resolution (training targets).
    pub targets: Vec<GroundTruthMap>,
    /// Density maps at their stored resolution (scoring references).
    pub maps: Vec<Array2<f64>>,
    pub fixations: Vec<FixationMap>,
}

impl Video {
    pub fn load(entry: &VideoEntry, size: (usize, usize)) -> Result<Self> {
        let frames = entry.frames.iter().map(|p| Ok(preprocess_frame(&read_rgb(p)?, size))).collect::<Result<Vec<_>>>()?;
        let maps = entry.maps.iter().map(|p| read_density(p)).collect::<Result<Vec<_>>>()?;
        let fixations = entry.fixations.iter().map(|p| read_fixations(p)).collect::<Result<Vec<_>>>()?;
        let targets = maps
            .iter()
            .zip(&entry.maps)
            .map(|(m, p)| {
                let r = resample::resize_map(m, size.0, size.1).mapv(|v| v.max(0.0) as f32);
                GroundTruthMap::new(r).map_err(|e| Error::format(p, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id: entry.id.clone(), size, frames, targets, maps, fixations })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        !self.targets.is_empty()
    }

    /// Clip of `window` frames ending at `end`, reversal-padded at the start.
    pub fn clip(&self, end: usize, window: usize) -> Result<VideoClip> {
        let idx = window_indices(self.len(), end, window)?;
        let mut data = Vec::with_capacity(window * self.size.0 * self.size.1 * 3);
        for &i in &idx {
            data.extend_from_slice(&self.frames[i]);
        }
        VideoClip::from_vec(data, window, self.size.0, self.size.1, idx)
    }
}

/// Loads every video of an index at model resolution.
pub fn load_videos(index: &DatasetIndex, size: (usize, usize)) -> Result<Vec<Video>> {
    index.videos.iter().map(|e| Video::load(e, size)).collect()
}

/// Source frames for the window of length `window` ending at `end` in a
/// video of `len` frames. Slots before the video start mirror it without
/// repeating frame 0: the slot that would hold frame `-k` takes frame `k`
/// (clamped to the last frame for very short videos).
pub fn window_indices(len: usize, end: usize, window: usize) -> Result<Vec<usize>> {
    if end >= len {
        return Err(Error::Precondition(format!("window end {end} outside a {len}-frame video")));
    }
    if window == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    let end = end as isize;
    Ok((0..window as isize)
        .map(|j| {
            let s = end - (window as isize - 1) + j;
            if s >= 0 {
                s as usize
            } else {
                ((-s) as usize).min(len - 1)
            }
        })
        .collect())
}

/// A training window and the annotations of its last frame.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub video_id: String,
    pub clip: VideoClip,
    pub target: GroundTruthMap,
    pub fixations: FixationMap,
    /// Index of the frame the target belongs to (the clip's last frame).
    pub frame: usize,
}

pub fn make_window(video: &Video, end: usize, window: usize) -> Result<TrainingSample> {
    if !video.is_annotated() {
        return Err(Error::Precondition(format!("video {} has no annotations", video.id)));
    }
    let clip = video.clip(end, window)?;
    Ok(TrainingSample {
        video_id: video.id.clone(),
        clip,
        target: video.targets[end].clone(),
        fixations: video.fixations[end].clone(),
        frame: end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn touch_png(path: &Path, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        GrayImage::from_pixel(4, 4, image::Luma([value])).save(path).unwrap();
    }

    fn fake_video(root: &Path, split: &str, id: &str, n: usize) {
        for k in 1..=n {
            for sub in [FRAMES_DIR, MAPS_DIR, FIXATIONS_DIR] {
                touch_png(&root.join(split).join(id).join(sub).join(frame_file_name(k)), 200);
            }
        }
    }

    #[test]
    fn window_without_padding() {
        assert_eq!(window_indices(20, 15, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(window_indices(20, 19, 16).unwrap(), (4..20).collect::<Vec<_>>());
    }

    #[test]
    fn window_reversal_padding() {
        assert_eq!(window_indices(10, 0, 4).unwrap(), vec![3, 2, 1, 0]);
        // slot holding frame -1 takes frame 1
        assert_eq!(window_indices(3, 2, 4).unwrap(), vec![1, 0, 1, 2]);
        assert_eq!(window_indices(1, 0, 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(window_indices(2, 0, 4).unwrap(), vec![1, 1, 1, 0]);
        assert!(window_indices(3, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn windows_stay_inside_video(len in 1usize..30, end_off in 0usize..30, window in 1usize..20) {
            let end = end_off % len;
            let idx = window_indices(len, end, window).unwrap();
            prop_assert_eq!(idx.len(), window);
            prop_assert_eq!(*idx.last().unwrap(), end);
            prop_assert!(idx.iter().all(|i| *i < len));
            if end + 1 >= window {
                prop_assert!(idx.windows(2).all(|p| p[1] == p[0] + 1));
            }
        }
    }

    #[test]
    fn index_counts_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        fake_video(dir.path(), "train", "b", 3);
        fake_video(dir.path(), "train", "a", 2);
        let idx = index_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(idx.videos.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(idx.videos[1].frame_count(), 3);
        assert_eq!(idx.videos[1].maps.len(), 3);
        assert_eq!(idx, index_dataset(dir.path(), Split::Train).unwrap());
    }

    #[test]
    fn index_itemizes_missing_annotations() {
        let dir = tempfile::tempdir().unwrap();
        fake_video(dir.path(), "val", "v1", 4);
        fs::remove_file(dir.path().join("val/v1/maps/00003.png")).unwrap();
        fs::remove_file(dir.path().join("val/v1/fixations/00001.png")).unwrap();
        match index_dataset(dir.path(), Split::Val) {
            Err(Error::Itemized(items)) => {
                assert_eq!(items.len(), 2);
                assert!(items.iter().any(|s| s.contains("maps/00003.png")));
                assert!(items.iter().any(|s| s.contains("fixations/00001.png")));
            }
            other => panic!("expected itemized error, got {other:?}"),
        }
    }

    #[test]
    fn empty_split_is_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("test")).unwrap();
        assert!(index_dataset(dir.path(), Split::Test).unwrap().videos.is_empty());
        assert!(index_dataset(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn test_split_may_lack_annotations() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("test/x/frames/00001.png"), 10);
        let idx = index_dataset(dir.path(), Split::Test).unwrap();
        assert!(!idx.videos[0].is_annotated());
    }

    #[test]
    fn preprocess_resizes_and_scales() {
        let img = RgbImage::from_pixel(64, 36, image::Rgb([255, 51, 0]));
        let clip = preprocess(&[img.clone(), img], (32, 32), vec![0, 1]).unwrap();
        assert_eq!(clip.dims(), (2, 32, 32));
        let v = clip.frames().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for px in v.chunks(3) {
            assert!((px[0] - 1.0).abs() < 1e-6 && (px[1] - 0.2).abs() < 1e-6 && px[2] == 0.0);
        }
    }

    #[test]
    fn preprocess_same_size_is_identity() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        let out = preprocess_frame(&img, (8, 8));
        let expected: Vec<f32> = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn undecodable_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        match read_rgb(&p) {
            Err(Error::Image { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn map_png_round_trip_is_rescaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m/00001.png");
        let m = ndarray::array![[0.2, 0.4], [0.6, 0.2]];
        write_map_png(&p, &m).unwrap();
        let back = read_density(&p).unwrap();
        assert_eq!(back[[0, 0]], 0.0);
        assert_eq!(back[[1, 0]], 1.0);
        assert!((back[[0, 1]] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn standardization_of_known_pixels() {
        let f = [0.0f32, 0.5, 1.0, 1.0, 0.5, 1.0];
        let s = Standardization::from_frames([&f[..]]);
        assert_eq!(s.mean, [0.5, 0.5, 1.0]);
        assert_eq!(s.std[0], 0.5);
        assert_eq!(s.std[2], 1e-3);
    }
}
