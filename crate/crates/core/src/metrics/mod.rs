//! Fixation-prediction metrics.
//!
//! Location metrics (AUC-Judd, shuffled AUC, NSS) score a map against binary
//! fixations; distribution metrics (CC, SIM) against a continuous density.
//! All work on host-side `f64` arrays.

pub mod report;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use report::{evaluate_directory, EvalOptions, FrameRecord, MetricMeans, MetricsReport, PoolSpec, VideoSummary};

/// Negative draws averaged by [`shuffled_auc`].
pub const DEFAULT_SPLITS: usize = 100;

/// Binary map of recorded gaze hits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationMap {
    data: Array2<bool>,
    count: usize,
}

impl FixationMap {
    pub fn new(data: Array2<bool>) -> Self {
        let count = data.iter().filter(|v| **v).count();
        Self { data, count }
    }

    /// Map of size `dims` with the given `(row, col)` hits.
    pub fn from_points(dims: (usize, usize), points: &[(usize, usize)]) -> Result<Self> {
        let mut data = Array2::from_elem(dims, false);
        for &(r, c) in points {
            let cell = data
                .get_mut((r, c))
                .ok_or_else(|| Error::ShapeMismatch(format!("fixation ({r}, {c}) outside {dims:?}")))?;
            *cell = true;
        }
        Ok(Self::new(data))
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn fixation_count(&self) -> usize {
        self.count
    }

    /// Fixated `(row, col)` positions in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data.indexed_iter().filter(|(_, v)| **v).map(|(p, _)| p).collect()
    }

    fn require_fixations(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Precondition("fixation map has no fixations".into()));
        }
        Ok(())
    }
}

/// A metric value with a flag for the zero-variance fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Self { value, degenerate: false }
    }

    fn degenerate() -> Self {
        Self { value: 0.0, degenerate: true }
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("saliency map {a:?} vs reference {b:?}")));
    }
    Ok(())
}

fn check_finite(s: &Array2<f64>) -> Result<()> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency map".into()));
    }
    Ok(())
}

/// Population mean and standard deviation.
fn mean_std(s: &Array2<f64>) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.sum() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard deviation small enough to count as a constant map.
fn is_flat(std: f64, s: &Array2<f64>) -> bool {
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    std == 0.0 || std <= 1e-12 * scale
}

/// Normalized scanpath saliency: mean z-score of `s` at the fixations.
/// A constant map scores 0 with the degenerate flag set.
pub fn nss(s: &Array2<f64>, fix: &FixationMap) -> Result<Score> {
    check_dims(s.dim(), fix.dims())?;
    check_finite(s)?;
    fix.require_fixations()?;
    let (mean, std) = mean_std(s);
    if is_flat(std, s) {
        return Ok(Score::degenerate());
    }
    let total: f64 = s.iter().zip(fix.data.iter()).filter(|(_, f)| **f).map(|(v, _)| (v - mean) / std).sum();
    Ok(Score::ok(total / fix.count as f64))
}

/// ROC area with the fixated pixels as positives and every other pixel as a
/// negative. Thresholds are the distinct values `s` takes at fixations; the
/// curve is closed with `(0, 0)` and `(1, 1)` and integrated with trapezoids.
pub fn auc_judd(s: &Array2<f64>, fix: &FixationMap) -> Result<f64> {
    check_dims(s.dim(), fix.dims())?;
    check_finite(s)?;
    fix.require_fixations()?;
    let n_pos = fix.count;
    let n_neg = s.len() - n_pos;
    if n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC-Judd with every pixel fixated".into()));
    }
    let mut pos: Vec<f64> = Vec::with_capacity(n_pos);
    let mut neg: Vec<f64> = Vec::with_capacity(n_neg);
    for (v, f) in s.iter().zip(fix.data.iter()) {
        if *f { pos.push(*v) } else { neg.push(*v) }
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));

    let (mut tp_prev, mut fp_prev) = (0.0, 0.0);
    let (mut ip, mut in_) = (0, 0);
    let mut area = 0.0;
    let mut thresholds = pos.clone();
    thresholds.dedup();
    for t in thresholds {
        while ip < pos.len() && pos[ip] >= t {
            ip += 1;
        }
        while in_ < neg.len() && neg[in_] >= t {
            in_ += 1;
        }
        let (tp, fp) = (ip as f64 / n_pos as f64, in_ as f64 / n_neg as f64);
        area += (fp - fp_prev) * (tp + tp_prev) / 2.0;
        (tp_prev, fp_prev) = (tp, fp);
    }
    area += (1.0 - fp_prev) * (1.0 + tp_prev) / 2.0;
    Ok(area)
}

/// Exact ROC area between two score samples: the probability that a random
/// positive outranks a random negative, ties counting one half.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    let mut neg = neg.to_vec();
    neg.sort_by(|a, b| a.total_cmp(b));
    let mut wins = 0.0;
    for p in pos {
        let below = neg.partition_point(|n| n < p);
        let not_above = neg.partition_point(|n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Fixation locations gathered from other frames, kept in relative
/// coordinates so maps of different resolutions can share a pool.
#[derive(Debug, Clone, Default)]
pub struct ShufflePool {
    points: Vec<(f64, f64)>,
}

impl ShufflePool {
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a FixationMap>) -> Self {
        let mut pool = Self::default();
        for m in maps {
            pool.extend(m);
        }
        pool
    }

    pub fn extend(&mut self, map: &FixationMap) {
        let (h, w) = map.dims();
        self.points.extend(map.points().into_iter().map(|(r, c)| ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64)));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pool entry `i` as a pixel of a `dims`-sized map.
    pub fn pixel(&self, i: usize, dims: (usize, usize)) -> (usize, usize) {
        let (y, x) = self.points[i];
        let r = ((y * dims.0 as f64) as usize).min(dims.0 - 1);
        let c = ((x * dims.1 as f64) as usize).min(dims.1 - 1);
        (r, c)
    }
}

/// Shuffled AUC: positives are the fixated values of `s`, negatives are
/// `s` sampled at pool locations. Each of `n_splits` draws takes as many
/// negatives as there are fixations, uniformly with replacement from the
/// pool (`rng.random_range(0..pool.len())` per negative, one ChaCha8 stream
/// seeded with `seed`); the exact ROC areas are averaged.
pub fn shuffled_auc(s: &Array2<f64>, fix: &FixationMap, pool: &ShufflePool, seed: u64, n_splits: usize) -> Result<f64> {
    check_dims(s.dim(), fix.dims())?;
    check_finite(s)?;
    fix.require_fixations()?;
    if pool.is_empty() {
        return Err(Error::Config("shuffled AUC needs a non-empty pool of other fixations".into()));
    }
    if n_splits == 0 {
        return Err(Error::Config("shuffled AUC needs at least one split".into()));
    }
    let pos: Vec<f64> = fix.points().into_iter().map(|p| s[p]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_splits {
        let neg: Vec<f64> = (0..pos.len()).map(|_| s[pool.pixel(rng.random_range(0..pool.len()), s.dim())]).collect();
        total += auc_from_scores(&pos, &neg);
    }
    Ok(total / n_splits as f64)
}

/// Pearson correlation with population moments; 0 with the degenerate flag
/// when either map is constant.
pub fn cc_metric(s: &Array2<f64>, g: &Array2<f64>) -> Result<Score> {
    check_dims(s.dim(), g.dim())?;
    check_finite(s)?;
    check_finite(g)?;
    let (ms, ss) = mean_std(s);
    let (mg, sg) = mean_std(g);
    if is_flat(ss, s) || is_flat(sg, g) {
        return Ok(Score::degenerate());
    }
    let cov = s.iter().zip(g.iter()).map(|(a, b)| (a - ms) * (b - mg)).sum::<f64>() / s.len() as f64;
    Ok(Score::ok(cov / (ss * sg)))
}

fn to_distribution(m: &Array2<f64>) -> Result<Array2<f64>> {
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Precondition("map must be finite and nonnegative".into()));
    }
    let sum = m.sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate("all-zero map".into()));
    }
    Ok(m / sum)
}

/// Histogram intersection of the two maps as distributions.
pub fn sim(s: &Array2<f64>, g: &Array2<f64>) -> Result<f64> {
    check_dims(s.dim(), g.dim())?;
    let (s, g) = (to_distribution(s)?, to_distribution(g)?);
    Ok(s.iter().zip(g.iter()).map(|(a, b)| a.min(*b)).sum())
}
