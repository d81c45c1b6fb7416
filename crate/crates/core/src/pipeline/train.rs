use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict_frame, FeatureSource};
use crate::data::{Split, Video};
use crate::error::{Error, Result};
use crate::losses::{training_loss, LossTerms};
use crate::model::SalFoM;
use crate::tensor_io;

/// Quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    /// Mean validation `KL + CC` loss; lower is better.
    ValLoss,
    /// Mean validation CC of the prediction; higher is better.
    ValCc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam step size; moments use the default coefficients, no weight decay.
    pub lr: f64,
    /// Windows whose losses are averaged into one update.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validations.
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub stop_metric: StopMetric,
    /// Validate on every `val_stride`-th frame of each validation video.
    pub val_stride: usize,
    pub seed: u64,
    /// Train only the decoder.
    pub freeze_encoder: bool,
    /// Where the offending batch is written when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 1,
            max_steps: 1000,
            val_every: 100,
            patience: 5,
            stop_metric: StopMetric::ValLoss,
            val_stride: 1,
            seed: 0,
            freeze_encoder: false,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            problems.push(format!("train.lr must be a finite non-negative number, got {}", self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("val_every", self.val_every),
            ("patience", self.patience),
            ("val_stride", self.val_stride),
        ] {
            if v == 0 {
                problems.push(format!("train.{name} must be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub kl: f64,
    /// `None` when the correlation term was skipped for a flat target.
    pub cc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub loss: f64,
    pub cc: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Step whose parameters the model holds after training.
    pub best_step: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per line: steps first, then validations.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::json!({ "kind": "step", "record": s }).to_string());
            out.push('\n');
        }
        for v in &self.validations {
            out.push_str(&serde_json::json!({ "kind": "validation", "record": v }).to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Training windows in a fixed seeded order: all `(video, frame)` pairs,
/// reshuffled each epoch.
struct Schedule {
    pairs: Vec<(usize, usize)>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Schedule {
    fn new(videos: &[Video], seed: u64) -> Self {
        let pairs = videos.iter().enumerate().flat_map(|(v, vid)| (0..vid.len()).map(move |k| (v, k))).collect();
        let mut s = Self { pairs, pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.pairs.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> (usize, usize) {
        if self.pos == self.pairs.len() {
            self.pairs.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.pairs[self.pos - 1]
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Writes the window that produced a non-finite value and returns the error
/// to abort with.
fn dump_batch(cfg: &TrainConfig, model: &SalFoM, video: &Video, end: usize, step: usize, what: &str) -> Error {
    let window = model.config().encoder.window_frames;
    let indices = crate::data::window_indices(video.len(), end, window).unwrap_or_default();
    let summary = format!("step {step}: {what} on video {} frame {} (window {:?})", video.id, end + 1, indices);
    if let Some(dir) = &cfg.dump_dir {
        let dir = dir.join(format!("nonfinite-step-{step}"));
        let written = (|| -> Result<()> {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let p = dir.join("batch.txt");
            fs::write(&p, format!("{summary}\n")).map_err(|e| Error::io(&p, e))?;
            let clip = video.clip(end, window)?;
            let p = dir.join("clip.bin");
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            tensor_io::write_record(&mut f, clip.frames())?;
            if let Some(t) = video.targets.get(end) {
                let p = dir.join("target.bin");
                let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                tensor_io::write_record(&mut f, &t.to_tensor(candle_core::DType::F32, &candle_core::Device::Cpu)?)?;
            }
            Ok(())
        })();
        match written {
            Ok(()) => log::error!("{summary}; batch written to {}", dir.display()),
            Err(e) => log::error!("{summary}; could not write the batch: {e}"),
        }
    }
    Error::NonFinite(summary)
}

fn sample_loss(
    model: &SalFoM,
    source: &FeatureSource,
    split: Split,
    video: &Video,
    end: usize,
) -> Result<LossTerms> {
    let map = predict_frame(model, source, split, video, end)?;
    let target = video.targets[end].to_tensor(model.params().dtype(), model.params().device())?;
    training_loss(map.tensor(), &target)
}

/// Mean loss and CC over the validation windows.
pub fn validation_scores(model: &SalFoM, source: &FeatureSource, videos: &[Video], stride: usize) -> Result<(f64, f64)> {
    let (mut loss, mut cc, mut n) = (0.0, 0.0, 0usize);
    for v in videos {
        for end in (0..v.len()).step_by(stride) {
            let terms = sample_loss(model, source, Split::Val, v, end)?;
            loss += scalar(&terms.total)?;
            cc += -terms.cc.unwrap_or(0.0);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Precondition("no validation windows".into()));
    }
    Ok((loss / n as f64, cc / n as f64))
}

/// Trains `model` in place with Adam on windows of `train_videos`.
///
/// Every `val_every` steps (and after the last step) the model is scored on
/// `val_videos`; the best parameters are kept and restored at the end, and
/// training stops after `patience` validations without improvement. Without
/// validation videos the final parameters are kept. The run is a pure
/// function of the model's initial parameters, the data and `cfg`.
pub fn train(
    model: &SalFoM,
    train_videos: &[Video],
    val_videos: &[Video],
    cfg: &TrainConfig,
    source: &FeatureSource,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_videos.is_empty() || train_videos.iter().any(|v| !v.is_annotated() || v.is_empty()) {
        return Err(Error::Precondition("training needs at least one annotated, non-empty video".into()));
    }
    if val_videos.iter().any(|v| !v.is_annotated()) {
        return Err(Error::Precondition("validation videos must be annotated".into()));
    }
    let vars = if cfg.freeze_encoder || matches!(source, FeatureSource::Imported(_)) {
        model.params().vars_with_prefix("decoder.")
    } else {
        model.params().all_vars()
    };
    let params = ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..ParamsAdamW::default() };
    let mut opt = AdamW::new(vars, params)?;
    let mut schedule = Schedule::new(train_videos, cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, std::collections::BTreeMap<String, Tensor>)> = None;
    let mut since_best = 0;

    for step in 1..=cfg.max_steps {
        let mut total: Option<Tensor> = None;
        let (mut kl, mut cc, mut cc_n) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.batch_size {
            let (vi, end) = schedule.next();
            let video = &train_videos[vi];
            let terms = match sample_loss(model, source, Split::Train, video, end) {
                Ok(t) => t,
                Err(Error::NonFinite(what)) => return Err(dump_batch(cfg, model, video, end, step, &what)),
                Err(e) => return Err(e),
            };
            let value = scalar(&terms.total)?;
            if !value.is_finite() {
                return Err(dump_batch(cfg, model, video, end, step, &format!("loss {value}")));
            }
            kl += terms.kl;
            if let Some(c) = terms.cc {
                cc += c;
                cc_n += 1;
            }
            total = Some(match total {
                Some(t) => (t + terms.total)?,
                None => terms.total,
            });
        }
        let b = cfg.batch_size as f64;
        let loss = (total.expect("batch_size >= 1") / b)?;
        let record = StepRecord { step, total: scalar(&loss)?, kl: kl / b, cc: (cc_n > 0).then(|| cc / cc_n as f64) };
        log::debug!("step {step}: loss {:.5} kl {:.5} cc {:?}", record.total, record.kl, record.cc);
        log.steps.push(record);
        opt.backward_step(&loss)?;

        if !val_videos.is_empty() && (step % cfg.val_every == 0 || step == cfg.max_steps) {
            let (val_loss, val_cc) = validation_scores(model, source, val_videos, cfg.val_stride)?;
            let key = match cfg.stop_metric {
                StopMetric::ValLoss => val_loss,
                StopMetric::ValCc => -val_cc,
            };
            let improved = best.as_ref().is_none_or(|(b, _)| key < *b);
            log::info!("step {step}: validation loss {val_loss:.5} cc {val_cc:.4}{}", if improved { " (best)" } else { "" });
            log.validations.push(ValidationRecord { step, loss: val_loss, cc: val_cc, improved });
            if improved {
                best = Some((key, model.snapshot()?));
                log.best_step = step;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    match best {
        Some((_, values)) => model.restore(&values)?,
        None => log.best_step = log.steps.len(),
    }
    Ok(log)
}
