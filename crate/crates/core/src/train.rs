//! Training and evaluation pipelines: augment, rasterize, forward, composite
//! loss, AdamW with two parameter groups, checkpoints, and point-level mIoU.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{augment3d, augment_range, AugError, RangeSample};
use crate::config::{RunConfig, WeightMode};
use crate::kitti::{read_labeled_scan, read_scan, sequence_split, KittiError, LabelRemap, PointCloud, ScanEntry, Split, IGNORE};
use crate::loss::{total_loss, ClassWeights, LossError, LossTerms};
use crate::metrics::ConfusionMatrix;
use crate::model::{ForwardCtx, ModelError, RangeSam};
use crate::projection::{backproject_labels, rasterize, ProjectionError, RangeImage, CHANNELS, CH_VALID};
use crate::synthetic::synthetic_dataset;
use crate::tensor::{
    lr_schedule, no_grad, read_checkpoint, write_checkpoint, AdamW, CheckpointRecord, ParamStore, Tensor, TensorError,
};

/// Per-channel `(mean, std)` for range, x, y, z and remission; validity is passed through.
pub const INPUT_NORM: [(f32, f32); 5] = [(12.12, 12.32), (10.88, 11.47), (0.23, 6.91), (-1.04, 0.86), (0.21, 0.16)];

/// File name of the rolling per-epoch checkpoint.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
/// File name of the per-step JSON-lines log.
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] KittiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Augment(#[from] AugError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no dataset root: set data.root or the RANGESAM_DATA_ROOT environment variable, or use synthetic data")]
    NoDataRoot,
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("scan {0} has no ground-truth labels")]
    Unlabeled(String),
    #[error("non-finite loss at step {step}: total {total}, terms {terms:?}, aux {aux:?}")]
    NonFinite { step: u64, total: f64, terms: LossTerms, aux: Vec<f64> },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Independent, reproducible RNG seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ORDER: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Network input `[B, 6, H, W]`: standardized geometry channels at valid pixels,
/// zeros elsewhere, validity unchanged.
pub fn input_tensor(samples: &[RangeSample]) -> Tensor<f32> {
    let (h, w) = (samples[0].height, samples[0].width);
    let n = h * w;
    let mut data = Vec::with_capacity(samples.len() * CHANNELS * n);
    for s in samples {
        assert_eq!((s.height, s.width), (h, w), "batch samples share one raster size");
        let valid = &s.channels[CH_VALID * n..(CH_VALID + 1) * n];
        for (c, &(mean, std)) in INPUT_NORM.iter().enumerate() {
            let ch = &s.channels[c * n..(c + 1) * n];
            data.extend(ch.iter().zip(valid).map(|(&v, &ok)| if ok != 0.0 { (v - mean) / std } else { 0.0 }));
        }
        data.extend_from_slice(valid);
    }
    Tensor::from_vec(data, &[samples.len(), CHANNELS, h, w])
}

/// Labeled scans from disk or from the procedural generator.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(Vec<PointCloud>),
    Kitti { entries: Vec<ScanEntry>, remap: LabelRemap },
}

impl DataSource {
    pub fn open(cfg: &RunConfig, split: Split) -> Result<Self> {
        if cfg.data.synthetic {
            // Each split draws from its own seed range.
            let offset = match split {
                Split::Train => 0,
                Split::Val => 1_000_000,
                Split::Test => 2_000_000,
            };
            return Ok(Self::Synthetic(synthetic_dataset(
                cfg.data.synthetic_scenes,
                cfg.seed.wrapping_add(offset),
                &cfg.projection,
            )));
        }
        let root = cfg.data_root().ok_or(TrainError::NoDataRoot)?;
        let mut entries = sequence_split(&root, split)?;
        if let Some(n) = cfg.data.max_scans {
            entries.truncate(n);
        }
        if entries.is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
        let remap = match &cfg.data.remap {
            Some(p) => LabelRemap::from_file(p)?,
            None => LabelRemap::semantic_kitti(),
        };
        Ok(Self::Kitti { entries, remap })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Synthetic(v) => v.len(),
            Self::Kitti { entries, .. } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self, i: usize) -> String {
        match self {
            Self::Synthetic(_) => format!("synthetic#{i}"),
            Self::Kitti { entries, .. } => entries[i].scan.display().to_string(),
        }
    }

    pub fn load(&self, i: usize) -> Result<PointCloud> {
        match self {
            Self::Synthetic(v) => Ok(v[i].clone()),
            Self::Kitti { entries, remap } => {
                let e = &entries[i];
                Ok(match &e.labels {
                    Some(l) => read_labeled_scan(&e.scan, l, remap)?,
                    None => read_scan(&e.scan)?,
                })
            }
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub loss: f64,
    pub terms: LossTerms,
    pub aux: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Learning-rate factor of step `s` (0-based): warm-up reaches 1 at the end of the
/// warm-up phase, then cosine annealing toward 0.
pub fn lr_factor(step: u64, total: u64, warmup: u64) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        lr_schedule(step, total, warmup, 1.0)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: RangeSam,
    pub store: ParamStore<f32>,
    pub optim: AdamW<f32>,
    pub weights: ClassWeights,
    data: DataSource,
    /// Rasterized samples, reused when augmentation is disabled.
    cache: Vec<Option<RangeSample>>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = DataSource::open(&cfg, cfg.data.split)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: DataSource) -> Result<Self> {
        if data.is_empty() {
            return Err(TrainError::EmptySplit(cfg.data.split));
        }
        let (model, store) = RangeSam::new(cfg.model.clone(), cfg.seed)?;
        let optim = AdamW::new(&store);
        let steps_per_epoch = data.len().div_ceil(cfg.schedule.batch_size) as u64;
        let mut total_steps = steps_per_epoch * cfg.schedule.epochs as u64;
        if let Some(cap) = cfg.schedule.max_steps {
            total_steps = total_steps.min(cap);
        }
        let warmup_steps = (cfg.schedule.warmup_fraction * total_steps as f64).round() as u64;
        let mut trainer = Self {
            weights: ClassWeights::uniform(cfg.model.num_classes),
            cache: vec![None; data.len()],
            cfg,
            model,
            store,
            optim,
            data,
            steps_per_epoch,
            total_steps,
            warmup_steps,
        };
        if trainer.cfg.data.class_weights == WeightMode::Frequency {
            trainer.weights = trainer.frequency_weights()?;
        }
        Ok(trainer)
    }

    fn frequency_weights(&mut self) -> Result<ClassWeights> {
        let k = self.cfg.model.num_classes;
        let mut counts = vec![0.0; k];
        for i in 0..self.data.len() {
            let s = self.clean_sample(i)?;
            for (c, n) in ClassWeights::count_labels(s.labels.iter().copied(), k).into_iter().enumerate() {
                counts[c] += n;
            }
        }
        Ok(ClassWeights::from_frequencies(&counts)?)
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optim.steps()
    }

    pub fn is_done(&self) -> bool {
        self.step() >= self.total_steps
    }

    fn clean_sample(&mut self, i: usize) -> Result<RangeSample> {
        if let Some(s) = &self.cache[i] {
            return Ok(s.clone());
        }
        let pc = self.data.load(i)?;
        if pc.labels.is_none() {
            return Err(TrainError::Unlabeled(self.data.name(i)));
        }
        let s = RangeSample::from_image(&rasterize(&pc, &self.cfg.projection));
        if !self.cfg.aug.enabled || matches!(self.data, DataSource::Synthetic(_)) {
            self.cache[i] = Some(s.clone());
        }
        Ok(s)
    }

    fn augmented_sample(&mut self, i: usize, rng: &mut ChaCha8Rng) -> Result<RangeSample> {
        if !self.cfg.aug.enabled {
            return self.clean_sample(i);
        }
        let pc = self.data.load(i)?;
        if pc.labels.is_none() {
            return Err(TrainError::Unlabeled(self.data.name(i)));
        }
        let pc = augment3d(&pc, &self.cfg.aug, rng);
        let a = RangeSample::from_image(&rasterize(&pc, &self.cfg.projection));
        let donor_idx = rng.random_range(0..self.data.len());
        let donor = self.clean_sample(donor_idx)?;
        Ok(augment_range(&a, &donor, &self.cfg.aug, rng)?)
    }

    /// Sample indices of step `s`: a seeded permutation per epoch, cut into batches.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let j = (step % self.steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_ORDER, epoch)));
        let b = self.cfg.schedule.batch_size;
        order[j * b..((j + 1) * b).min(order.len())].to_vec()
    }

    /// Runs one optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_STEP, step));
        let idx = self.batch_indices(step);
        let samples = idx.iter().map(|&i| self.augmented_sample(i, &mut rng)).collect::<Result<Vec<_>>>()?;
        let x = input_tensor(&samples);
        let target: Vec<u8> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let mut ctx = ForwardCtx { training: true, rng: ChaCha8Rng::seed_from_u64(rng.random()), skip_dwconv: false };
        let out = self.model.forward(&self.store, &x, &mut ctx)?;
        let loss = total_loss(&out.main, &out.aux, &target, &self.weights, &self.cfg.loss)?;
        let total = loss.total.item() as f64;
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step, total, terms: loss.main, aux: loss.aux });
        }
        let grads = loss.total.backward();
        drop(out);
        let factor = lr_factor(step, self.total_steps, self.warmup_steps);
        let opt = self.cfg.optimizer.clone();
        self.optim.step(&mut self.store, &grads, |g| opt.hyper(g, factor));
        Ok(StepLog {
            step,
            epoch: (step / self.steps_per_epoch) as usize,
            lr_backbone: opt.backbone.lr * factor,
            lr_head: opt.head.lr * factor,
            loss: total,
            terms: loss.main,
            aux: loss.aux,
        })
    }

    pub fn checkpoint_records(&self) -> Vec<CheckpointRecord> {
        let mut r = self.store.to_records();
        r.extend(self.optim.to_records(&self.store));
        r
    }

    /// Writes parameters and optimizer state atomically (temp file + rename).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_records(path, &self.checkpoint_records())
    }

    /// Restores parameters and optimizer state; training continues at the saved step.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let records = load_records(path)?;
        let bad = |e: TensorError| TrainError::Checkpoint { path: path.to_path_buf(), detail: e.to_string() };
        self.store.load_records(&records).map_err(bad)?;
        self.optim.load_records(&self.store, &records).map_err(bad)?;
        Ok(())
    }

    /// Trains to the end of the schedule, checkpointing into `out_dir` at every
    /// epoch boundary and at the end, and appending one JSON line per step to the log.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<TrainSummary> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let p = dir.join(LOG_FILE);
                let f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
                Some((BufWriter::new(f), p))
            }
            None => None,
        };
        let mut final_loss = f64::NAN;
        let mut checkpoint = None;
        while !self.is_done() {
            let entry = self.train_step()?;
            final_loss = entry.loss;
            if let Some((w, p)) = log.as_mut() {
                use std::io::Write;
                serde_json::to_writer(&mut *w, &entry).expect("log entry serializes");
                w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(p))?;
            }
            on_step(&entry);
            let boundary = self.step() % self.steps_per_epoch == 0 || self.is_done();
            if let (Some(dir), true) = (out_dir, boundary) {
                let p = dir.join(CHECKPOINT_FILE);
                self.save_checkpoint(&p)?;
                checkpoint = Some(p);
            }
        }
        Ok(TrainSummary { steps: self.step(), final_loss, checkpoint })
    }
}

pub fn save_records(path: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    write_checkpoint(BufWriter::new(f), records).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_records(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })
}

/// Builds the configured model and loads its parameters from a checkpoint.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(RangeSam, ParamStore<f32>)> {
    let (model, mut store) = RangeSam::new(cfg.model.clone(), cfg.seed)?;
    store
        .load_records(&load_records(path)?)
        .map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })?;
    Ok((model, store))
}

/// Per-pixel argmax over the class axis of `[1, K, H, W]` logits.
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<u8> {
    let (k, hw) = (logits.dim(1), logits.dim(2) * logits.dim(3));
    let d = logits.data();
    (0..logits.dim(0) * hw)
        .map(|i| {
            let (b, p) = (i / hw, i % hw);
            (0..k).max_by(|&a, &c| d[(b * k + a) * hw + p].total_cmp(&d[(b * k + c) * hw + p]).then(c.cmp(&a))).unwrap_or(0)
                as u8
        })
        .collect()
}

/// Prediction for one scan: raster, per-pixel classes and per-point labels.
pub struct ScanPrediction {
    pub image: RangeImage,
    pub pixel_labels: Vec<u8>,
    pub point_labels: Vec<u8>,
}

pub fn predict_scan(model: &RangeSam, store: &ParamStore<f32>, cfg: &RunConfig, pc: &PointCloud) -> Result<ScanPrediction> {
    let image = rasterize(pc, &cfg.projection);
    let x = input_tensor(&[RangeSample::from_image(&image)]);
    let logits = no_grad(|| model.forward(store, &x, &mut ForwardCtx::eval()))?.main;
    let pixel_labels = argmax_classes(&logits);
    let point_labels = backproject_labels(&pixel_labels, &image, pc, cfg.data.knn_k, cfg.data.knn_window)?;
    Ok(ScanPrediction { image, pixel_labels, point_labels })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Point-level confusion after k-NN back-projection.
    pub points: ConfusionMatrix,
    /// Pixel-level confusion on valid labeled raster pixels.
    pub pixels: ConfusionMatrix,
    pub scans: usize,
}

pub fn evaluate(model: &RangeSam, store: &ParamStore<f32>, cfg: &RunConfig, data: &DataSource) -> Result<EvalReport> {
    let k = cfg.model.num_classes;
    let mut report = EvalReport { points: ConfusionMatrix::new(k), pixels: ConfusionMatrix::new(k), scans: 0 };
    for i in 0..data.len() {
        let pc = data.load(i)?;
        let gt = pc.labels.as_ref().ok_or_else(|| TrainError::Unlabeled(data.name(i)))?;
        let pred = predict_scan(model, store, cfg, &pc)?;
        report.points.add_all(gt, &pred.point_labels);
        let raster = pred.image.labels.as_ref().expect("labeled cloud yields a label raster");
        for (pix, (&g, &p)) in raster.iter().zip(&pred.pixel_labels).enumerate() {
            if g != IGNORE && pred.image.is_valid(pix) {
                report.pixels.add(g, p);
            }
        }
        report.scans += 1;
    }
    Ok(report)
}
