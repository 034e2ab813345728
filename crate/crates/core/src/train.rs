//! Supervised heatmap regression: masked MSE, Adam, plateau LR decay, early
//! stopping on validation loss, and the on-disk run layout.
//!
//! A run directory holds `config.json`, `split.json`, `metrics.json`, `curve.csv`,
//! `best.ckpt` (+ sidecar), `last.ckpt` (+ sidecar) and `log.txt`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentPolicy};
use crate::datasets::{holdout_ids, kfold_split, DatasetIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalSelection, MetricsReport, NetPredictor};
use crate::geometry::{map_landmarks, ImageSpace, LandmarkSet};
use crate::heatmap::{encode, DEFAULT_SIGMA};
use crate::models::{write_atomic, BuildOptions, LandmarkNet, ModelSpec, StageRecord};
use crate::raster::Raster;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 20,
            min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub sigma: f64,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            lr: 1e-4,
            val_fraction: 0.2,
            sigma: DEFAULT_SIGMA,
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::Config("plateau factor must be in (0, 1)".into()));
        }
        self.augment.validate()
    }
}

/// Reduce-on-plateau for a minimised metric, with a relative improvement
/// threshold of 1e-4.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl ReduceLrOnPlateau {
    const THRESHOLD: f64 = 1e-4;

    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records `metric` and returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - Self::THRESHOLD) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.cfg.patience {
            self.bad_epochs = 0;
            return (lr * self.cfg.factor).max(self.cfg.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    cfg: EarlyStopConfig,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            best_epoch: None,
        }
    }

    /// Returns true when `loss` is a new best.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if self.best_epoch.is_none() || loss < self.best - self.cfg.min_delta {
            self.best = loss;
            self.best_epoch = Some(epoch);
            return true;
        }
        false
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best_epoch
            .is_some_and(|b| epoch.saturating_sub(b) >= self.cfg.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// A training image at the network's input resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Raster,
    pub landmarks: LandmarkSet,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Raster, landmarks: LandmarkSet) -> Result<Self> {
        if image.space() != landmarks.space() {
            return Err(Error::contract("sample image and landmarks disagree on grid"));
        }
        Ok(Self {
            id: id.into(),
            image,
            landmarks,
        })
    }
}

/// Loads `ids` from disk and resizes them to `resolution`.
pub fn load_samples(index: &DatasetIndex, ids: &[String], resolution: ImageSpace) -> Result<Vec<Sample>> {
    index.ensure_training_ids(ids)?;
    ids.iter()
        .map(|id| {
            let record = index
                .record(id)
                .ok_or_else(|| Error::contract(format!("unknown image id {id}")))?;
            let image = Raster::load(&index.root().join(&record.image_path))?;
            let image = if image.space() == resolution {
                image
            } else {
                image.resize(resolution)
            };
            let landmarks = map_landmarks(&record.truth, record.original_space, resolution)?;
            Sample::new(id.clone(), image, landmarks)
        })
        .collect()
}

/// Ids a run trained and validated on, written next to its checkpoints.
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl SplitRecord {
    fn of(train: &[Sample], val: &[Sample]) -> Self {
        Self {
            train_ids: train.iter().map(|s| s.id.clone()).collect(),
            val_ids: val.iter().map(|s| s.id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// SHA-256 over the epoch's augmentation draws in visiting order.
    pub augment_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub initial_val_loss: f64,
    pub curve: Vec<EpochRecord>,
}

/// Destination of a training run's artefacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub run_id: String,
    pub path: PathBuf,
    pub dataset: String,
    pub config_hash: Option<String>,
}

impl RunDir {
    /// `<root>/runs/<run_id>`, created if missing.
    pub fn create(root: &Path, run_id: &str, dataset: &str, config_hash: Option<String>) -> Result<Self> {
        let path = root.join("runs").join(run_id);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            run_id: run_id.to_string(),
            path,
            dataset: dataset.to_string(),
            config_hash,
        })
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.path.join(BEST_CHECKPOINT)
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.path.join(LAST_CHECKPOINT)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_atomic(&self.path.join(name), &serde_json::to_vec_pretty(value)?)
    }

    fn log(&self, line: &str) {
        let path = self.path.join("log.txt");
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = res {
            warn!("cannot append to {}: {e}", path.display());
        }
    }

    fn write_curve(&self, curve: &[EpochRecord]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in curve {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        write_atomic(&self.path.join("curve.csv"), &bytes)
    }
}

/// Stable identifier for a run.
pub fn run_id(dataset: &str, spec: &ModelSpec, config_hash: &str, seed: u64) -> String {
    let short = &config_hash[..config_hash.len().min(10)];
    format!(
        "{dataset}-{}-{}-k{}-{short}-s{seed}",
        spec.architecture, spec.encoder, spec.out_channels
    )
}

struct Batch {
    input: Tensor,
    target: Tensor,
    mask: Tensor,
    weight: f64,
}

fn make_batch(net: &LandmarkNet, samples: &[Sample], sigma: f64) -> Result<Batch> {
    let images: Vec<&Raster> = samples.iter().map(|s| &s.image).collect();
    let input = net.input_tensor(&images)?;
    let space = samples[0].image.space();
    let k = net.spec().out_channels;
    let mut target = Vec::with_capacity(samples.len() * k * space.pixels());
    let mut mask = Vec::with_capacity(samples.len() * k);
    for s in samples {
        if s.landmarks.len() != k {
            return Err(Error::LandmarkCount {
                id: s.id.clone(),
                expected: k,
                found: s.landmarks.len(),
            });
        }
        let stack = encode(&s.landmarks, space, sigma)?;
        mask.extend(stack.flagged().iter().map(|&f| if f { 0f32 } else { 1.0 }));
        target.extend_from_slice(stack.values());
    }
    let kept: f32 = mask.iter().sum();
    let (h, w) = (space.height() as usize, space.width() as usize);
    let device = net.device();
    Ok(Batch {
        input,
        target: Tensor::from_vec(target, (samples.len(), k, h, w), device)?.to_dtype(net.dtype())?,
        mask: Tensor::from_vec(mask, (samples.len(), k, 1, 1), device)?.to_dtype(net.dtype())?,
        weight: kept as f64 * (h * w) as f64,
    })
}

/// Mean squared error over the unflagged channels. Returns `None` when
/// every channel is masked.
fn masked_mse(pred: &Tensor, batch: &Batch) -> Result<Option<Tensor>> {
    if batch.weight == 0.0 {
        return Ok(None);
    }
    let sq = (pred - &batch.target)?.sqr()?.broadcast_mul(&batch.mask)?;
    Ok(Some((sq.sum_all()? / batch.weight)?))
}

/// Differentiable training loss of `net` on one batch, as minimised by
/// [`fit`].
pub fn batch_loss(net: &LandmarkNet, samples: &[Sample], sigma: f64, train: bool) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empty batch"));
    }
    let batch = make_batch(net, samples, sigma)?;
    let pred = net.forward_t(&batch.input, train)?;
    masked_mse(&pred, &batch)?.ok_or(Error::EmptyInput("every channel of the batch is masked"))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Masked MSE of the network on `samples` in evaluation mode, weighted by
/// the number of supervised pixels.
pub fn evaluate_loss(net: &LandmarkNet, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in samples.chunks(cfg.batch_size) {
        let batch = make_batch(net, chunk, cfg.sigma)?;
        let pred = net.forward_t(&batch.input, false)?;
        if let Some(loss) = masked_mse(&pred, &batch)? {
            total += scalar(&loss)? * batch.weight;
            weight += batch.weight;
        }
    }
    if weight == 0.0 {
        return Err(Error::EmptyInput("no supervised landmarks in validation set"));
    }
    Ok(total / weight)
}

/// Trains `net` in place and leaves it holding its best-validation weights.
///
/// With an empty `val`, the training loss is monitored instead.
pub fn fit(
    net: &mut LandmarkNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("no training samples"));
    }
    let params = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(net.trainable_vars(), params)?;
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau);
    let mut stopper = EarlyStopping::new(cfg.early_stop);
    let mut lr = cfg.lr;
    let monitor = if val.is_empty() { train } else { val };
    let initial_val_loss = evaluate_loss(net, monitor, cfg)?;
    let mut best: Option<HashMap<String, Tensor>> = None;
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(r) = run {
        r.write_json(SPLIT_FILE, &SplitRecord::of(train, val))?;
        r.log(&format!("start: {} train, {} val, initial loss {initial_val_loss:.6e}", train.len(), val.len()));
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let (mut total, mut weight) = (0.0, 0.0);
        let mut draws = Sha256::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let mut rng = augment::rng_for(cfg.seed, &s.id, epoch);
                let (image, landmarks, draw) = augment::apply(&s.image, &s.landmarks, &cfg.augment, &mut rng)?;
                draws.update(s.id.as_bytes());
                draws.update(serde_json::to_vec(&draw)?);
                samples.push(Sample {
                    id: s.id.clone(),
                    image,
                    landmarks,
                });
            }
            let batch = make_batch(net, &samples, cfg.sigma)?;
            let pred = net.forward_t(&batch.input, true)?;
            let Some(loss) = masked_mse(&pred, &batch)? else {
                continue;
            };
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    lr,
                    batch_ids: samples.iter().map(|s| s.id.clone()).collect(),
                });
            }
            opt.backward_step(&loss)?;
            total += value * batch.weight;
            weight += batch.weight;
        }
        let train_loss = if weight > 0.0 { total / weight } else { f64::NAN };
        let val_loss = evaluate_loss(net, monitor, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                lr,
                batch_ids: monitor.iter().map(|s| s.id.clone()).collect(),
            });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            augment_digest: hex::encode(draws.finalize()),
        });
        let improved = stopper.update(epoch, val_loss);
        let line = format!(
            "epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.3e}{}",
            if improved { " *" } else { "" }
        );
        info!("{line}");
        if improved {
            best = Some(net.snapshot()?);
            if let Some(r) = run {
                let metrics = BTreeMap::from([("val_loss".to_string(), val_loss), ("epoch".to_string(), epoch as f64)]);
                net.to_checkpoint(r.config_hash.clone(), metrics)?.save(&r.best_checkpoint())?;
            }
        }
        if let Some(r) = run {
            r.log(&line);
            r.write_curve(&curve)?;
        }
        let next = plateau.step(val_loss, lr);
        if next != lr {
            lr = next;
            opt.set_learning_rate(lr);
        }
        if stopper.should_stop(epoch) {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    if let Some(r) = run {
        net.to_checkpoint(r.config_hash.clone(), BTreeMap::new())?.save(&r.last_checkpoint())?;
    }
    if let Some(snapshot) = &best {
        net.restore(snapshot)?;
    }
    let report = FitReport {
        best_epoch,
        best_val_loss,
        epochs_run: curve.len(),
        stopped_early,
        initial_val_loss,
        curve,
    };
    if let Some(r) = run {
        net.push_stage(StageRecord {
            dataset: r.dataset.clone(),
            landmark_count: net.spec().out_channels,
            run_id: r.run_id.clone(),
            best_epoch,
            best_val_loss,
        });
        let metrics = BTreeMap::from([
            ("val_loss".to_string(), best_val_loss),
            ("epoch".to_string(), best_epoch as f64),
        ]);
        net.to_checkpoint(r.config_hash.clone(), metrics)?.save(&r.best_checkpoint())?;
        r.write_json("metrics.json", &report)?;
        r.log(&format!("done: best epoch {best_epoch}, val {best_val_loss:.6e}"));
    }
    Ok(report)
}

/// Trains on the dataset's training split with a seeded validation holdout.
pub fn train_on_index(
    net: &mut LandmarkNet,
    index: &DatasetIndex,
    train_ids: &[String],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<FitReport> {
    let (fit_ids, val_ids) = split_holdout(train_ids, cfg.val_fraction, cfg.seed)?;
    let res = index.spec().train_resolution;
    let train = load_samples(index, &fit_ids, res)?;
    let val = load_samples(index, &val_ids, res)?;
    fit(net, &train, &val, cfg, run)
}

/// Seeded holdout over an explicit id list; a zero fraction keeps every id.
fn split_holdout(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if fraction == 0.0 {
        return Ok((ids.to_vec(), Vec::new()));
    }
    let h = holdout_ids(ids, fraction, seed)?;
    Ok((h.train_ids, h.val_ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub run_id: Option<String>,
    pub report: MetricsReport,
    pub fit: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldResult>,
    /// Means over folds; `mre_std` is the across-fold spread.
    pub aggregate: MetricsReport,
}

/// K-fold cross-validation over the training split. Each fold trains a
/// fresh network and is scored on its held-out ids.
#[allow(clippy::too_many_arguments)]
pub fn crossval(
    index: &DatasetIndex,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    build: &BuildOptions,
    folds: usize,
    eval_opts: &EvalOptions,
    out: Option<(&Path, &str)>,
) -> Result<CrossValReport> {
    let splits = kfold_split(index, folds, cfg.seed)?;
    let mut results = Vec::with_capacity(splits.len());
    for fold in splits {
        let run_fold = || -> Result<FoldResult> {
            let mut net = LandmarkNet::build(spec, build)?;
            let run = match out {
                Some((root, base)) => Some(RunDir::create(
                    root,
                    &format!("{base}-fold{}", fold.index),
                    &index.spec().name,
                    None,
                )?),
                None => None,
            };
            let fit = train_on_index(&mut net, index, &fold.train_ids, cfg, run.as_ref())?;
            let predictor = NetPredictor {
                net: &net,
                decode: eval_opts.decode,
            };
            let evaluation = evaluate(&predictor, index, &EvalSelection::Ids(fold.val_ids.clone()), eval_opts)?;
            Ok(FoldResult {
                fold: fold.index,
                run_id: run.map(|r| r.run_id),
                report: evaluation.report,
                fit,
            })
        };
        let result = run_fold().map_err(|e| Error::Fold {
            fold: fold.index,
            source: Box::new(e),
        })?;
        results.push(result);
    }
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    Ok(CrossValReport {
        aggregate: MetricsReport::aggregate(&reports)?,
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reduces_after_patience_is_exceeded() {
        let cfg = PlateauConfig {
            factor: 0.1,
            patience: 2,
            min_lr: 0.0,
        };
        let mut s = ReduceLrOnPlateau::new(cfg);
        let mut lr = 1.0;
        let mut history = Vec::new();
        for m in [1.0, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.4] {
            lr = s.step(m, lr);
            history.push(lr);
        }
        // bad epochs at indices 2,3,4 -> reduce after the third
        assert_eq!(history[..4], [1.0, 1.0, 1.0, 1.0]);
        assert!((history[4] - 0.1).abs() < 1e-15);
        assert!((history[7] - 0.01).abs() < 1e-15);
        assert!((history[8] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn plateau_ignores_sub_threshold_gains() {
        let mut s = ReduceLrOnPlateau::new(PlateauConfig {
            factor: 0.5,
            patience: 0,
            min_lr: 0.3,
        });
        assert_eq!(s.step(1.0, 1.0), 1.0);
        assert_eq!(s.step(1.0 - 1e-6, 1.0), 0.5);
        assert_eq!(s.step(1.0 - 1e-6, 0.5), 0.3);
    }

    #[test]
    fn early_stopping_counts_from_best_epoch() {
        let mut e = EarlyStopping::new(EarlyStopConfig {
            patience: 3,
            min_delta: 0.0,
        });
        let losses = [5.0, 4.0, 4.0, 4.5, 3.9, 4.0, 4.0, 4.0];
        let mut stopped = None;
        for (i, l) in losses.iter().enumerate() {
            e.update(i, *l);
            if e.should_stop(i) {
                stopped = Some(i);
                break;
            }
        }
        assert_eq!(e.best(), Some((4, 3.9)));
        assert_eq!(stopped, Some(7));
    }

    #[test]
    fn early_stopping_min_delta() {
        let mut e = EarlyStopping::new(EarlyStopConfig {
            patience: 1,
            min_delta: 0.5,
        });
        assert!(e.update(0, 2.0));
        assert!(!e.update(1, 1.8));
        assert!(e.should_stop(1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
