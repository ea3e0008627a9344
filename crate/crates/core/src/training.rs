//! Target normalization, loss, optimizer, splits, metrics and the training
//! loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DatasetRecord, Interval, StiffnessRanges};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, InputNorm, Model, ModelCheckpoint};
use crate::numcore::ParamTensor;

/// Min-max bounds for `kp` and `kb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kp: Interval,
    pub kb: Interval,
}

impl Default for NormSpec {
    fn default() -> Self {
        let r = StiffnessRanges::default();
        NormSpec {
            kp: Interval::new(r.r2.kp.lo, r.r1.kp.hi),
            kb: Interval::new(r.r2.kb.lo, r.r1.kb.hi),
        }
    }
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp.hi > self.kp.lo) || !(self.kb.hi > self.kb.lo) {
            return Err(Error::Config(format!("normalization bounds must satisfy max > min: {self:?}")));
        }
        Ok(())
    }

    fn interval(&self, j: usize) -> (Interval, &'static str) {
        if j == 0 {
            (self.kp, "railpad stiffness")
        } else {
            (self.kb, "ballast stiffness")
        }
    }

    /// `(v − min)/(max − min)` for each `[kp, kb]` pair.
    pub fn normalize(&self, labels: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        labels
            .iter()
            .map(|pair| {
                let mut out = [0.0; 2];
                for j in 0..2 {
                    let (r, what) = self.interval(j);
                    if !r.contains(pair[j]) {
                        return Err(Error::Range {
                            what,
                            value: pair[j],
                            min: r.lo,
                            max: r.hi,
                        });
                    }
                    out[j] = (pair[j] - r.lo) / (r.hi - r.lo);
                }
                Ok(out)
            })
            .collect()
    }

    pub fn denormalize(&self, values: &[[f64; 2]]) -> Vec<[f64; 2]> {
        values
            .iter()
            .map(|pair| {
                let mut out = [0.0; 2];
                for j in 0..2 {
                    let (r, _) = self.interval(j);
                    out[j] = r.lo + pair[j] * (r.hi - r.lo);
                }
                out
            })
            .collect()
    }
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss(pred: &ParamTensor, target: &ParamTensor) -> Result<(f64, ParamTensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data().iter().zip(target.data()) {
        let e = p - t;
        loss += e * e;
        grad.push(2.0 * e / n);
    }
    Ok((loss / n, ParamTensor::new(pred.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&ParamTensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn adam_step(params: &mut [&mut ParamTensor], grads: &[&ParamTensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].len() != p.len() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition of `0..n`; train and validation sizes are rounded,
/// the test set takes the rest.
pub fn split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::EmptyInput("split"));
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut idx, &mut rng);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

fn shuffle<T, R: Rng>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
}

/// Model-ready view of one record: frames `S × L` and normalized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub frames: Vec<f64>,
    pub targets: Vec<f64>,
    pub n_frames: usize,
    pub frame_len: usize,
}

impl Segment {
    pub fn from_record(record: &DatasetRecord, frame_len: usize, norm: &NormSpec) -> Result<Self> {
        let n_frames = record.profile.len();
        let signal: Vec<f64> = record.signal.iter().map(|&v| v as f64).collect();
        let seq = crate::framing::frame_signal(&signal, n_frames)?;
        if seq.frame_len != frame_len {
            return Err(Error::Compatibility(format!(
                "record frames have {} samples, model expects {frame_len}",
                seq.frame_len
            )));
        }
        let targets = norm.normalize(&record.label_rows())?.into_iter().flatten().collect();
        Ok(Segment {
            frames: seq.frames,
            targets,
            n_frames,
            frame_len,
        })
    }
}

pub fn segments(dataset: &Dataset, frame_len: usize, norm: &NormSpec) -> Result<Vec<Segment>> {
    dataset.records.iter().map(|r| Segment::from_record(r, frame_len, norm)).collect()
}

fn stack(batch: &[&Segment]) -> Result<(ParamTensor, ParamTensor)> {
    let s = batch[0].n_frames;
    let l = batch[0].frame_len;
    let mut x = Vec::with_capacity(batch.len() * s * l);
    let mut y = Vec::with_capacity(batch.len() * s * 2);
    for seg in batch {
        if seg.n_frames != s || seg.frame_len != l {
            return Err(Error::dim("batch", &[seg.n_frames, seg.frame_len], &[s, l]));
        }
        x.extend_from_slice(&seg.frames);
        y.extend_from_slice(&seg.targets);
    }
    Ok((
        ParamTensor::new(vec![batch.len(), s, l], x)?,
        ParamTensor::new(vec![batch.len(), s, 2], y)?,
    ))
}

/// Normalized predictions, one `S × 2` block per segment.
pub fn predict(model: &Model, segs: &[Segment], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Segment> = segs.iter().collect();
    let mut out = Vec::with_capacity(segs.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, _) = stack(chunk)?;
        let y = model.forward(&x)?;
        let per = y.len() / chunk.len();
        out.extend(y.data().chunks_exact(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Mean squared error over all segments.
pub fn dataset_loss(model: &Model, segs: &[Segment], batch_size: usize) -> Result<f64> {
    let preds = predict(model, segs, batch_size)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, s) in preds.iter().zip(segs) {
        for (a, b) in p.iter().zip(&s.targets) {
            sum += (a - b) * (a - b);
        }
        count += p.len();
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "rmse_kp_MN_m")]
    pub rmse_kp_mn_m: f64,
    pub mape_kp_pct: f64,
    #[serde(rename = "rmse_kb_MN_m")]
    pub rmse_kb_mn_m: f64,
    pub mape_kb_pct: f64,
    pub overall_mape_pct: f64,
    pub n_records: usize,
}

/// Metrics over paired per-record predictions and labels in N/m.
pub fn metrics(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metrics"));
    }
    let mut sq = [0.0; 2];
    let mut ape = [0.0; 2];
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::dim("metrics record", &[p.len()], &[t.len()]));
        }
        for (pp, tt) in p.iter().zip(t) {
            for j in 0..2 {
                if tt[j] == 0.0 {
                    return Err(Error::Division("mape"));
                }
                let e = pp[j] - tt[j];
                sq[j] += e * e;
                ape[j] += (e / tt[j]).abs();
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mape_kp = 100.0 * ape[0] / n;
    let mape_kb = 100.0 * ape[1] / n;
    Ok(MetricsReport {
        rmse_kp_mn_m: (sq[0] / n).sqrt() / 1e6,
        mape_kp_pct: mape_kp,
        rmse_kb_mn_m: (sq[1] / n).sqrt() / 1e6,
        mape_kb_pct: mape_kb,
        overall_mape_pct: (mape_kp + mape_kb) / 2.0,
        n_records: pred.len(),
    })
}

fn to_pairs(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Denormalized predictions of `model` for every record of `dataset`.
pub fn predict_dataset(model: &Model, norm: &NormSpec, dataset: &Dataset) -> Result<Vec<Vec<[f64; 2]>>> {
    let segs = segments(dataset, model.arch.frame_len, norm)?;
    Ok(predict(model, &segs, 16)?.iter().map(|p| norm.denormalize(&to_pairs(p))).collect())
}

pub fn evaluate(model: &Model, norm: &NormSpec, dataset: &Dataset) -> Result<MetricsReport> {
    let pred = predict_dataset(model, norm, dataset)?;
    let truth: Vec<Vec<[f64; 2]>> = dataset.records.iter().map(|r| r.label_rows()).collect();
    metrics(&pred, &truth)
}

/// Metrics of predicting the mean training label at every sleeper.
pub fn mean_predictor_metrics(train: &Dataset, test: &Dataset) -> Result<MetricsReport> {
    let mut sum = [0.0; 2];
    let mut count = 0usize;
    for r in &train.records {
        for pair in r.label_rows() {
            sum[0] += pair[0];
            sum[1] += pair[1];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("mean predictor"));
    }
    let mean = [sum[0] / count as f64, sum[1] / count as f64];
    let truth: Vec<Vec<[f64; 2]>> = test.records.iter().map(|r| r.label_rows()).collect();
    let pred: Vec<Vec<[f64; 2]>> = truth.iter().map(|t| vec![mean; t.len()]).collect();
    metrics(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Standardize each frame position with statistics of the training
    /// frames before the first step.
    pub fit_input_norm: bool,
    /// Worker threads for per-segment gradients within a batch.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
            fit_input_norm: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.adam.lr > 0.0) || self.threads == 0 {
            return Err(Error::Config("epochs, batch size, learning rate and threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Per-position standardization fitted to every frame of `segs`.
pub fn input_norm_for(segs: &[Segment]) -> InputNorm {
    let frame_len = segs.first().map_or(0, |s| s.frame_len);
    InputNorm::fit(segs.iter().flat_map(|s| s.frames.chunks_exact(frame_len)), frame_len)
}

/// Loss and gradient of one batch, split over `threads` sub-batches whose
/// gradients are summed in sub-batch order.
fn batch_gradient(model: &Model, batch: &[&Segment], threads: usize) -> Result<(f64, Model)> {
    let per = batch.len().div_ceil(threads.min(batch.len()));
    let total = (batch.len() * batch[0].n_frames * 2) as f64;
    let parts: Vec<(f64, Model)> = batch
        .par_chunks(per)
        .map(|chunk| {
            let (x, y) = stack(chunk)?;
            let (pred, cache) = model.forward_train(&x)?;
            let (loss, mut grad) = mse_loss(&pred, &y)?;
            // rescale from the sub-batch mean to the full-batch mean
            let share = y.len() as f64 / total;
            grad.scale(share);
            Ok((loss * share, model.backward(&cache, &grad)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            a.add_assign(b)?;
        }
    }
    Ok((loss, grads))
}

/// Mini-batch training keeping the parameters with the lowest validation
/// loss.
pub fn train(model: &Model, train_set: &[Segment], val_set: &[Segment], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, config, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &Model,
    train_set: &[Segment],
    val_set: &[Segment],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let mut model = model.clone();
    if config.fit_input_norm {
        model.input_norm = input_norm_for(train_set);
    }
    let mut state = AdamState::new(&model.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=config.epochs {
        shuffle(&mut order, &mut rng);
        let mut weighted = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Segment> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch, config.threads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    reason: format!("training batch loss {loss}"),
                });
            }
            weighted += loss * batch.len() as f64;
            let g = grads.tensors();
            adam_step(&mut model.tensors_mut(), &g, &mut state, &config.adam)?;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = dataset_loss(&model, val_set, config.batch_size)?;
        if !val_loss.is_finite() || model.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                reason: format!("validation loss {val_loss}"),
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&entry);
        log.push(entry);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
        if let Some(p) = config.patience {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss: best_val,
        log,
    })
}

/// Train/validation/test fractions used by the end-to-end pipeline.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// A dataset cut into its three roles by a seeded split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn split_dataset(dataset: &Dataset, seed: u64) -> Result<SplitData> {
    let split = split(dataset.len(), SPLIT_FRACTIONS, seed)?;
    Ok(SplitData {
        train: dataset.select(&split.train)?,
        val: dataset.select(&split.val)?,
        test: dataset.select(&split.test)?,
        split,
    })
}

/// Builds `arch` from `config.seed`, trains it on the split and packages
/// the best-validation parameters as a checkpoint.
pub fn fit(
    arch: &ArchSpec,
    data: &SplitData,
    split_seed: u64,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelCheckpoint, TrainOutcome)> {
    let norm = NormSpec::default();
    let model = Model::build(arch, config.seed)?;
    let train_segs = segments(&data.train, arch.frame_len, &norm)?;
    let val_segs = segments(&data.val, arch.frame_len, &norm)?;
    let outcome = train_with(&model, &train_segs, &val_segs, config, on_epoch)?;
    let ck = ModelCheckpoint {
        model: outcome.best.clone(),
        norm,
        seed: config.seed,
        split_seed,
    };
    Ok((ck, outcome))
}

pub fn write_loss_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in log {
        out.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
