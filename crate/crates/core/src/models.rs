//! The four frame-extractor / sequence-estimator architectures, their
//! batched forward and backward passes, and checkpoint files.
//!
//! A batch holds `B` segments of `S` frames each, laid out `[B, S, L]`.
//! Every frame goes through the same extractor; the per-frame features form
//! a length-`S` sequence for the stacked (Bi)LSTM estimator, and the dense
//! head emits a normalized `[kp, kb]` pair at every step.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    bilstm_backward_batch, bilstm_forward_batch, conv1d_out_len, dense_backward_batch, dense_forward_batch,
    lstm_backward_batch, lstm_forward_batch, maxpool1d, maxpool1d_backward, Activation, BiLstmCache,
    Conv1dGradAccumulator, Conv1dLayer, Conv1dParams, DenseCache, DenseParams, LstmCache, LstmParams,
    LSTM_PARAM_NAMES,
};
use crate::numcore::ParamTensor;
use crate::training::NormSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPCKPT01";
pub const CHECKPOINT_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    Cnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Lstm,
    Bilstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub extractor: Extractor,
    pub estimator: Estimator,
    pub feature_dim: usize,
    pub estimator_units: Vec<usize>,
    pub head_units: Vec<usize>,
    pub frame_len: usize,
    pub cnn_filters: Vec<usize>,
    pub cnn_kernel: usize,
    /// Samples consumed per step by the LSTM extractor.
    pub chunk: usize,
}

impl ArchSpec {
    pub fn new(extractor: Extractor, estimator: Estimator) -> Self {
        ArchSpec {
            extractor,
            estimator,
            feature_dim: 128,
            estimator_units: vec![128, 64],
            head_units: vec![64, 2],
            frame_len: 866,
            cnn_filters: vec![32, 64, 128],
            cnn_kernel: 8,
            chunk: 10,
        }
    }

    /// `cnn-lstm`, `lstm-lstm`, `cnn-bilstm` or `lstm-bilstm`.
    pub fn parse(name: &str) -> Result<Self> {
        let (ext, est) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown architecture {name:?}")))?;
        let extractor = match ext {
            "cnn" => Extractor::Cnn,
            "lstm" => Extractor::Lstm,
            _ => return Err(Error::Config(format!("unknown extractor {ext:?}"))),
        };
        let estimator = match est {
            "lstm" => Estimator::Lstm,
            "bilstm" => Estimator::Bilstm,
            _ => return Err(Error::Config(format!("unknown estimator {est:?}"))),
        };
        Ok(Self::new(extractor, estimator))
    }

    pub fn name(&self) -> String {
        let ext = match self.extractor {
            Extractor::Cnn => "cnn",
            Extractor::Lstm => "lstm",
        };
        let est = match self.estimator {
            Estimator::Lstm => "lstm",
            Estimator::Bilstm => "bilstm",
        };
        format!("{ext}-{est}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.frame_len == 0 {
            return Err(Error::Config("feature_dim and frame_len must be positive".into()));
        }
        if self.head_units.last() != Some(&2) {
            return Err(Error::Config(format!("head must end in 2 units, got {:?}", self.head_units)));
        }
        if self.estimator_units.is_empty() || self.estimator_units.iter().chain(&self.head_units).any(|&u| u == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        match self.extractor {
            Extractor::Cnn => {
                if self.cnn_filters.is_empty() || self.cnn_filters.contains(&0) || self.cnn_kernel == 0 {
                    return Err(Error::Config("cnn filters and kernel must be positive".into()));
                }
                self.cnn_lengths()?;
            }
            Extractor::Lstm => {
                if self.chunk == 0 {
                    return Err(Error::Config("chunk must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Sequence length after each (conv, pool) stage.
    pub fn cnn_lengths(&self) -> Result<Vec<usize>> {
        let mut len = self.frame_len;
        let mut out = Vec::with_capacity(self.cnn_filters.len());
        for _ in &self.cnn_filters {
            let c = conv1d_out_len(len, self.cnn_kernel).filter(|&c| c >= 2).ok_or_else(|| {
                Error::Config(format!("frame of {} samples too short for the cnn stages", self.frame_len))
            })?;
            len = c / 2;
            out.push(len);
        }
        Ok(out)
    }

    pub fn flatten_dim(&self) -> Result<usize> {
        Ok(self.cnn_lengths()?.last().copied().unwrap_or(0) * self.cnn_filters.last().copied().unwrap_or(0))
    }

    /// Steps of the LSTM extractor; the frame is zero-padded to a multiple
    /// of `chunk`.
    pub fn lstm_steps(&self) -> usize {
        self.frame_len.div_ceil(self.chunk)
    }

    /// Width of the per-step features fed to the estimator.
    pub fn extractor_output_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn estimator_output_dim(&self) -> usize {
        let u = *self.estimator_units.last().unwrap();
        match self.estimator {
            Estimator::Lstm => u,
            Estimator::Bilstm => 2 * u,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorParams {
    Cnn { convs: Vec<Conv1dParams>, dense: DenseParams },
    Lstm(LstmParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorLayer {
    Uni(LstmParams),
    Bi { fwd: LstmParams, bwd: LstmParams },
}

impl EstimatorLayer {
    pub fn output_dim(&self) -> usize {
        match self {
            EstimatorLayer::Uni(p) => p.units(),
            EstimatorLayer::Bi { fwd, .. } => 2 * fwd.units(),
        }
    }
}

/// A built network. The same type carries parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub extractor: ExtractorParams,
    pub estimator: Vec<EstimatorLayer>,
    pub head: Vec<DenseParams>,
    pub input_norm: InputNorm,
}

/// Per-sample-position standardization applied to every frame before the
/// extractor: `x'[j] = (x[j] - offset[j]) * gain[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub offset: Vec<f64>,
    pub gain: Vec<f64>,
}

impl InputNorm {
    pub fn identity(frame_len: usize) -> Self {
        InputNorm {
            offset: vec![0.0; frame_len],
            gain: vec![1.0; frame_len],
        }
    }

    /// Mean and inverse standard deviation of each position over `frames`.
    /// Constant positions keep gain 1.
    pub fn fit<'a, I>(frames: I, frame_len: usize) -> Self
    where
        I: Iterator<Item = &'a [f64]> + Clone,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; frame_len];
        for f in frames.clone() {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(frame_len);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; frame_len];
        for f in frames {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let gain = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        InputNorm { offset: mean, gain }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    fn apply(&self, frames: &[f64]) -> Vec<f64> {
        let l = self.len();
        let mut out = Vec::with_capacity(frames.len());
        for f in frames.chunks_exact(l) {
            out.extend(f.iter().zip(&self.offset).zip(&self.gain).map(|((v, o), g)| (v - o) * g));
        }
        out
    }
}

impl Model {
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = match arch.extractor {
            Extractor::Cnn => {
                let mut convs = Vec::new();
                let mut ch = 1;
                for &f in &arch.cnn_filters {
                    convs.push(Conv1dParams::init(ch, f, arch.cnn_kernel, &mut rng));
                    ch = f;
                }
                let dense = DenseParams::init(arch.flatten_dim()?, arch.feature_dim, &mut rng);
                ExtractorParams::Cnn { convs, dense }
            }
            Extractor::Lstm => ExtractorParams::Lstm(LstmParams::init(arch.chunk, arch.feature_dim, &mut rng)),
        };
        let mut estimator = Vec::new();
        let mut width = arch.extractor_output_dim();
        for &u in &arch.estimator_units {
            let layer = match arch.estimator {
                Estimator::Lstm => EstimatorLayer::Uni(LstmParams::init(width, u, &mut rng)),
                Estimator::Bilstm => EstimatorLayer::Bi {
                    fwd: LstmParams::init(width, u, &mut rng),
                    bwd: LstmParams::init(width, u, &mut rng),
                },
            };
            width = layer.output_dim();
            estimator.push(layer);
        }
        let mut head = Vec::new();
        for &u in &arch.head_units {
            head.push(DenseParams::init(width, u, &mut rng));
            width = u;
        }
        Ok(Model {
            arch: arch.clone(),
            extractor,
            estimator,
            head,
            input_norm: InputNorm::identity(arch.frame_len),
        })
    }

    /// Same structure, every parameter zero.
    pub fn zeros_like(&self) -> Model {
        let mut m = self.clone();
        for t in m.tensors_mut() {
            t.fill(0.0);
        }
        m
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let lstm = |names: &mut Vec<String>, prefix: &str| {
            for n in LSTM_PARAM_NAMES {
                names.push(format!("{prefix}.{n}"));
            }
        };
        match &self.extractor {
            ExtractorParams::Cnn { convs, .. } => {
                for i in 0..convs.len() {
                    names.push(format!("extractor.conv{i}.filters"));
                    names.push(format!("extractor.conv{i}.bias"));
                }
                names.push("extractor.dense.w".into());
                names.push("extractor.dense.b".into());
            }
            ExtractorParams::Lstm(_) => lstm(&mut names, "extractor.lstm"),
        }
        for (i, layer) in self.estimator.iter().enumerate() {
            match layer {
                EstimatorLayer::Uni(_) => lstm(&mut names, &format!("estimator{i}")),
                EstimatorLayer::Bi { .. } => {
                    lstm(&mut names, &format!("estimator{i}.fwd"));
                    lstm(&mut names, &format!("estimator{i}.bwd"));
                }
            }
        }
        for i in 0..self.head.len() {
            names.push(format!("head{i}.w"));
            names.push(format!("head{i}.b"));
        }
        names
    }

    /// Every parameter tensor, in [`Model::param_names`] order.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = Vec::new();
        match &self.extractor {
            ExtractorParams::Cnn { convs, dense } => {
                for c in convs {
                    out.push(&c.filters);
                    out.push(&c.bias);
                }
                out.push(&dense.w);
                out.push(&dense.b);
            }
            ExtractorParams::Lstm(p) => out.extend(p.tensors()),
        }
        for layer in &self.estimator {
            match layer {
                EstimatorLayer::Uni(p) => out.extend(p.tensors()),
                EstimatorLayer::Bi { fwd, bwd } => {
                    out.extend(fwd.tensors());
                    out.extend(bwd.tensors());
                }
            }
        }
        for d in &self.head {
            out.push(&d.w);
            out.push(&d.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = Vec::new();
        match &mut self.extractor {
            ExtractorParams::Cnn { convs, dense } => {
                for c in convs {
                    out.push(&mut c.filters);
                    out.push(&mut c.bias);
                }
                out.push(&mut dense.w);
                out.push(&mut dense.b);
            }
            ExtractorParams::Lstm(p) => out.extend(p.tensors_mut()),
        }
        for layer in &mut self.estimator {
            match layer {
                EstimatorLayer::Uni(p) => out.extend(p.tensors_mut()),
                EstimatorLayer::Bi { fwd, bwd } => {
                    out.extend(fwd.tensors_mut());
                    out.extend(bwd.tensors_mut());
                }
            }
        }
        for d in &mut self.head {
            out.push(&mut d.w);
            out.push(&mut d.b);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Normalized predictions `[B, S, 2]` for frames `[B, S, L]`, or `[S, 2]`
    /// for a single segment `[S, L]`.
    pub fn forward(&self, frames: &ParamTensor) -> Result<ParamTensor> {
        self.forward_train(frames).map(|(y, _)| y)
    }

    pub fn forward_train(&self, frames: &ParamTensor) -> Result<(ParamTensor, ModelCache)> {
        let (b, s, l, single) = match *frames.shape() {
            [b, s, l] => (b, s, l, false),
            [s, l] => (1, s, l, true),
            _ => return Err(Error::dim("model input", frames.shape(), &[0, 0, self.arch.frame_len])),
        };
        if l != self.arch.frame_len {
            return Err(Error::dim("model frame length", frames.shape(), &[b, s, self.arch.frame_len]));
        }
        if self.input_norm.len() != l {
            return Err(Error::dim("model input normalization", &[self.input_norm.len()], &[l]));
        }
        let scaled = self.input_norm.apply(frames.data());
        let n = b * s;

        let (features, ext_cache) = match &self.extractor {
            ExtractorParams::Cnn { convs, dense } => cnn_forward(&scaled, n, l, convs, dense)?,
            ExtractorParams::Lstm(p) => lstm_extractor_forward(&scaled, n, l, self.arch.chunk, p)?,
        };

        // [B·S, F] in (segment, step) order → time-major [S, B, F].
        let fd = self.arch.feature_dim;
        let mut x = ParamTensor::new(vec![s, b, fd], swap_outer(features.data(), b, s, fd))?;
        let mut est_caches = Vec::with_capacity(self.estimator.len());
        for layer in &self.estimator {
            let (y, cache) = match layer {
                EstimatorLayer::Uni(p) => {
                    let (y, c) = lstm_forward_batch(&x, p, None)?;
                    (y, EstimatorCache::Uni(c))
                }
                EstimatorLayer::Bi { fwd, bwd } => {
                    let (y, c) = bilstm_forward_batch(&x, fwd, bwd)?;
                    (y, EstimatorCache::Bi(c))
                }
            };
            est_caches.push(cache);
            x = y;
        }

        let w = self.arch.estimator_output_dim();
        let mut h = x.reshape(vec![s * b, w])?;
        let mut head_caches = Vec::with_capacity(self.head.len());
        for (i, d) in self.head.iter().enumerate() {
            let act = if i + 1 == self.head.len() { Activation::Identity } else { Activation::Relu };
            let (y, c) = dense_forward_batch(&h, d, act)?;
            head_caches.push(c);
            h = y;
        }
        let pred = swap_outer(h.data(), s, b, 2);
        let shape = if single { vec![s, 2] } else { vec![b, s, 2] };
        Ok((
            ParamTensor::new(shape, pred)?,
            ModelCache {
                batch: b,
                steps: s,
                ext: ext_cache,
                est: est_caches,
                head: head_caches,
            },
        ))
    }

    /// Parameter gradients for `grad_pred`, shaped like the predictions.
    pub fn backward(&self, cache: &ModelCache, grad_pred: &ParamTensor) -> Result<Model> {
        self.backward_with_inputs(cache, grad_pred).map(|(g, _)| g)
    }

    /// Parameter gradients plus the gradient with respect to the raw input
    /// frames, `[B·S, L]` in segment-major order.
    pub fn backward_with_inputs(&self, cache: &ModelCache, grad_pred: &ParamTensor) -> Result<(Model, ParamTensor)> {
        let (b, s) = (cache.batch, cache.steps);
        if grad_pred.len() != b * s * 2 || cache.head.len() != self.head.len() || cache.est.len() != self.estimator.len() {
            return Err(Error::Cache(format!(
                "prediction gradient has {} entries, cache expects {}x{}x2",
                grad_pred.len(),
                b,
                s
            )));
        }
        let mut grads = self.zeros_like();

        let mut g = ParamTensor::new(vec![s * b, 2], swap_outer(grad_pred.data(), b, s, 2))?;
        for i in (0..self.head.len()).rev() {
            let (dx, gp) = dense_backward_batch(&cache.head[i], &self.head[i], &g)?;
            grads.head[i] = gp;
            g = dx;
        }

        let mut g = g.reshape(vec![s, b, self.arch.estimator_output_dim()])?;
        for i in (0..self.estimator.len()).rev() {
            let dx = match (&cache.est[i], &mut grads.estimator[i]) {
                (EstimatorCache::Uni(c), EstimatorLayer::Uni(gp)) => {
                    let (dx, p) = lstm_backward_batch(c, &g)?;
                    *gp = p;
                    dx
                }
                (EstimatorCache::Bi(c), EstimatorLayer::Bi { fwd, bwd }) => {
                    let (dx, pf, pb) = bilstm_backward_batch(c, &g)?;
                    *fwd = pf;
                    *bwd = pb;
                    dx
                }
                _ => return Err(Error::Cache("estimator cache does not match the model".into())),
            };
            g = dx;
        }

        let fd = self.arch.feature_dim;
        let g_feat = swap_outer(g.data(), s, b, fd);
        let mut dframes = match (&self.extractor, &cache.ext, &mut grads.extractor) {
            (ExtractorParams::Cnn { convs, dense }, ExtractorCache::Cnn(c), ExtractorParams::Cnn { convs: gc, dense: gd }) => {
                cnn_backward(c, convs, dense, &g_feat, gc, gd)?
            }
            (ExtractorParams::Lstm(p), ExtractorCache::Lstm(c), ExtractorParams::Lstm(gp)) => {
                let (d, g) = lstm_extractor_backward(c, p, &g_feat, self.arch.frame_len)?;
                *gp = g;
                d
            }
            _ => return Err(Error::Cache("extractor cache does not match the model".into())),
        };
        let l = self.arch.frame_len;
        for row in dframes.chunks_exact_mut(l) {
            row.iter_mut().zip(&self.input_norm.gain).for_each(|(v, g)| *v *= g);
        }
        Ok((grads, ParamTensor::new(vec![b * s, l], dframes)?))
    }
}

/// `[a, b, w]` → `[b, a, w]`.
fn swap_outer(data: &[f64], a: usize, b: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * w..(j * a + i + 1) * w].copy_from_slice(&data[(i * b + j) * w..(i * b + j + 1) * w]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    batch: usize,
    steps: usize,
    ext: ExtractorCache,
    est: Vec<EstimatorCache>,
    head: Vec<DenseCache>,
}

#[derive(Debug, Clone)]
enum ExtractorCache {
    Cnn(CnnCache),
    Lstm(LstmExtractorCache),
}

#[derive(Debug, Clone)]
enum EstimatorCache {
    Uni(LstmCache),
    Bi(BiLstmCache),
}

#[derive(Debug, Clone)]
struct CnnStage {
    input: ParamTensor,
    pre: Vec<f64>,
    pre_shape: [usize; 2],
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
struct CnnCache {
    frames: Vec<Vec<CnnStage>>,
    dense: DenseCache,
}

#[derive(Debug, Clone)]
struct LstmExtractorCache {
    lstm: LstmCache,
    steps: usize,
    n: usize,
}

fn cnn_forward(
    x: &[f64],
    n: usize,
    l: usize,
    convs: &[Conv1dParams],
    dense: &DenseParams,
) -> Result<(ParamTensor, ExtractorCache)> {
    let layers: Vec<Conv1dLayer> = convs.iter().map(Conv1dLayer::new).collect();
    let mut flat = Vec::new();
    let mut frames = Vec::with_capacity(n);
    for frame in x.chunks_exact(l) {
        let mut cur = ParamTensor::new(vec![l, 1], frame.to_vec())?;
        let mut stages = Vec::with_capacity(convs.len());
        for (layer, p) in layers.iter().zip(convs) {
            let pre = layer.forward(&cur, p)?;
            let pre_shape = [pre.shape()[0], pre.shape()[1]];
            let act = pre.map(|v| if v > 0.0 { v } else { 0.0 });
            let (pooled, argmax) = maxpool1d(&act)?;
            stages.push(CnnStage {
                input: cur,
                pre: pre.into_data(),
                pre_shape,
                argmax,
            });
            cur = pooled;
        }
        flat.extend_from_slice(cur.data());
        frames.push(stages);
    }
    let flat_dim = flat.len() / n;
    let flat = ParamTensor::new(vec![n, flat_dim], flat)?;
    let (features, dense_cache) = dense_forward_batch(&flat, dense, Activation::Relu)?;
    Ok((
        features,
        ExtractorCache::Cnn(CnnCache {
            frames,
            dense: dense_cache,
        }),
    ))
}

fn cnn_backward(
    cache: &CnnCache,
    convs: &[Conv1dParams],
    dense: &DenseParams,
    grad_feat: &[f64],
    grad_convs: &mut [Conv1dParams],
    grad_dense: &mut DenseParams,
) -> Result<Vec<f64>> {
    let n = cache.frames.len();
    let g = ParamTensor::new(vec![n, dense.output_dim()], grad_feat.to_vec())?;
    let (dflat, gd) = dense_backward_batch(&cache.dense, dense, &g)?;
    *grad_dense = gd;
    let layers: Vec<Conv1dLayer> = convs.iter().map(Conv1dLayer::new).collect();
    let mut acc: Vec<Conv1dGradAccumulator> = convs.iter().map(Conv1dGradAccumulator::new).collect();
    let flat_dim = dense.input_dim();
    let mut dframes = Vec::new();
    for (f, stages) in cache.frames.iter().enumerate() {
        let mut g = ParamTensor::new(vec![flat_dim], dflat.data()[f * flat_dim..(f + 1) * flat_dim].to_vec())?;
        for k in (0..stages.len()).rev() {
            let st = &stages[k];
            let mut d_act = maxpool1d_backward(&st.pre_shape, &st.argmax, &g)?;
            for (d, &z) in d_act.data_mut().iter_mut().zip(&st.pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            g = layers[k].backward(&st.input, &convs[k], &d_act, &mut acc[k])?;
        }
        dframes.extend_from_slice(g.data());
    }
    for (dst, a) in grad_convs.iter_mut().zip(acc) {
        *dst = a.finish();
    }
    Ok(dframes)
}

fn lstm_extractor_forward(x: &[f64], n: usize, l: usize, chunk: usize, p: &LstmParams) -> Result<(ParamTensor, ExtractorCache)> {
    let steps = l.div_ceil(chunk);
    // time-major [T, N, chunk], zero-padded at the end of each frame
    let mut seq = vec![0.0; steps * n * chunk];
    for (f, frame) in x.chunks_exact(l).enumerate() {
        for (t, piece) in frame.chunks(chunk).enumerate() {
            let at = (t * n + f) * chunk;
            seq[at..at + piece.len()].copy_from_slice(piece);
        }
    }
    let seq = ParamTensor::new(vec![steps, n, chunk], seq)?;
    let (out, lstm) = lstm_forward_batch(&seq, p, None)?;
    let u = p.units();
    let last = out.data()[(steps - 1) * n * u..].to_vec();
    Ok((
        ParamTensor::new(vec![n, u], last)?,
        ExtractorCache::Lstm(LstmExtractorCache { lstm, steps, n }),
    ))
}

fn lstm_extractor_backward(
    cache: &LstmExtractorCache,
    p: &LstmParams,
    grad_feat: &[f64],
    l: usize,
) -> Result<(Vec<f64>, LstmParams)> {
    let u = p.units();
    let (steps, n) = (cache.steps, cache.n);
    let mut g = vec![0.0; steps * n * u];
    g[(steps - 1) * n * u..].copy_from_slice(grad_feat);
    let g = ParamTensor::new(vec![steps, n, u], g)?;
    let (dseq, grads) = lstm_backward_batch(&cache.lstm, &g)?;
    let chunk = p.input_dim();
    let mut dframes = vec![0.0; n * l];
    for f in 0..n {
        for t in 0..steps {
            let lo = t * chunk;
            let hi = (lo + chunk).min(l);
            let at = (t * n + f) * chunk;
            dframes[f * l + lo..f * l + hi].copy_from_slice(&dseq.data()[at..at + hi - lo]);
        }
    }
    Ok((dframes, grads))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: ArchSpec,
    norm: NormSpec,
    seed: u64,
    split_seed: u64,
    input_norm: InputNorm,
    tensors: Vec<TensorEntry>,
}

/// A model together with everything needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub norm: NormSpec,
    /// Initialization seed.
    pub seed: u64,
    /// Seed of the train/validation/test split the model was trained on.
    pub split_seed: u64,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            arch: m.arch.clone(),
            norm: self.norm,
            seed: self.seed,
            split_seed: self.split_seed,
            input_norm: m.input_norm.clone(),
            tensors: m
                .param_names()
                .into_iter()
                .zip(m.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * m.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in m.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "not a checkpoint (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(fmt(12, format!("truncated header: need {hlen} bytes")));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| fmt(12, format!("invalid header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(fmt(12, format!("unsupported checkpoint version {}", header.version)));
        }
        let mut model = Model::build(&header.arch, 0)?;
        if header.input_norm.offset.len() != header.arch.frame_len || header.input_norm.gain.len() != header.arch.frame_len {
            return Err(Error::Compatibility(format!(
                "input normalization covers {} samples, frames have {}",
                header.input_norm.gain.len(),
                header.arch.frame_len
            )));
        }
        model.input_norm = header.input_norm;
        let names = model.param_names();
        if names.len() != header.tensors.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, architecture {} needs {}",
                header.tensors.len(),
                header.arch.name(),
                names.len()
            )));
        }
        let mut pos = 12 + hlen;
        for ((name, t), entry) in names.iter().zip(model.tensors_mut()).zip(&header.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
            }
            let need = 8 * t.len();
            if bytes.len() < pos + need {
                return Err(fmt(pos, format!("truncated tensor {name}")));
            }
            for (dst, c) in t.data_mut().iter_mut().zip(bytes[pos..pos + need].chunks_exact(8)) {
                *dst = f64::from_le_bytes(c.try_into().unwrap());
            }
            pos += need;
        }
        if pos != bytes.len() {
            return Err(fmt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ModelCheckpoint {
            model,
            norm: header.norm,
            seed: header.seed,
            split_seed: header.split_seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
