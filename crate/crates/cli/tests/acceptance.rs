//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackpulse::datagen::{self, GenerateSpec, ScenarioMix};
use trackpulse::framing::{frame, frame_signal};
use trackpulse::layers::*;
use trackpulse::models::{Estimator, Extractor};
use trackpulse::numcore::{grad_check, sigmoid_scalar, tanh_scalar};
use trackpulse::simkit::{add_noise, simulate, static_deflection};
use trackpulse::training::{self, metrics, AdamConfig};
use trackpulse::{ArchSpec, InputNorm, Model, ModelCheckpoint, NormSpec, ParamTensor, TrackModelConfig, TrackProfile, TrainConfig};

type Outcome = Result<String, String>;

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Desk-scale pipeline: dataset seed, split seed and training seeds.
const DESK_RECORDS: usize = 1000;
const DESK_DATA_SEED: u64 = 7;
const DESK_SPLIT_SEED: u64 = 11;
const DESK_EPOCHS: usize = 100;
const TREND_SEEDS: [u64; 3] = [3, 4, 5];
const TREND_EPOCHS: usize = 10;
const TREND_NOISE: f64 = 0.15;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: trackpulse::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rand_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ParamTensor {
    ParamTensor::uniform(shape, bound, rng)
}

fn dot(a: &ParamTensor, b: &ParamTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_lstm(d: usize, u: usize, rng: &mut ChaCha8Rng) -> LstmParams {
    let mut p = LstmParams::zeros(d, u);
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = rand_tensor(&shape, 0.8, rng);
    }
    p
}

/// Worst gradient error over every tensor of an LSTM parameter set.
fn lstm_param_errors(p: &LstmParams, grads: &LstmParams, f: impl Fn(&LstmParams) -> f64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for k in 0..12 {
        let err = lib(grad_check(
            |t| {
                let mut q = p.clone();
                *q.tensors_mut()[k] = t.clone();
                f(&q)
            },
            grads.tensors()[k],
            p.tensors()[k],
            FD_STEP,
        ))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn grad_dense(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for act in [Activation::Relu, Activation::Identity] {
        let mut p = DenseParams::init(5, 4, rng);
        p.b = rand_tensor(&[4], 0.5, rng);
        let x = rand_tensor(&[3, 5], 1.0, rng);
        let r = rand_tensor(&[3, 4], 1.0, rng);
        let (_, cache) = lib(dense_forward_batch(&x, &p, act))?;
        let (dx, g) = lib(dense_backward_batch(&cache, &p, &r))?;
        let loss = |x: &ParamTensor, p: &DenseParams| dot(&dense(x, p, act).unwrap(), &r);
        worst = worst.max(lib(grad_check(|t| loss(t, &p), &dx, &x, FD_STEP))?);
        let fw = |t: &ParamTensor| loss(&x, &DenseParams { w: t.clone(), b: p.b.clone() });
        worst = worst.max(lib(grad_check(fw, &g.w, &p.w, FD_STEP))?);
        let fb = |t: &ParamTensor| loss(&x, &DenseParams { w: p.w.clone(), b: t.clone() });
        worst = worst.max(lib(grad_check(fb, &g.b, &p.b, FD_STEP))?);
    }
    Ok(worst)
}

fn grad_conv(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (l, c, f, k) = (rng.random_range(6..14), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let mut p = Conv1dParams::init(c, f, k, rng);
    p.bias = rand_tensor(&[f], 0.5, rng);
    let x = rand_tensor(&[l, c], 1.0, rng);
    let r = rand_tensor(&[l - k + 1, f], 1.0, rng);
    let mut acc = Conv1dGradAccumulator::new(&p);
    let dx = lib(Conv1dLayer::new(&p).backward(&x, &p, &r, &mut acc))?;
    let g = acc.finish();
    let loss = |x: &ParamTensor, p: &Conv1dParams| dot(&conv1d(x, p).unwrap(), &r);
    let mut worst = lib(grad_check(|t| loss(t, &p), &dx, &x, FD_STEP))?;
    let ff = |t: &ParamTensor| {
        loss(
            &x,
            &Conv1dParams {
                filters: t.clone(),
                bias: p.bias.clone(),
            },
        )
    };
    worst = worst.max(lib(grad_check(ff, &g.filters, &p.filters, FD_STEP))?);
    let fb = |t: &ParamTensor| {
        loss(
            &x,
            &Conv1dParams {
                filters: p.filters.clone(),
                bias: t.clone(),
            },
        )
    };
    Ok(worst.max(lib(grad_check(fb, &g.bias, &p.bias, FD_STEP))?))
}

fn grad_maxpool(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (l, f) = (rng.random_range(2..12), rng.random_range(1..4));
    let x = rand_tensor(&[l, f], 1.0, rng);
    let (y, arg) = lib(maxpool1d(&x))?;
    let r = rand_tensor(y.shape(), 1.0, rng);
    let dx = lib(maxpool1d_backward(x.shape(), &arg, &r))?;
    lib(grad_check(|t| dot(&maxpool1d(t).unwrap().0, &r), &dx, &x, FD_STEP))
}

fn grad_cell(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (d, u) = (3, 4);
    let p = random_lstm(d, u, rng);
    let state = LstmState {
        h: rand_tensor(&[u], 1.0, rng).into_data(),
        c: rand_tensor(&[u], 1.0, rng).into_data(),
    };
    let x = rand_tensor(&[d], 1.0, rng);
    let r = rand_tensor(&[u], 1.0, rng);
    let step = x.clone().reshape(vec![1, 1, d]).unwrap();
    let (_, cache) = lib(lstm_forward_batch(&step, &p, Some((&state.h, &state.c))))?;
    let (dx, grads) = lib(lstm_backward_batch(&cache, &r.clone().reshape(vec![1, 1, u]).unwrap()))?;
    let loss = |x: &ParamTensor, p: &LstmParams| -> f64 {
        let s = lstm_cell(x.data(), &state, p).unwrap();
        s.h.iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let dx = dx.reshape(vec![d]).unwrap();
    let worst = lib(grad_check(|t| loss(t, &p), &dx, &x, FD_STEP))?;
    Ok(worst.max(lstm_param_errors(&p, &grads, |q| loss(&x, q))?))
}

fn grad_lstm_sequence(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (t, b, d, u) = (6, 2, 3, 4);
    let p = random_lstm(d, u, rng);
    let x = rand_tensor(&[t, b, d], 1.0, rng);
    let r = rand_tensor(&[t, b, u], 1.0, rng);
    let (_, cache) = lib(lstm_forward_batch(&x, &p, None))?;
    let (dx, grads) = lib(lstm_backward_batch(&cache, &r))?;
    let loss = |x: &ParamTensor, p: &LstmParams| dot(&lstm_forward_batch(x, p, None).unwrap().0, &r);
    let worst = lib(grad_check(|v| loss(v, &p), &dx, &x, FD_STEP))?;
    Ok(worst.max(lstm_param_errors(&p, &grads, |q| loss(&x, q))?))
}

fn grad_bilstm(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (t, b, d, u) = (5, 2, 3, 3);
    let pf = random_lstm(d, u, rng);
    let pb = random_lstm(d, u, rng);
    let x = rand_tensor(&[t, b, d], 1.0, rng);
    let r = rand_tensor(&[t, b, 2 * u], 1.0, rng);
    let (_, cache) = lib(bilstm_forward_batch(&x, &pf, &pb))?;
    let (dx, gf, gb) = lib(bilstm_backward_batch(&cache, &r))?;
    let loss = |x: &ParamTensor, f: &LstmParams, b: &LstmParams| dot(&bilstm_forward_batch(x, f, b).unwrap().0, &r);
    let mut worst = lib(grad_check(|v| loss(v, &pf, &pb), &dx, &x, FD_STEP))?;
    worst = worst.max(lstm_param_errors(&pf, &gf, |q| loss(&x, q, &pb))?);
    Ok(worst.max(lstm_param_errors(&pb, &gb, |q| loss(&x, &pf, q))?))
}

fn tiny_arch(extractor: Extractor, estimator: Estimator) -> ArchSpec {
    ArchSpec {
        extractor,
        estimator,
        feature_dim: 4,
        estimator_units: vec![3, 2],
        head_units: vec![3, 2],
        frame_len: 12,
        cnn_filters: vec![2, 3],
        cnn_kernel: 2,
        chunk: 5,
    }
}

const ARCHS: [(Extractor, Estimator); 4] = [
    (Extractor::Cnn, Estimator::Lstm),
    (Extractor::Lstm, Estimator::Lstm),
    (Extractor::Cnn, Estimator::Bilstm),
    (Extractor::Lstm, Estimator::Bilstm),
];

fn grad_model(seed: u64, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (e, s) in ARCHS {
        let mut m = lib(Model::build(&tiny_arch(e, s), seed))?;
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.7..0.7);
            }
        }
        m.input_norm = InputNorm {
            offset: (0..12).map(|_| rng.random_range(-0.5..0.5)).collect(),
            gain: (0..12).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let x = rand_tensor(&[2, 3, 12], 1.0, rng);
        let r = rand_tensor(&[2, 3, 2], 1.0, rng);
        let (_, cache) = lib(m.forward_train(&x))?;
        let (g, dx) = lib(m.backward_with_inputs(&cache, &r))?;
        for k in 0..m.tensors().len() {
            let f = |t: &ParamTensor| {
                let mut mm = m.clone();
                *mm.tensors_mut()[k] = t.clone();
                dot(&mm.forward(&x).unwrap(), &r)
            };
            worst = worst.max(lib(grad_check(f, g.tensors()[k], m.tensors()[k], FD_STEP))?);
        }
        let dx = lib(dx.reshape(vec![2, 3, 12]))?;
        worst = worst.max(lib(grad_check(|t| dot(&m.forward(t).unwrap(), &r), &dx, &x, FD_STEP))?);
    }
    Ok(worst)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    type Check = fn(u64, &mut ChaCha8Rng) -> Result<f64, String>;
    let checks: [(&str, Check); 7] = [
        ("dense", |_, r| grad_dense(r)),
        ("conv1d", |_, r| grad_conv(r)),
        ("maxpool", |_, r| grad_maxpool(r)),
        ("lstm_cell", |_, r| grad_cell(r)),
        ("lstm_forward", |_, r| grad_lstm_sequence(r)),
        ("bilstm_forward", |_, r| grad_bilstm(r)),
        ("model", grad_model),
    ];
    for (name, check) in checks {
        let mut worst = 0.0f64;
        for seed in 0..GRAD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let err = check(seed, &mut rng)?;
            ensure(err < GRAD_TOL, || format!("{name} seed {seed}: relative error {err:.3e}"))?;
            worst = worst.max(err);
        }
        report.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!("worst relative error per layer over {GRAD_SEEDS} seeds: {}", report.join(", ")))
}

fn direct_conv(x: &ParamTensor, p: &Conv1dParams) -> Vec<f64> {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let (f, k) = (p.n_filters(), p.taps());
    let w = p.filters.data();
    let mut out = Vec::new();
    for i in 0..=(l - k) {
        for fi in 0..f {
            let mut acc = p.bias.data()[fi];
            for j in 0..k {
                for ci in 0..c {
                    acc = w[(fi * c + ci) * k + j].mul_add(x.at(i + j, ci), acc);
                }
            }
            out.push(acc);
        }
    }
    out
}

/// One recurrence step written out gate by gate.
fn reference_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let pre = |wx: &ParamTensor, wh: &ParamTensor, b: &ParamTensor, j: usize| {
        let mut acc = b.data()[j];
        for (l, v) in x.iter().enumerate() {
            acc = wx.at(j, l).mul_add(*v, acc);
        }
        for (l, v) in h.iter().enumerate() {
            acc = wh.at(j, l).mul_add(*v, acc);
        }
        acc
    };
    let u = p.units();
    let mut hn = vec![0.0; u];
    let mut cn = vec![0.0; u];
    for j in 0..u {
        let i = sigmoid_scalar(pre(&p.w_xi, &p.w_hi, &p.b_i, j));
        let f = sigmoid_scalar(pre(&p.w_xf, &p.w_hf, &p.b_f, j));
        let o = sigmoid_scalar(pre(&p.w_xo, &p.w_ho, &p.b_o, j));
        let g = tanh_scalar(pre(&p.w_xc, &p.w_hc, &p.b_c, j));
        cn[j] = i * g + f * c[j];
        hn[j] = o * tanh_scalar(cn[j]);
    }
    (hn, cn)
}

fn reference_sequence(seq: &ParamTensor, p: &LstmParams, h0: &[f64], c0: &[f64]) -> Vec<f64> {
    let (mut h, mut c) = (h0.to_vec(), c0.to_vec());
    let mut out = Vec::new();
    for t in 0..seq.shape()[0] {
        (h, c) = reference_step(seq.row(t), &h, &c, p);
        out.extend_from_slice(&h);
    }
    out
}

fn layer_oracles() -> Outcome {
    let mut counts = [0usize; 3];
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (l, c, f, k) = (rng.random_range(8..60), rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..8));
        let mut p = Conv1dParams::init(c, f, k, &mut rng);
        p.bias = rand_tensor(&[f], 1.0, &mut rng);
        let x = rand_tensor(&[l, c], 2.0, &mut rng);
        let y = lib(conv1d(&x, &p))?;
        ensure(y.data() == &direct_conv(&x, &p)[..], || format!("conv1d differs from direct sum, seed {seed}"))?;
        counts[0] += y.len();

        let (t, d, u) = (rng.random_range(1..20), rng.random_range(1..6), rng.random_range(1..9));
        let lp = random_lstm(d, u, &mut rng);
        let seq = rand_tensor(&[t, d], 2.0, &mut rng);
        let zeros = vec![0.0; u];
        let y = lib(lstm_forward(&seq, &lp, None))?;
        ensure(y.data() == &reference_sequence(&seq, &lp, &zeros, &zeros)[..], || {
            format!("lstm_forward differs from the per-step recurrence, seed {seed}")
        })?;
        let init = LstmState {
            h: rand_tensor(&[u], 1.0, &mut rng).into_data(),
            c: rand_tensor(&[u], 1.0, &mut rng).into_data(),
        };
        let y = lib(lstm_forward(&seq, &lp, Some(&init)))?;
        ensure(y.data() == &reference_sequence(&seq, &lp, &init.h, &init.c)[..], || {
            format!("lstm_forward with initial state differs, seed {seed}")
        })?;
        counts[1] += 2 * y.len();

        let pf = random_lstm(d, u, &mut rng);
        let pb = random_lstm(d, u, &mut rng);
        let y = lib(bilstm_forward(&seq, &pf, &pb))?;
        let mirrored = lib(bilstm_forward(&reverse_time(&seq), &pb, &pf))?;
        for s in 0..t {
            let a = mirrored.row(s);
            let b = y.row(t - 1 - s);
            ensure(a[..u] == b[u..] && a[u..] == b[..u], || format!("bilstm reversal symmetry broken, seed {seed} step {s}"))?;
        }
        counts[2] += y.len();
    }
    Ok(format!(
        "bit-exact: conv1d {} outputs, lstm {} outputs, bilstm mirror {} outputs",
        counts[0], counts[1], counts[2]
    ))
}

fn framing() -> Outcome {
    let config = TrackModelConfig::default();
    let rec = lib(simulate(&config, &TrackProfile::nominal(config.n_core_sleepers)))?;
    ensure(rec.signal.len() == 8660, || format!("signal has {} samples", rec.signal.len()))?;
    let seq = lib(frame(&rec))?;
    ensure(seq.n_frames() == 10 && seq.frame_len == 866, || {
        format!("{} frames of {}", seq.n_frames(), seq.frame_len)
    })?;
    let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same(&seq.concat(), &rec.signal), || "concatenated frames differ from the signal".into())?;

    let dx = config.sleeper_spacing / config.samples_per_span as f64;
    for i in 0..10 {
        // sample k is recorded with the wheel at record_start + k·dx
        let node = ((config.core_sleeper_position(i) - config.record_start()) / dx).round() as usize;
        ensure(seq.center(i) == node && rec.sleeper_centers[i] == node, || {
            format!("frame {i} centred at {} but sleeper node is sample {node}", seq.center(i))
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<f64> = (0..8660).map(|_| rng.random_range(-1e3..1e3)).collect();
    let seq = lib(frame_signal(&raw, 10))?;
    ensure(same(&seq.concat(), &raw), || "arbitrary signal not reproduced".into())?;
    for i in 0..10 {
        ensure(same(seq.frame(i), &raw[i * 866..(i + 1) * 866]), || format!("frame {i} not contiguous"))?;
    }
    Ok("10 frames of 866, bit-exact concatenation, centres on sleeper nodes".into())
}

fn noise_model() -> Outcome {
    let n = 1_000_000;
    let signal: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * 1e-3;
            (7.0 * t).sin() + 0.4 * (53.0 * t).cos() + 0.1
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noisy = add_noise(&signal, 0.15, &mut rng);
    let power = signal.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let added: Vec<f64> = noisy.iter().zip(&signal).map(|(a, b)| a - b).collect();
    let mean = added.iter().sum::<f64>() / n as f64;
    let var = added.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ratio = var / power;
    ensure((0.14..=0.16).contains(&ratio), || format!("variance / power = {ratio:.5}"))?;
    Ok(format!("variance / power = {ratio:.5}"))
}

fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn physics() -> Outcome {
    let start = Instant::now();
    let config = TrackModelConfig::default();
    let profile = TrackProfile::nominal(config.n_core_sleepers);

    let w = lib(static_deflection(&config, &profile))?;
    let (kp, kb) = (profile.kp[0], profile.kb[0]);
    // railpad and ballast in series, smeared over one sleeper bay
    let k_foundation = kp * kb / (kp + kb) / config.sleeper_spacing;
    let beta = (k_foundation / (4.0 * config.rail_ei)).powf(0.25);
    let closed = config.wheel_load * beta / (2.0 * k_foundation);
    let static_err = (w - closed).abs() / closed;
    ensure(static_err < 0.15, || format!("static deflection {w:.4e} m vs closed form {closed:.4e} m"))?;

    let base = lib(simulate(&config, &profile))?;
    let sps = config.samples_per_span;
    let mut worst_period = 0.0f64;
    for span in 0..config.n_core_sleepers - 1 {
        let e = rel_rms(&base.signal[(span + 1) * sps..(span + 2) * sps], &base.signal[span * sps..(span + 1) * sps]);
        worst_period = worst_period.max(e);
    }
    ensure(worst_period < 0.05, || format!("adjacent spans differ by {worst_period:.4} relative RMS"))?;

    let r2_min = datagen::StiffnessRanges::default().r2.kb.lo;
    let mut gains = Vec::new();
    for i in [1usize, 5, 8] {
        let mut soft = profile.clone();
        soft.kb[i] = r2_min;
        let rec = lib(simulate(&config, &soft))?;
        let c = base.sleeper_centers[i];
        let window = c.saturating_sub(sps)..(c + sps + 1).min(base.signal.len());
        let peak = |s: &[f64]| s[window.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (p0, p1) = (peak(&base.signal), peak(&rec.signal));
        ensure(p1 > p0, || format!("ballast defect at sleeper {i}: peak {p1:.4} vs healthy {p0:.4}"))?;
        gains.push(p1 / p0);
    }

    let fine = TrackModelConfig {
        substeps: 2 * config.substeps,
        ..config.clone()
    };
    let halved = lib(simulate(&fine, &profile))?;
    let step_change = rel_rms(&halved.signal, &base.signal);
    ensure(step_change < 0.02, || format!("halving the step changed the output by {step_change:.4}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "static {:.2}% off closed form, periodicity {:.2e}, defect peak gain {}, step change {:.2e}",
        100.0 * static_err,
        worst_period,
        gains.iter().map(|g| format!("{g:.2}x")).collect::<Vec<_>>().join("/"),
        step_change
    ))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_trackpulse"))
        .env("TRACKPULSE_THREADS", "1")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn pipeline_outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let (data, ck, metrics) = (p("d.abads"), p("m.ckpt"), p("metrics.json"));
    cli(&["generate", "--n", "6", "--seed", "7", "--noise-ratio", "0.15", "--out", &data])?;
    cli(&["train", "--dataset", &data, "--arch", "lstm-bilstm", "--epochs", "2", "--seed", "3", "--quiet", "--out", &ck])?;
    cli(&["eval", "--checkpoint", &ck, "--dataset", &data, "--out", &metrics])?;
    ["d.abads", "m.ckpt", "m.ckpt.loss.csv", "metrics.json"]
        .iter()
        .map(|n| std::fs::read(dir.join(n)).map(|b| (n.to_string(), b)).map_err(|e| format!("{n}: {e}")))
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_outputs(a.path())?;
    let second = pipeline_outputs(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let sizes: Vec<String> = first.iter().map(|(n, b)| format!("{n} {} B", b.len())).collect();
    Ok(format!("byte-identical across two runs: {}", sizes.join(", ")))
}

fn checkpoint_round_trip() -> Outcome {
    let data = lib(datagen::generate(&GenerateSpec::new(3, 21)))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let norm = NormSpec::default();
    let mut compared = 0usize;
    for name in ["cnn-lstm", "lstm-lstm", "cnn-bilstm", "lstm-bilstm"] {
        let mut arch = lib(ArchSpec::parse(name))?;
        arch.frame_len = data.frame_len();
        let mut model = lib(Model::build(&arch, 17))?;
        let segs = lib(training::segments(&data, arch.frame_len, &norm))?;
        model.input_norm = training::input_norm_for(&segs);
        let before = lib(training::predict_dataset(&model, &norm, &data))?;
        let ck = ModelCheckpoint {
            model,
            norm: norm.clone(),
            seed: 17,
            split_seed: 5,
        };
        let path = dir.path().join(format!("{name}.ckpt"));
        lib(ck.save(&path))?;
        let back = lib(ModelCheckpoint::load(&path))?;
        let after = lib(training::predict_dataset(&back.model, &back.norm, &data))?;
        let bits = |v: &Vec<Vec<[f64; 2]>>| -> Vec<u64> { v.iter().flatten().flatten().map(|x| x.to_bits()).collect() };
        ensure(bits(&before) == bits(&after), || format!("{name}: predictions changed after reload"))?;
        compared += bits(&before).len();
    }
    Ok(format!("{compared} predictions bit-identical after save and load for all four architectures"))
}

fn overfit_one_record() -> Outcome {
    let spec = GenerateSpec {
        mix: ScenarioMix([0.0, 1.0, 0.0]),
        ..GenerateSpec::new(1, 5)
    };
    let data = lib(datagen::generate(&spec))?;
    let mut arch = lib(ArchSpec::parse("lstm-bilstm"))?;
    arch.frame_len = data.frame_len();
    let segs = lib(training::segments(&data, arch.frame_len, &NormSpec::default()))?;
    let model = lib(Model::build(&arch, 1))?;
    let config = TrainConfig {
        epochs: 500,
        batch_size: 1,
        seed: 1,
        adam: AdamConfig::default(),
        ..TrainConfig::default()
    };
    let outcome = lib(training::train(&model, &segs, &segs, &config))?;
    let first = outcome.log.iter().find(|e| e.val_loss < 1e-4).map(|e| e.epoch);
    let best = outcome.best_val_loss;
    ensure(first.is_some(), || format!("lowest training MSE after 500 epochs {best:.3e}"))?;
    Ok(format!("training MSE below 1e-4 at epoch {}, lowest {best:.3e}", first.unwrap()))
}

struct Desk {
    clean: trackpulse::Dataset,
    gen_secs: f64,
}

fn desk_dataset() -> Result<Desk, String> {
    let start = Instant::now();
    let clean = lib(datagen::generate(&GenerateSpec::new(DESK_RECORDS, DESK_DATA_SEED)))?;
    ensure(clean.kind_counts().iter().all(|&c| c.abs_diff(DESK_RECORDS / 3) <= 1), || {
        format!("scenario counts {:?}", clean.kind_counts())
    })?;
    Ok(Desk {
        clean,
        gen_secs: start.elapsed().as_secs_f64(),
    })
}

fn train_and_score(
    data: &training::SplitData,
    arch_name: &str,
    seed: u64,
    epochs: usize,
) -> Result<trackpulse::MetricsReport, String> {
    let mut arch = lib(ArchSpec::parse(arch_name))?;
    arch.frame_len = data.train.frame_len();
    let config = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let (ck, _) = lib(training::fit(&arch, data, DESK_SPLIT_SEED, &config, |e| {
        if e.epoch % 10 == 0 {
            eprintln!("    {arch_name} seed {seed} epoch {}: val {:.3e}", e.epoch, e.val_loss);
        }
    }))?;
    lib(training::evaluate(&ck.model, &ck.norm, &data.test))
}

fn desk_end_to_end(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let data = lib(training::split_dataset(&desk.clean, DESK_SPLIT_SEED))?;
    let m = train_and_score(&data, "lstm-bilstm", TREND_SEEDS[0], DESK_EPOCHS)?;
    let baseline = lib(training::mean_predictor_metrics(&data.train, &data.test))?;
    let secs = desk.gen_secs + start.elapsed().as_secs_f64();
    let summary = format!(
        "test MAPE {:.2}% (kp {:.2}%, kb {:.2}%), mean predictor {:.2}%, {:.1} min",
        m.overall_mape_pct,
        m.mape_kp_pct,
        m.mape_kb_pct,
        baseline.overall_mape_pct,
        secs / 60.0
    );
    ensure(m.overall_mape_pct < 5.0, || summary.clone())?;
    ensure(m.overall_mape_pct <= 0.5 * baseline.overall_mape_pct, || summary.clone())?;
    ensure(secs < 3600.0, || summary.clone())?;
    Ok(summary)
}

fn architecture_trend(desk: &Desk) -> Outcome {
    let noisy = lib(desk.clean.with_noise(TREND_NOISE))?;
    let data = lib(training::split_dataset(&noisy, DESK_SPLIT_SEED))?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in TREND_SEEDS {
        let bi = train_and_score(&data, "lstm-bilstm", seed, TREND_EPOCHS)?.overall_mape_pct;
        let cnn = train_and_score(&data, "cnn-lstm", seed, TREND_EPOCHS)?.overall_mape_pct;
        if bi <= cnn {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {bi:.2}% vs {cnn:.2}%"));
    }
    let summary = format!("lstm-bilstm vs cnn-lstm after {TREND_EPOCHS} epochs, {}", rows.join("; "));
    ensure(wins >= 2, || summary.clone())?;
    Ok(summary)
}

fn metrics_arithmetic() -> Outcome {
    // Dyadic fixtures keep every quotient exact in binary.
    let truth = vec![vec![[2.5e8, 1.6e7], [1.25e8, 1.0e7]], vec![[2.0e8, 2.0e7]]];
    let pred = vec![vec![[2.5e8 + 3.125e7, 1.6e7 - 1.0e6], [1.25e8, 1.0e7 + 1.25e6]], vec![[2.0e8 - 5.0e7, 2.0e7]]];
    let m = lib(metrics(&pred, &truth))?;
    // kp: |e|/t = 1/8, 0, 1/4 → mean 1/8; squares (3.125e7² + 5e7²)/3
    // kb: |e|/t = 1/16, 1/8, 0 → mean 1/16; squares (1e6² + 1.25e6²)/3
    let want_mape_kp = 100.0 * (0.125 + 0.0 + 0.25) / 3.0;
    let want_mape_kb = 100.0 * (0.0625 + 0.125 + 0.0) / 3.0;
    let want_rmse_kp = ((3.125e7f64.powi(2) + 0.0 + 5.0e7f64.powi(2)) / 3.0).sqrt() / 1e6;
    let want_rmse_kb = ((1.0e6f64.powi(2) + 1.25e6f64.powi(2) + 0.0) / 3.0).sqrt() / 1e6;
    ensure(m.mape_kp_pct == want_mape_kp && m.mape_kb_pct == want_mape_kb, || format!("{m:?}"))?;
    ensure(m.rmse_kp_mn_m == want_rmse_kp && m.rmse_kb_mn_m == want_rmse_kb, || format!("{m:?}"))?;
    ensure(m.overall_mape_pct == (want_mape_kp + want_mape_kb) / 2.0 && m.n_records == 2, || format!("{m:?}"))?;

    // per-parameter errors of 1.70% and 0.70% average to 1.20%
    let truth = vec![vec![[1.0e8, 1.0e7]; 4]];
    let pred = vec![vec![[1.017e8, 0.993e7], [0.983e8, 1.007e7], [1.017e8, 1.007e7], [0.983e8, 0.993e7]]];
    let m = lib(metrics(&pred, &truth))?;
    ensure(m.overall_mape_pct == (m.mape_kp_pct + m.mape_kb_pct) / 2.0, || format!("{m:?}"))?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
    ensure(close(m.mape_kp_pct, 1.70) && close(m.mape_kb_pct, 0.70) && close(m.overall_mape_pct, 1.20), || {
        format!("{m:?}")
    })?;
    Ok(format!(
        "hand fixtures exact; {:.2}% and {:.2}% give overall {:.2}%",
        m.mape_kp_pct, m.mape_kb_pct, m.overall_mape_pct
    ))
}

fn run(id: usize, name: &str, f: &dyn Fn() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match result {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} {id:>2} {name}: {detail} [{secs:.1} s]");
    ok
}

fn main() {
    // Optional criterion ids select a subset; none runs everything.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut ok = true;
    let mut check = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            ok &= run(id, name, f);
        }
    };
    check(1, "gradient correctness", &gradient_correctness);
    check(2, "layer oracles", &layer_oracles);
    check(3, "framing", &framing);
    check(4, "noise model", &noise_model);
    check(5, "simulator physics", &physics);
    check(6, "determinism", &determinism);
    check(7, "checkpoint round trip", &checkpoint_round_trip);
    check(8, "overfit one record", &overfit_one_record);
    if wanted(9) || wanted(10) {
        match desk_dataset() {
            Ok(desk) => {
                check(9, "desk-scale end to end", &|| desk_end_to_end(&desk));
                check(10, "architecture ordering", &|| architecture_trend(&desk));
            }
            Err(e) => {
                check(9, "desk-scale end to end", &|| Err(format!("dataset generation failed: {e}")));
                check(10, "architecture ordering", &|| Err(format!("dataset generation failed: {e}")));
            }
        }
    }
    check(11, "metrics arithmetic", &metrics_arithmetic);
    if !ok {
        std::process::exit(1);
    }
}
