//! LSTM cell, unrolled LSTM and bidirectional LSTM with backpropagation
//! through time.
//!
//! Batched sequences are time-major `[T, B, d]` tensors. Gate blocks are
//! ordered input, forget, output, candidate throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::numcore::{sigmoid_in_place, tanh_in_place, ParamTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_xi: ParamTensor,
    pub w_xf: ParamTensor,
    pub w_xo: ParamTensor,
    pub w_xc: ParamTensor,
    pub w_hi: ParamTensor,
    pub w_hf: ParamTensor,
    pub w_ho: ParamTensor,
    pub w_hc: ParamTensor,
    pub b_i: ParamTensor,
    pub b_f: ParamTensor,
    pub b_o: ParamTensor,
    pub b_c: ParamTensor,
}

/// Parameter names in a fixed order, matching [`LstmParams::tensors`].
pub const LSTM_PARAM_NAMES: [&str; 12] = [
    "w_xi", "w_xf", "w_xo", "w_xc", "w_hi", "w_hf", "w_ho", "w_hc", "b_i", "b_f", "b_o", "b_c",
];

impl LstmParams {
    pub fn zeros(input_dim: usize, units: usize) -> Self {
        let wx = || ParamTensor::zeros(&[units, input_dim]);
        let wh = || ParamTensor::zeros(&[units, units]);
        let b = || ParamTensor::zeros(&[units]);
        LstmParams {
            w_xi: wx(),
            w_xf: wx(),
            w_xo: wx(),
            w_xc: wx(),
            w_hi: wh(),
            w_hf: wh(),
            w_ho: wh(),
            w_hc: wh(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_c: b(),
        }
    }

    /// Uniform `±1/√fan_in` weights, forget bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, units: usize, rng: &mut R) -> Self {
        let bx = 1.0 / (input_dim as f64).sqrt();
        let bh = 1.0 / (units as f64).sqrt();
        let mut p = Self::zeros(input_dim, units);
        for w in [&mut p.w_xi, &mut p.w_xf, &mut p.w_xo, &mut p.w_xc] {
            *w = ParamTensor::uniform(&[units, input_dim], bx, rng);
        }
        for w in [&mut p.w_hi, &mut p.w_hf, &mut p.w_ho, &mut p.w_hc] {
            *w = ParamTensor::uniform(&[units, units], bh, rng);
        }
        p.b_f.fill(1.0);
        p
    }

    pub fn units(&self) -> usize {
        self.b_i.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn tensors(&self) -> [&ParamTensor; 12] {
        [
            &self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc, &self.w_hi, &self.w_hf, &self.w_ho,
            &self.w_hc, &self.b_i, &self.b_f, &self.b_o, &self.b_c,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 12] {
        [
            &mut self.w_xi,
            &mut self.w_xf,
            &mut self.w_xo,
            &mut self.w_xc,
            &mut self.w_hi,
            &mut self.w_hf,
            &mut self.w_ho,
            &mut self.w_hc,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.units();
        let d = self.input_dim();
        for w in [&self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc] {
            if w.shape() != [u, d] {
                return Err(Error::dim("lstm input weights", w.shape(), &[u, d]));
            }
        }
        for w in [&self.w_hi, &self.w_hf, &self.w_ho, &self.w_hc] {
            if w.shape() != [u, u] {
                return Err(Error::dim("lstm hidden weights", w.shape(), &[u, u]));
            }
        }
        for b in [&self.b_i, &self.b_f, &self.b_o, &self.b_c] {
            if b.shape() != [u] {
                return Err(Error::dim("lstm bias", b.shape(), &[u]));
            }
        }
        Ok(())
    }

    /// Gate-stacked copies: `wx` is `4u × d`, `wh` is `4u × u`, `b` is `4u`.
    fn pack(&self) -> Packed {
        let mut wx = Vec::with_capacity(4 * self.w_xi.len());
        for w in [&self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc] {
            wx.extend_from_slice(w.data());
        }
        let mut wh = Vec::with_capacity(4 * self.w_hi.len());
        for w in [&self.w_hi, &self.w_hf, &self.w_ho, &self.w_hc] {
            wh.extend_from_slice(w.data());
        }
        let mut b = Vec::with_capacity(4 * self.units());
        for v in [&self.b_i, &self.b_f, &self.b_o, &self.b_c] {
            b.extend_from_slice(v.data());
        }
        Packed {
            units: self.units(),
            input_dim: self.input_dim(),
            wx,
            wh,
            b,
        }
    }

    fn unpack(units: usize, input_dim: usize, wx: &[f64], wh: &[f64], b: &[f64]) -> Self {
        let mut p = Self::zeros(input_dim, units);
        let (nx, nh) = (units * input_dim, units * units);
        for (g, w) in [&mut p.w_xi, &mut p.w_xf, &mut p.w_xo, &mut p.w_xc].into_iter().enumerate() {
            w.data_mut().copy_from_slice(&wx[g * nx..(g + 1) * nx]);
        }
        for (g, w) in [&mut p.w_hi, &mut p.w_hf, &mut p.w_ho, &mut p.w_hc].into_iter().enumerate() {
            w.data_mut().copy_from_slice(&wh[g * nh..(g + 1) * nh]);
        }
        for (g, v) in [&mut p.b_i, &mut p.b_f, &mut p.b_o, &mut p.b_c].into_iter().enumerate() {
            v.data_mut().copy_from_slice(&b[g * units..(g + 1) * units]);
        }
        p
    }
}

#[derive(Debug, Clone)]
struct Packed {
    units: usize,
    input_dim: usize,
    wx: Vec<f64>,
    wh: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState {
            h: vec![0.0; units],
            c: vec![0.0; units],
        }
    }
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: usize,
    batch: usize,
    packed: Packed,
    x: Vec<f64>,
    /// Activated gates `[T, B, 4u]`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    h0: Vec<f64>,
    c0: Vec<f64>,
}

impl LstmCache {
    pub fn output_shape(&self) -> [usize; 3] {
        [self.steps, self.batch, self.packed.units]
    }
}

fn seq_dims(x: &ParamTensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, b, d] => Ok((t, b, d)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 0])),
    }
}

/// Runs one LSTM over a batch of equal-length sequences `[T, B, d]`.
///
/// `init` supplies `(h0, c0)` as `B × units` row-major blocks; zero state
/// otherwise.
pub fn lstm_forward_batch(
    x: &ParamTensor,
    p: &LstmParams,
    init: Option<(&[f64], &[f64])>,
) -> Result<(ParamTensor, LstmCache)> {
    p.validate()?;
    let (steps, batch, d) = seq_dims(x, "lstm_forward")?;
    if d != p.input_dim() {
        return Err(Error::dim("lstm_forward input", x.shape(), &[steps, batch, p.input_dim()]));
    }
    let u = p.units();
    let g4 = 4 * u;
    let (h0, c0) = match init {
        Some((h, c)) => {
            if h.len() != batch * u || c.len() != batch * u {
                return Err(Error::dim("lstm initial state", &[h.len(), c.len()], &[batch * u, batch * u]));
            }
            (h.to_vec(), c.to_vec())
        }
        None => (vec![0.0; batch * u], vec![0.0; batch * u]),
    };
    let packed = p.pack();
    let xd = x.data();

    // Pre-activations: bias, then input projection, then recurrent term.
    let mut gates = vec![0.0; steps * batch * g4];
    for row in gates.chunks_exact_mut(g4) {
        row.copy_from_slice(&packed.b);
    }
    gemm(
        Mat::rm(xd, steps * batch, d),
        Mat::rm(&packed.wx, g4, d).t(),
        &mut gates,
        g4,
        true,
    );

    let n = batch * u;
    let mut c = vec![0.0; steps * n];
    let mut tanh_c = vec![0.0; steps * n];
    let mut h = vec![0.0; steps * n];
    for t in 0..steps {
        let z = &mut gates[t * batch * g4..(t + 1) * batch * g4];
        {
            let h_prev: &[f64] = if t == 0 { &h0 } else { &h[(t - 1) * n..t * n] };
            gemm(Mat::rm(h_prev, batch, u), Mat::rm(&packed.wh, g4, u).t(), z, g4, true);
        }
        for zr in z.chunks_exact_mut(g4) {
            sigmoid_in_place(&mut zr[..3 * u]);
            tanh_in_place(&mut zr[3 * u..]);
        }
        let (done, rest) = c.split_at_mut(t * n);
        let c_prev: &[f64] = if t == 0 { &c0 } else { &done[(t - 1) * n..] };
        let ct = &mut rest[..n];
        for (b, zr) in z.chunks_exact(g4).enumerate() {
            let (gi, gf, cc) = (&zr[..u], &zr[u..2 * u], &zr[3 * u..]);
            let row = b * u..(b + 1) * u;
            for (((o, &p), &i), (&f, &g)) in ct[row.clone()].iter_mut().zip(&c_prev[row]).zip(gi).zip(gf.iter().zip(cc)) {
                *o = i * g + f * p;
            }
        }
        let tc = &mut tanh_c[t * n..(t + 1) * n];
        tc.copy_from_slice(ct);
        tanh_in_place(tc);
        let ht = &mut h[t * n..(t + 1) * n];
        for (b, zr) in z.chunks_exact(g4).enumerate() {
            let go = &zr[2 * u..3 * u];
            for ((o, &g), &v) in ht[b * u..(b + 1) * u].iter_mut().zip(go).zip(&tc[b * u..(b + 1) * u]) {
                *o = g * v;
            }
        }
    }

    let out = ParamTensor::new(vec![steps, batch, u], h.clone())?;
    let cache = LstmCache {
        steps,
        batch,
        packed,
        x: xd.to_vec(),
        gates,
        c,
        tanh_c,
        h,
        h0,
        c0,
    };
    Ok((out, cache))
}

/// Backpropagation through time. Returns the input gradient `[T, B, d]`
/// and parameter gradients; the initial state is treated as a constant.
pub fn lstm_backward_batch(cache: &LstmCache, grad_out: &ParamTensor) -> Result<(ParamTensor, LstmParams)> {
    if grad_out.shape() != cache.output_shape() {
        return Err(Error::Cache(format!(
            "lstm gradient shape {:?}, cache produced {:?}",
            grad_out.shape(),
            cache.output_shape()
        )));
    }
    let (steps, batch) = (cache.steps, cache.batch);
    let (u, d) = (cache.packed.units, cache.packed.input_dim);
    let (g4, n) = (4 * u, batch * u);
    let go = grad_out.data();

    let mut dz = vec![0.0; steps * batch * g4];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    for t in (0..steps).rev() {
        for b in 0..batch {
            let base = t * batch * g4 + b * g4;
            let gr = &cache.gates[base..base + g4];
            let dzr = &mut dz[base..base + g4];
            for j in 0..u {
                let k = b * u + j;
                let idx = t * n + k;
                let (gi, gf, gout, cc) = (gr[j], gr[u + j], gr[2 * u + j], gr[3 * u + j]);
                let tc = cache.tanh_c[idx];
                let dh = go[idx] + dh_next[k];
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * gout * (1.0 - tc * tc);
                let c_prev = if t == 0 { cache.c0[k] } else { cache.c[idx - n] };
                dzr[j] = dc * cc * gi * (1.0 - gi);
                dzr[u + j] = dc * c_prev * gf * (1.0 - gf);
                dzr[2 * u + j] = d_o * gout * (1.0 - gout);
                dzr[3 * u + j] = dc * gi * (1.0 - cc * cc);
                dc_next[k] = dc * gf;
            }
        }
        let dzt = &dz[t * batch * g4..(t + 1) * batch * g4];
        gemm(Mat::rm(dzt, batch, g4), Mat::rm(&cache.packed.wh, g4, u), &mut dh_next, u, false);
    }

    let tb = steps * batch;
    let mut dwx = vec![0.0; g4 * d];
    gemm(Mat::rm(&dz, tb, g4).t(), Mat::rm(&cache.x, tb, d), &mut dwx, d, false);

    // h_{t-1} for every step, stacked.
    let mut h_prev = Vec::with_capacity(tb * u);
    h_prev.extend_from_slice(&cache.h0);
    h_prev.extend_from_slice(&cache.h[..(steps - 1) * n]);
    let mut dwh = vec![0.0; g4 * u];
    gemm(Mat::rm(&dz, tb, g4).t(), Mat::rm(&h_prev, tb, u), &mut dwh, u, false);

    let mut db = vec![0.0; g4];
    for row in dz.chunks_exact(g4) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let mut dx = vec![0.0; tb * d];
    gemm(Mat::rm(&dz, tb, g4), Mat::rm(&cache.packed.wx, g4, d), &mut dx, d, false);

    let grads = LstmParams::unpack(u, d, &dwx, &dwh, &db);
    Ok((ParamTensor::new(vec![steps, batch, d], dx)?, grads))
}

/// One step of the recurrence for a single sequence.
pub fn lstm_cell(x_t: &[f64], state: &LstmState, p: &LstmParams) -> Result<LstmState> {
    let u = p.units();
    if state.h.len() != u || state.c.len() != u {
        return Err(Error::dim("lstm_cell state", &[state.h.len(), state.c.len()], &[u, u]));
    }
    let x = ParamTensor::new(vec![1, 1, x_t.len()], x_t.to_vec())?;
    let (out, cache) = lstm_forward_batch(&x, p, Some((&state.h, &state.c)))?;
    Ok(LstmState {
        h: out.into_data(),
        c: cache.c,
    })
}

/// Unrolls the LSTM over `seq` (`T × input_dim`) and returns every hidden
/// state as `T × units`.
pub fn lstm_forward(seq: &ParamTensor, p: &LstmParams, init: Option<&LstmState>) -> Result<ParamTensor> {
    let (t, d) = seq_2d(seq, "lstm_forward")?;
    let x = seq.clone().reshape(vec![t, 1, d])?;
    let init = init.map(|s| (s.h.as_slice(), s.c.as_slice()));
    let (out, _) = lstm_forward_batch(&x, p, init)?;
    out.reshape(vec![t, p.units()])
}

fn seq_2d(seq: &ParamTensor, op: &'static str) -> Result<(usize, usize)> {
    match *seq.shape() {
        [t, d] => Ok((t, d)),
        _ => Err(Error::EmptyInput(op)),
    }
}

/// Reverses the time axis of a `[T, ...]` tensor.
pub fn reverse_time(x: &ParamTensor) -> ParamTensor {
    let t = x.shape()[0];
    let w = x.len() / t;
    let mut data = Vec::with_capacity(x.len());
    for s in (0..t).rev() {
        data.extend_from_slice(&x.data()[s * w..(s + 1) * w]);
    }
    ParamTensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

/// Bidirectional pass over `[T, B, d]`; output `[T, B, 2u]` with the forward
/// direction in the first `u` features of each step.
pub fn bilstm_forward_batch(x: &ParamTensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<(ParamTensor, BiLstmCache)> {
    if fwd.units() != bwd.units() {
        return Err(Error::Config(format!(
            "bilstm directions disagree on units: {} vs {}",
            fwd.units(),
            bwd.units()
        )));
    }
    let (steps, batch, _) = seq_dims(x, "bilstm_forward")?;
    let u = fwd.units();
    let (out_f, cache_f) = lstm_forward_batch(x, fwd, None)?;
    let (out_b, cache_b) = lstm_forward_batch(&reverse_time(x), bwd, None)?;
    let out_b = reverse_time(&out_b);
    let mut out = Vec::with_capacity(steps * batch * 2 * u);
    for (f, b) in out_f.data().chunks_exact(u).zip(out_b.data().chunks_exact(u)) {
        out.extend_from_slice(f);
        out.extend_from_slice(b);
    }
    Ok((
        ParamTensor::new(vec![steps, batch, 2 * u], out)?,
        BiLstmCache { fwd: cache_f, bwd: cache_b },
    ))
}

pub fn bilstm_backward_batch(cache: &BiLstmCache, grad_out: &ParamTensor) -> Result<(ParamTensor, LstmParams, LstmParams)> {
    let [steps, batch, u] = cache.fwd.output_shape();
    if grad_out.shape() != [steps, batch, 2 * u] {
        return Err(Error::Cache(format!(
            "bilstm gradient shape {:?}, cache produced {:?}",
            grad_out.shape(),
            [steps, batch, 2 * u]
        )));
    }
    let mut gf = Vec::with_capacity(steps * batch * u);
    let mut gb = Vec::with_capacity(steps * batch * u);
    for row in grad_out.data().chunks_exact(2 * u) {
        gf.extend_from_slice(&row[..u]);
        gb.extend_from_slice(&row[u..]);
    }
    let gf = ParamTensor::new(vec![steps, batch, u], gf)?;
    let gb = reverse_time(&ParamTensor::new(vec![steps, batch, u], gb)?);
    let (mut dx, grad_f) = lstm_backward_batch(&cache.fwd, &gf)?;
    let (dx_b, grad_b) = lstm_backward_batch(&cache.bwd, &gb)?;
    dx.add_assign(&reverse_time(&dx_b))?;
    Ok((dx, grad_f, grad_b))
}

/// Bidirectional pass over a single sequence `T × d` → `T × 2u`.
pub fn bilstm_forward(seq: &ParamTensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<ParamTensor> {
    let (t, d) = seq_2d(seq, "bilstm_forward")?;
    let x = seq.clone().reshape(vec![t, 1, d])?;
    let (out, _) = bilstm_forward_batch(&x, fwd, bwd)?;
    out.reshape(vec![t, 2 * fwd.units()])
}
