//! Valid-padding 1-D convolution (cross-correlation orientation) and
//! stride-2 max pooling over `L × C` time-major frames.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::numcore::ParamTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    /// `F × C × N_f`
    pub filters: ParamTensor,
    /// `F`
    pub bias: ParamTensor,
}

impl Conv1dParams {
    pub fn zeros(in_channels: usize, n_filters: usize, taps: usize) -> Self {
        Conv1dParams {
            filters: ParamTensor::zeros(&[n_filters, in_channels, taps]),
            bias: ParamTensor::zeros(&[n_filters]),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, n_filters: usize, taps: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((in_channels * taps) as f64).sqrt();
        Conv1dParams {
            filters: ParamTensor::uniform(&[n_filters, in_channels, taps], bound, rng),
            bias: ParamTensor::zeros(&[n_filters]),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn taps(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.rank() != 3 || self.bias.shape() != [self.n_filters()] {
            return Err(Error::dim("conv1d params", self.filters.shape(), self.bias.shape()));
        }
        Ok(())
    }

    /// Filters rearranged as a `(N_f·C) × F` matrix with rows ordered
    /// tap-major, matching the layout of a contiguous input window.
    fn window_major(&self) -> Vec<f64> {
        let (f, c, k) = (self.n_filters(), self.in_channels(), self.taps());
        let w = self.filters.data();
        let mut out = vec![0.0; k * c * f];
        for fi in 0..f {
            for ci in 0..c {
                for j in 0..k {
                    out[(j * c + ci) * f + fi] = w[(fi * c + ci) * k + j];
                }
            }
        }
        out
    }
}

pub fn conv1d_out_len(len: usize, taps: usize) -> Option<usize> {
    (len >= taps).then(|| len - taps + 1)
}

fn frame_dims(x: &ParamTensor, op: &'static str) -> Result<(usize, usize)> {
    match *x.shape() {
        [l, c] => Ok((l, c)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0])),
    }
}

/// `out[i][f] = b_f + Σ_j Σ_c filters[f][c][j]·x[i+j][c]`, accumulated in
/// tap-major, channel-minor order.
pub fn conv1d(x: &ParamTensor, p: &Conv1dParams) -> Result<ParamTensor> {
    let w = p.window_major();
    conv1d_with(x, p, &w)
}

fn conv1d_with(x: &ParamTensor, p: &Conv1dParams, window_major: &[f64]) -> Result<ParamTensor> {
    p.validate()?;
    let (l, c) = frame_dims(x, "conv1d")?;
    if c != p.in_channels() {
        return Err(Error::dim("conv1d channels", x.shape(), p.filters.shape()));
    }
    let k = p.taps();
    let lo = conv1d_out_len(l, k).ok_or(Error::InputTooShort { op: "conv1d", len: l, min: k })?;
    let f = p.n_filters();
    let mut out = Vec::with_capacity(lo * f);
    for _ in 0..lo {
        out.extend_from_slice(p.bias.data());
    }
    // Row i of the window matrix is the contiguous slice x[i..i+k].
    gemm(
        Mat::new(x.data(), lo, k * c, c, 1),
        Mat::rm(window_major, k * c, f),
        &mut out,
        f,
        true,
    );
    ParamTensor::new(vec![lo, f], out)
}

/// Forward pass over many frames sharing one filter bank.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    window_major: Vec<f64>,
}

impl Conv1dLayer {
    pub fn new(p: &Conv1dParams) -> Self {
        Conv1dLayer {
            window_major: p.window_major(),
        }
    }

    pub fn forward(&self, x: &ParamTensor, p: &Conv1dParams) -> Result<ParamTensor> {
        conv1d_with(x, p, &self.window_major)
    }

    /// Accumulates filter/bias gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        x: &ParamTensor,
        p: &Conv1dParams,
        grad_out: &ParamTensor,
        grads: &mut Conv1dGradAccumulator,
    ) -> Result<ParamTensor> {
        let (l, c) = frame_dims(x, "conv1d backward")?;
        let k = p.taps();
        let f = p.n_filters();
        let lo = conv1d_out_len(l, k).ok_or(Error::InputTooShort { op: "conv1d", len: l, min: k })?;
        if grad_out.shape() != [lo, f] {
            return Err(Error::Cache(format!(
                "conv1d gradient shape {:?}, forward produced {:?}",
                grad_out.shape(),
                [lo, f]
            )));
        }
        let g = grad_out.data();
        for row in g.chunks_exact(f) {
            for (acc, v) in grads.bias.iter_mut().zip(row) {
                *acc += v;
            }
        }
        gemm(
            Mat::new(x.data(), lo, k * c, c, 1).t(),
            Mat::rm(g, lo, f),
            &mut grads.window_major,
            f,
            true,
        );
        let mut dwin = vec![0.0; lo * k * c];
        gemm(
            Mat::rm(g, lo, f),
            Mat::rm(&self.window_major, k * c, f).t(),
            &mut dwin,
            k * c,
            false,
        );
        let mut dx = vec![0.0; l * c];
        for i in 0..lo {
            let src = &dwin[i * k * c..(i + 1) * k * c];
            for (d, s) in dx[i * c..(i + k) * c].iter_mut().zip(src) {
                *d += s;
            }
        }
        ParamTensor::new(vec![l, c], dx)
    }
}

/// Gradient buffer in the kernel's internal layout; converted once per
/// backward sweep.
#[derive(Debug, Clone)]
pub struct Conv1dGradAccumulator {
    in_channels: usize,
    n_filters: usize,
    taps: usize,
    window_major: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv1dGradAccumulator {
    pub fn new(p: &Conv1dParams) -> Self {
        let (f, c, k) = (p.n_filters(), p.in_channels(), p.taps());
        Conv1dGradAccumulator {
            in_channels: c,
            n_filters: f,
            taps: k,
            window_major: vec![0.0; k * c * f],
            bias: vec![0.0; f],
        }
    }

    pub fn finish(self) -> Conv1dParams {
        let (f, c, k) = (self.n_filters, self.in_channels, self.taps);
        let mut filters = vec![0.0; f * c * k];
        for fi in 0..f {
            for ci in 0..c {
                for j in 0..k {
                    filters[(fi * c + ci) * k + j] = self.window_major[(j * c + ci) * f + fi];
                }
            }
        }
        Conv1dParams {
            filters: ParamTensor::new(vec![f, c, k], filters).expect("consistent extents"),
            bias: ParamTensor::new(vec![f], self.bias).expect("consistent extents"),
        }
    }
}

/// Pool of size 2, stride 2. A trailing odd row is dropped.
pub fn maxpool1d(x: &ParamTensor) -> Result<(ParamTensor, Vec<usize>)> {
    let (l, f) = frame_dims(x, "maxpool1d")?;
    if l < 2 {
        return Err(Error::InputTooShort { op: "maxpool1d", len: l, min: 2 });
    }
    let lo = l / 2;
    let d = x.data();
    let mut out = Vec::with_capacity(lo * f);
    let mut arg = Vec::with_capacity(lo * f);
    for i in 0..lo {
        for fi in 0..f {
            let a = (2 * i) * f + fi;
            let b = a + f;
            // ties resolve to the lower index
            let pick = if d[b] > d[a] { b } else { a };
            out.push(d[pick]);
            arg.push(pick);
        }
    }
    Ok((ParamTensor::new(vec![lo, f], out)?, arg))
}

pub fn maxpool1d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &ParamTensor) -> Result<ParamTensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Cache(format!(
            "maxpool gradient has {} entries, cache {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut dx = ParamTensor::zeros(input_shape);
    let dd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dd[i] += g;
    }
    Ok(dx)
}
