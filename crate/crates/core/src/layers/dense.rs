use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::numcore::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `out × in`
    pub w: ParamTensor,
    /// `out`
    pub b: ParamTensor,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseParams {
            w: ParamTensor::zeros(&[output, input]),
            b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        DenseParams {
            w: ParamTensor::uniform(&[output, input], 1.0 / (input as f64).sqrt(), rng),
            b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.rank() != 2 || self.b.shape() != [self.output_dim()] {
            return Err(Error::dim("dense params", self.w.shape(), self.b.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    rows: usize,
    activation: Activation,
}

/// Applies `activation(W·x + b)` to each row of `x` (`B × in`).
pub fn dense_forward_batch(x: &ParamTensor, p: &DenseParams, activation: Activation) -> Result<(ParamTensor, DenseCache)> {
    p.validate()?;
    let (rows, input) = match *x.shape() {
        [r, i] => (r, i),
        [i] => (1, i),
        _ => return Err(Error::dim("dense", x.shape(), p.w.shape())),
    };
    if input != p.input_dim() {
        return Err(Error::dim("dense", x.shape(), p.w.shape()));
    }
    let out = p.output_dim();
    let mut pre = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        pre.extend_from_slice(p.b.data());
    }
    gemm(Mat::rm(x.data(), rows, input), Mat::rm(p.w.data(), out, input).t(), &mut pre, out, true);
    let y: Vec<f64> = match activation {
        Activation::Identity => pre.clone(),
        Activation::Relu => pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    };
    let shape = if x.rank() == 1 { vec![out] } else { vec![rows, out] };
    Ok((
        ParamTensor::new(shape, y)?,
        DenseCache {
            x: x.data().to_vec(),
            pre,
            rows,
            activation,
        },
    ))
}

pub fn dense(x: &ParamTensor, p: &DenseParams, activation: Activation) -> Result<ParamTensor> {
    dense_forward_batch(x, p, activation).map(|(y, _)| y)
}

pub fn dense_backward_batch(cache: &DenseCache, p: &DenseParams, grad_out: &ParamTensor) -> Result<(ParamTensor, DenseParams)> {
    let (out, input) = (p.output_dim(), p.input_dim());
    if grad_out.len() != cache.rows * out || cache.x.len() != cache.rows * input {
        return Err(Error::Cache(format!(
            "dense gradient has {} entries, cache expects {}x{}",
            grad_out.len(),
            cache.rows,
            out
        )));
    }
    let gpre: Vec<f64> = match cache.activation {
        Activation::Identity => grad_out.data().to_vec(),
        Activation::Relu => grad_out
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect(),
    };
    let mut dw = vec![0.0; out * input];
    gemm(
        Mat::rm(&gpre, cache.rows, out).t(),
        Mat::rm(&cache.x, cache.rows, input),
        &mut dw,
        input,
        false,
    );
    let mut db = vec![0.0; out];
    for row in gpre.chunks_exact(out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![0.0; cache.rows * input];
    gemm(Mat::rm(&gpre, cache.rows, out), Mat::rm(p.w.data(), out, input), &mut dx, input, false);
    let shape = if grad_out.rank() == 1 { vec![input] } else { vec![cache.rows, input] };
    Ok((
        ParamTensor::new(shape, dx)?,
        DenseParams {
            w: ParamTensor::new(vec![out, input], dw)?,
            b: ParamTensor::new(vec![out], db)?,
        },
    ))
}
