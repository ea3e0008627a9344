//! Dense row-major arrays, matrix products, pointwise activations and a
//! central-difference gradient checker.
//!
//! All numerics are `f64`. Layout is row-major everywhere: the last axis is
//! contiguous.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};

/// Dense `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("ParamTensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(-bound..bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1..].iter().product::<usize>();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &ParamTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamTensor {
        ParamTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &ParamTensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<ParamTensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(ParamTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// `c = a · b` for rank-2 tensors.
pub fn matmul(a: &ParamTensor, b: &ParamTensor) -> Result<ParamTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = ParamTensor::zeros(&[m, n]);
    gemm(Mat::rm(&a.data, m, k), Mat::rm(&b.data, k, n), &mut c.data, n, false);
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

// exp(x) = 2^k · e^r with |r| ≤ ln2/2; the split constant keeps k·LN2_HI exact.
const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
// 1/n! for n = 13 down to 2
const EXP_POLY: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
];

/// Exponential built from plain arithmetic so slice loops vectorize and
/// every code path rounds identically. Within a few ulp of `f64::exp` on
/// `[-708, 709]`; saturates outside it.
#[inline(always)]
pub fn exp_scalar(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * LOG2_E + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let mut p = EXP_POLY[0];
    for &c in &EXP_POLY[1..] {
        p = p * r + c;
    }
    let p = (p * r + 1.0) * r + 1.0;
    // low bits of `t` hold k in two's complement
    let ki = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let e = p * f64::from_bits(ki.wrapping_add(1023) << 52);
    if x.is_nan() {
        x
    } else {
        e
    }
}

#[inline(always)]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + exp_scalar(-x))
}

#[inline(always)]
pub fn tanh_scalar(x: f64) -> f64 {
    let e = exp_scalar(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

macro_rules! slice_kernel {
    ($name:ident, $f:ident) => {
        pub fn $name(xs: &mut [f64]) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                unsafe fn wide(xs: &mut [f64]) {
                    for v in xs {
                        *v = $f(*v);
                    }
                }
                #[target_feature(enable = "avx2")]
                unsafe fn narrow(xs: &mut [f64]) {
                    for v in xs {
                        *v = $f(*v);
                    }
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: feature detected at runtime.
                    return unsafe { wide(xs) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { narrow(xs) };
                }
            }
            for v in xs {
                *v = $f(*v);
            }
        }
    };
}

slice_kernel!(sigmoid_in_place, sigmoid_scalar);
slice_kernel!(tanh_in_place, tanh_scalar);

#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn unary(op: UnaryOp, x: &ParamTensor) -> ParamTensor {
    match op {
        UnaryOp::Sigmoid => x.map(sigmoid_scalar),
        UnaryOp::Tanh => x.map(tanh_scalar),
        UnaryOp::Relu => x.map(relu_scalar),
    }
}

/// Pointwise binary op; `Mul` is the Hadamard product.
pub fn binary(op: BinaryOp, a: &ParamTensor, b: &ParamTensor) -> Result<ParamTensor> {
    match op {
        BinaryOp::Add => a.zip_with(b, "add", |x, y| x + y),
        BinaryOp::Mul => a.zip_with(b, "mul", |x, y| x * y),
    }
}

pub fn sigmoid(x: &ParamTensor) -> ParamTensor {
    unary(UnaryOp::Sigmoid, x)
}

pub fn tanh(x: &ParamTensor) -> ParamTensor {
    unary(UnaryOp::Tanh, x)
}

pub fn relu(x: &ParamTensor) -> ParamTensor {
    unary(UnaryOp::Relu, x)
}

pub fn add(a: &ParamTensor, b: &ParamTensor) -> Result<ParamTensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn mul(a: &ParamTensor, b: &ParamTensor) -> Result<ParamTensor> {
    binary(BinaryOp::Mul, a, b)
}

pub const DEFAULT_GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central differences of `f`.
///
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, analytic: &ParamTensor, x: &ParamTensor, h: f64) -> Result<f64>
where
    F: Fn(&ParamTensor) -> f64,
{
    if analytic.shape() != x.shape() {
        return Err(Error::dim("grad_check", analytic.shape(), x.shape()));
    }
    let mut probe = x.clone();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!("non-finite value at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic.data[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
